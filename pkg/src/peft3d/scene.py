"""Procedural synthetic-identity world.

Identities are 16-component parameter vectors in [-1, 1] rendered by an
exact ray-traced rasterizer: a shaded ellipsoid head with eyes, nose, mouth,
hair, and forehead wrinkles painted in head-local coordinates, rotated by a
(yaw, pitch) camera pose and orthographically projected.  The renderer is the
ground-truth oracle for every image-level claim in the repo: poses are known
exactly, the mouth-curvature and wrinkle statistics are recoverable from
pixels, and the background mask is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .seeding import derive_seed
from .serialization import canonical_json, digest_text, read_json, write_json

PARAM_NAMES = (
    "head_width",
    "head_height",
    "head_depth",
    "skin_r",
    "skin_g",
    "skin_b",
    "hair_r",
    "hair_g",
    "hair_b",
    "eye_spacing",
    "eye_size",
    "smile",
    "mouth_width",
    "nose_length",
    "age",
    "hairstyle",
)
N_PARAMS = len(PARAM_NAMES)
SMILE_INDEX = PARAM_NAMES.index("smile")
AGE_INDEX = PARAM_NAMES.index("age")

# Pose limits: corpus generation may use the full range, evaluation sweeps
# stay in the narrower one.
GEN_YAW_LIMIT = 0.6
GEN_PITCH_LIMIT = 0.4
EVAL_YAW_LIMIT = 0.35
EVAL_PITCH_LIMIT = 0.25

RESOLUTIONS = (16, 32, 64)
BACKGROUND = np.array([0.16, 0.18, 0.21])
# Direction toward the light, fixed per corpus; zero x-component keeps
# renders mirror-symmetric under yaw negation.
_LIGHT = np.array([0.0, 0.35, -0.9])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)

# Per-image jitter applied at corpus generation: a photo album of one person
# spans expressions and a little aging, which is what makes anchor hulls and
# attribute edits non-degenerate.
SMILE_JITTER = 0.35
AGE_JITTER = 0.15

CORPUS_VERSION = "1"


class PoseRangeError(ValueError):
    pass


@dataclass(frozen=True)
class CameraPose:
    yaw: float
    pitch: float

    def validate(self, yaw_limit: float = GEN_YAW_LIMIT, pitch_limit: float = GEN_PITCH_LIMIT) -> None:
        if abs(self.yaw) > yaw_limit + 1e-9 or abs(self.pitch) > pitch_limit + 1e-9:
            raise PoseRangeError(
                f"pose (yaw={self.yaw:.3f}, pitch={self.pitch:.3f}) outside "
                f"|yaw|<={yaw_limit}, |pitch|<={pitch_limit}"
            )


@dataclass(frozen=True)
class IdentityParams:
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != N_PARAMS:
            raise ValueError(f"expected {N_PARAMS} parameters, got {len(self.values)}")
        if any(abs(v) > 1.0 + 1e-9 for v in self.values):
            raise ValueError("identity parameters must lie in [-1, 1]")

    def __getitem__(self, name: str) -> float:
        return self.values[PARAM_NAMES.index(name)]

    def replace(self, **kwargs: float) -> "IdentityParams":
        vals = list(self.values)
        for name, v in kwargs.items():
            vals[PARAM_NAMES.index(name)] = float(np.clip(v, -1.0, 1.0))
        return IdentityParams(tuple(vals))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def sample_identity(seed: int) -> IdentityParams:
    """Deterministic identity vector; distinct seeds differ with probability 1."""
    gen = np.random.default_rng(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    return IdentityParams(tuple(gen.uniform(-1.0, 1.0, N_PARAMS).tolist()))


def sample_pose(
    gen: np.random.Generator,
    yaw_limit: float = GEN_YAW_LIMIT,
    pitch_limit: float = GEN_PITCH_LIMIT,
) -> CameraPose:
    return CameraPose(float(gen.uniform(-yaw_limit, yaw_limit)), float(gen.uniform(-pitch_limit, pitch_limit)))


def rotation_matrix(pose: CameraPose) -> np.ndarray:
    """Head-local -> world rotation, R = Ry(yaw) @ Rx(pitch)."""
    cy, sy = math.cos(pose.yaw), math.sin(pose.yaw)
    cp, sp = math.cos(pose.pitch), math.sin(pose.pitch)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    return ry @ rx


def _geometry(p: np.ndarray) -> dict:
    return {
        "radii": np.array([0.55 + 0.10 * p[0], 0.70 + 0.10 * p[1], 0.60 + 0.08 * p[2]]),
        "skin": np.clip(np.array([0.78, 0.62, 0.52]) + 0.12 * p[3:6], 0.0, 1.0),
        "hair": np.clip(np.array([0.30, 0.22, 0.15]) + 0.18 * p[6:9], 0.02, 1.0),
        "eye_spacing": 0.28 + 0.08 * p[9],
        "eye_radius": 0.085 + 0.030 * p[10],
        "smile_curv": 0.16 * p[11],
        "mouth_halfwidth": 0.30 + 0.07 * p[12],
        "nose_len": 0.20 + 0.08 * p[13],
        "wrinkle_density": 0.5 * (p[14] + 1.0),
        "hairstyle": min(3, int(math.floor((p[15] + 1.0) * 2.0))),
    }


_EYE_V = 0.18
_MOUTH_V = -0.42
_MOUTH_THICK = 0.07
_NOSE_BASE_V = -0.25
_EYE_COLOR = np.array([0.08, 0.08, 0.10])
_MOUTH_COLOR = np.array([0.45, 0.13, 0.13])
_WRINKLE_VS = (0.32, 0.39, 0.46)


def _shade_surface(params: IdentityParams, pose: CameraPose, res: int, supersample: int = 2):
    """Ray-trace the head at res*supersample, return (rgb, hit) at final res."""
    p = params.as_array()
    geo = _geometry(p)
    radii = geo["radii"]
    rot = rotation_matrix(pose)

    n = res * supersample
    half = 1.0 / n
    coords = np.linspace(-1.0 + half, 1.0 - half, n)
    px, py = np.meshgrid(coords, -coords)  # row 0 is top (+y)

    # Orthographic rays o=(px,py,-2), d=(0,0,1) mapped into the head frame.
    rot_t = rot.T
    origin = np.stack([px, py, np.full_like(px, -2.0)], axis=-1) @ rot_t.T
    direction = rot_t @ np.array([0.0, 0.0, 1.0])

    inv2 = 1.0 / radii**2
    a = float(np.sum(direction**2 * inv2))
    b = 2.0 * (origin * direction * inv2).sum(axis=-1)
    c = (origin**2 * inv2).sum(axis=-1) - 1.0
    disc = b**2 - 4.0 * a * c
    hit = disc > 0.0
    t = np.where(hit, (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a), 0.0)
    local = origin + t[..., None] * direction  # head-frame surface points

    u = local[..., 0] / radii[0]
    v = local[..., 1] / radii[1]
    front = local[..., 2] < 0.0

    albedo = np.broadcast_to(geo["skin"], local.shape).copy()

    # nose: narrow highlight ridge (brighter, so it never reads as mouth)
    nose = front & (np.abs(u) <= 0.055) & (v >= _NOSE_BASE_V) & (v <= _NOSE_BASE_V + geo["nose_len"])
    albedo[nose] = np.minimum(albedo[nose] * 1.10, 1.0)

    # forehead wrinkles: horizontal darkened lines, contrast grows with density
    dens = geo["wrinkle_density"]
    if dens > 0.0:
        wr = np.zeros_like(u, dtype=bool)
        for wv in _WRINKLE_VS:
            wr |= np.abs(v - wv) <= 0.012
        wr &= front & (np.abs(u) <= 0.45) & (v >= 0.28) & (v <= 0.50)
        albedo[wr] *= 1.0 - 0.30 * dens

    # eyes
    es, er = geo["eye_spacing"], geo["eye_radius"]
    for sx in (-es, es):
        eye = front & ((u - sx) ** 2 + (v - _EYE_V) ** 2 <= er**2)
        albedo[eye] = _EYE_COLOR

    # mouth: parabolic band, corners raised by positive smile
    mw, curv = geo["mouth_halfwidth"], geo["smile_curv"]
    mouth_center = _MOUTH_V + curv * ((u / mw) ** 2 - 0.5)
    mouth = front & (np.abs(u) <= mw) & (np.abs(v - mouth_center) <= _MOUTH_THICK)
    albedo[mouth] = _MOUTH_COLOR

    # hair: cap (and side curtains for the long style), painted over features
    style = geo["hairstyle"]
    if style == 1:
        hair = v > 0.55
    elif style == 2:
        hair = v > 0.40
    elif style == 3:
        # side curtains stay above the head equator so they never reach the
        # mouth measurement band
        hair = (v > 0.40) | ((np.abs(u) >= 0.75) & (v > 0.0))
    else:
        hair = np.zeros_like(u, dtype=bool)
    albedo[hair] = geo["hair"]

    normal_local = local / radii**2
    nrm = np.linalg.norm(normal_local, axis=-1, keepdims=True)
    normal_world = (normal_local / np.maximum(nrm, 1e-12)) @ rot.T
    shade = 0.45 + 0.55 * np.maximum(0.0, normal_world @ _LIGHT)

    rgb = albedo * shade[..., None]
    rgb = np.where(hit[..., None], rgb, BACKGROUND)

    if supersample > 1:
        s = supersample
        rgb = rgb.reshape(res, s, res, s, 3).mean(axis=(1, 3))
        hitf = hit.reshape(res, s, res, s).mean(axis=(1, 3))
    else:
        hitf = hit.astype(np.float64)
    return np.clip(rgb, 0.0, 1.0), hitf


def render_gt(params: IdentityParams, pose: CameraPose, resolution: int = 64) -> np.ndarray:
    """Ground-truth render as an (H, W, 3) uint8 image."""
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    pose.validate()
    rgb, _ = _shade_surface(params, pose, resolution)
    return np.round(rgb * 255.0).astype(np.uint8)


def render_gt_float(params: IdentityParams, pose: CameraPose, resolution: int = 64) -> np.ndarray:
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    pose.validate()
    rgb, _ = _shade_surface(params, pose, resolution)
    return rgb


def background_mask(params: IdentityParams, pose: CameraPose, resolution: int = 64) -> np.ndarray:
    """Exact boolean mask, True where the pixel is background."""
    pose.validate()
    _, hit = _shade_surface(params, pose, resolution)
    return hit < 0.5


def face_bbox(params: IdentityParams, pose: CameraPose, resolution: int = 64) -> tuple[int, int, int, int]:
    """Bounding box (row0, col0, row1, col1), half-open, of the head pixels."""
    hit = ~background_mask(params, pose, resolution)
    rows = np.flatnonzero(hit.any(axis=1))
    cols = np.flatnonzero(hit.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def _luminance(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def _to_float_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def _face_scale(img: np.ndarray) -> float:
    """Half the row extent of non-background pixels, in pixels."""
    dist = np.abs(img - BACKGROUND).max(axis=-1)
    rows = np.flatnonzero((dist > 0.10).any(axis=1))
    if rows.size < 8:
        return float(img.shape[0]) / 2.0
    return max(4.0, (rows[-1] - rows[0]) / 2.0)


def _face_interior(img: np.ndarray, iters: int = 2) -> np.ndarray:
    """Non-background mask eroded by ~iters pixels; drops silhouette-rim pixels."""
    dist = np.abs(img - BACKGROUND).max(axis=-1)
    mask = dist > 0.10
    for _ in range(iters):
        m = mask.copy()
        m[1:, :] &= mask[:-1, :]
        m[:-1, :] &= mask[1:, :]
        m[:, 1:] &= mask[:, :-1]
        m[:, :-1] &= mask[:, 1:]
        mask = m
    return mask


def _largest_component(mass: np.ndarray) -> np.ndarray:
    """Zero out all but the connected component (8-neighbour) of largest mass."""
    active = mass > 0.0
    labels = np.zeros(mass.shape, dtype=np.int32)
    best_label, best_mass = 0, -1.0
    current = 0
    for start in zip(*np.nonzero(active)):
        if labels[start]:
            continue
        current += 1
        stack = [start]
        labels[start] = current
        total = 0.0
        while stack:
            i, j = stack.pop()
            total += mass[i, j]
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    ni, nj = i + di, j + dj
                    if 0 <= ni < mass.shape[0] and 0 <= nj < mass.shape[1]:
                        if active[ni, nj] and not labels[ni, nj]:
                            labels[ni, nj] = current
                            stack.append((ni, nj))
        if total > best_mass:
            best_mass, best_label = total, current
    return np.where(labels == best_label, mass, 0.0)


def mouth_curvature_stat(image: np.ndarray) -> float:
    """Dimensionless corner-lift of the mouth; positive for a smile.

    Inside the lower-center band, "mouthness" (dark AND red-dominant, which
    excludes eyes, hair and the blue-grey background) weights a per-column
    row centroid; the negated quadratic coefficient of the parabola fit in
    mass-standardized column coordinates is divided by the face scale, which
    makes the statistic invariant to head size, mouth width and mild pose.
    """
    img = _to_float_image(image)
    h, w = img.shape[:2]
    r0, r1 = round(0.53 * h), round(0.80 * h)
    c0, c1 = round(0.22 * w), round(0.78 * w)
    band = img[r0:r1, c0:c1]
    lum = _luminance(band)
    red_excess = band[..., 0] - band[..., 2]
    skin_level = np.percentile(lum, 70)
    mass = np.maximum(0.0, skin_level - lum) * np.maximum(0.0, red_excess)
    # silhouette-rim pixels are dark and reddish too; keep interior responses
    # only, and of those only the strong ones
    mass *= _face_interior(img)[r0:r1, c0:c1]
    if mass.max() <= 0.0:
        return 0.0
    mass = np.where(mass >= 0.40 * mass.max(), mass, 0.0)
    mass = _largest_component(mass)

    col_mass = mass.sum(axis=0)
    total = col_mass.sum()
    if total < 1e-6:
        return 0.0
    rows = np.arange(r0, r1, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        y = (mass * rows[:, None]).sum(axis=0) / np.maximum(col_mass, 1e-12)
    cols = np.arange(c0, c1, dtype=np.float64)
    xbar = (col_mass * cols).sum() / total
    xstd = math.sqrt(max(((col_mass * (cols - xbar) ** 2).sum() / total), 1e-12))
    if xstd < 0.5:
        return 0.0
    x = (cols - xbar) / xstd
    keep = col_mass > 1e-9
    if keep.sum() < 5:
        return 0.0
    sw = np.sqrt(col_mass[keep])
    design = np.stack([x[keep] ** 2, x[keep], np.ones(int(keep.sum()))], axis=1)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], y[keep] * sw, rcond=None)
    return float(-coef[0]) / _face_scale(img)


def forehead_wrinkle_stat(image: np.ndarray) -> float:
    """Vertical-gradient energy on skin-like forehead pixels; grows with age."""
    img = _to_float_image(image)
    h, w = img.shape[:2]
    r0, r1 = round(0.20 * h), round(0.40 * h)
    c0, c1 = round(0.32 * w), round(0.68 * w)
    band = img[r0:r1, c0:c1]
    lum = _luminance(band)
    red_excess = band[..., 0] - band[..., 2]
    skin = (lum > 0.30) & (red_excess > 0.02)
    grad = np.abs(np.diff(lum, axis=0))
    valid = skin[:-1] & skin[1:]
    if valid.sum() < 10:
        return 0.0
    return float(grad[valid].mean())


@dataclass(frozen=True)
class ImageRecord:
    identity_id: str
    name: str
    yaw: float
    pitch: float
    params: IdentityParams

    @property
    def pose(self) -> CameraPose:
        return CameraPose(self.yaw, self.pitch)


@dataclass
class IdentityCorpus:
    """On-disk corpus: corpus/<identity_id>/img_<k>.png (+ .json) + manifest."""

    root: Path
    identities: dict[str, IdentityParams]
    reference: dict[str, list[ImageRecord]] = field(default_factory=dict)
    test: dict[str, list[ImageRecord]] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    @property
    def identity_ids(self) -> list[str]:
        return sorted(self.identities)

    def records(self, identity_id: str, split: str = "all") -> list[ImageRecord]:
        if split == "reference":
            return list(self.reference[identity_id])
        if split == "test":
            return list(self.test[identity_id])
        return list(self.reference[identity_id]) + list(self.test[identity_id])

    def all_records(self, split: str = "all") -> list[ImageRecord]:
        out: list[ImageRecord] = []
        for ident in self.identity_ids:
            out.extend(self.records(ident, split))
        return out

    def image_path(self, rec: ImageRecord) -> Path:
        return self.root / rec.identity_id / f"{rec.name}.png"

    def load_image(self, rec: ImageRecord) -> np.ndarray:
        """Image as float32 RGB in [0, 1]."""
        arr = np.asarray(Image.open(self.image_path(rec)).convert("RGB"), dtype=np.float32)
        return arr / 255.0

    def manifest_digest(self) -> str:
        return digest_text(canonical_json(self.manifest))

    @staticmethod
    def load(root: str | Path) -> "IdentityCorpus":
        root = Path(root)
        manifest = read_json(root / "manifest.json")
        identities: dict[str, IdentityParams] = {}
        reference: dict[str, list[ImageRecord]] = {}
        test: dict[str, list[ImageRecord]] = {}
        for ident in manifest["identities"]:
            iid = ident["id"]
            identities[iid] = IdentityParams(tuple(ident["params"]))
            per_split = {"reference": [], "test": []}
            for split in ("reference", "test"):
                for name in ident[split]:
                    meta = read_json(root / iid / f"{name}.json")
                    per_split[split].append(
                        ImageRecord(
                            identity_id=iid,
                            name=name,
                            yaw=meta["yaw"],
                            pitch=meta["pitch"],
                            params=IdentityParams(tuple(meta["params_ref"])),
                        )
                    )
            reference[iid] = per_split["reference"]
            test[iid] = per_split["test"]
        return IdentityCorpus(root=root, identities=identities, reference=reference, test=test, manifest=manifest)


def generate_corpus(
    n_identities: int,
    images_per_identity: int,
    pose_sampler: Callable[[np.random.Generator], CameraPose] | None,
    seed: int,
    out_dir: str | Path,
    n_test: int = 10,
    resolution: int = 64,
    identity_offset: int = 0,
    force: bool = False,
) -> IdentityCorpus:
    """Render a corpus to disk; byte-reproducible given the same arguments."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"output directory {out} is not empty (pass force=True to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    if pose_sampler is None:
        pose_sampler = sample_pose
    if n_test >= images_per_identity:
        raise ValueError("n_test must be smaller than images_per_identity")

    identities = []
    id_entries = []
    for i in range(n_identities):
        idx = identity_offset + i
        iid = f"id{idx:04d}"
        base = sample_identity(derive_seed(seed, "identity", idx))
        gen = np.random.default_rng(derive_seed(seed, "images", idx))
        names_ref, names_test = [], []
        (out / iid).mkdir(exist_ok=True)
        for k in range(images_per_identity):
            pose = pose_sampler(gen)
            eff = base.replace(
                smile=base["smile"] + gen.uniform(-SMILE_JITTER, SMILE_JITTER),
                age=base["age"] + gen.uniform(-AGE_JITTER, AGE_JITTER),
            )
            name = f"img_{k:03d}"
            img = render_gt(eff, pose, resolution)
            Image.fromarray(img).save(out / iid / f"{name}.png")
            write_json(
                out / iid / f"{name}.json",
                {
                    "identity_id": iid,
                    "yaw": pose.yaw,
                    "pitch": pose.pitch,
                    "params_ref": list(eff.values),
                },
            )
            (names_test if k >= images_per_identity - n_test else names_ref).append(name)
        from .serialization import blob_digest  # local import to avoid cycle at module load

        image_digests = {n: blob_digest(out / iid / f"{n}.png") for n in names_ref + names_test}
        id_entries.append(
            {
                "id": iid,
                "params": list(base.values),
                "reference": names_ref,
                "test": names_test,
                "image_digests": image_digests,
            }
        )
        identities.append((iid, base))

    manifest = {
        "version": CORPUS_VERSION,
        "seed": int(seed),
        "n_identities": n_identities,
        "images_per_identity": images_per_identity,
        "n_test": n_test,
        "resolution": resolution,
        "identity_offset": identity_offset,
        "identities": id_entries,
    }
    write_json(out / "manifest.json", manifest)
    return IdentityCorpus.load(out)
