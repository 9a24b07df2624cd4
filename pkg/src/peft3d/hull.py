"""Personal latent-space geometry over anchor latents.

The hull of an identity is the set of convex combinations of its anchors.
Sampling, interpolation, Euclidean projection onto the hull (an accelerated
projected-gradient solve over the probability simplex), linear attribute
directions, and hull-constrained editing all live here.  Everything is pure
numpy given (hull, inputs).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .serialization import read_json, write_json

ALPHA_TOL = 1e-8


class ProjectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class AlphaCoords:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if np.any(v < -ALPHA_TOL) or abs(v.sum() - 1.0) > ALPHA_TOL:
            raise ValueError("alpha coordinates must be a probability vector")


@dataclass(frozen=True)
class EditDirection:
    vector: np.ndarray
    attribute: str
    margin: float

    def __post_init__(self):
        n = np.linalg.norm(self.vector)
        if abs(n - 1.0) > 1e-8:
            raise ValueError("edit direction must be unit norm")


@dataclass
class PersonalHull:
    anchors: np.ndarray  # (N, d), row order is stable
    concentration: float = 0.5

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        if self.anchors.ndim != 2 or self.anchors.shape[0] < 1:
            raise ValueError("hull needs an (N, d) anchor matrix with N >= 1")

    @property
    def n_anchors(self) -> int:
        return self.anchors.shape[0]

    def combine(self, alpha: np.ndarray) -> np.ndarray:
        return np.asarray(alpha, dtype=np.float64) @ self.anchors

    def centroid(self) -> np.ndarray:
        return self.anchors.mean(axis=0)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        alpha = rng.dirichlet(np.full(self.n_anchors, self.concentration))
        return self.combine(alpha)

    def sample_with_alpha(self, rng: np.random.Generator) -> tuple[np.ndarray, AlphaCoords]:
        alpha = rng.dirichlet(np.full(self.n_anchors, self.concentration))
        return self.combine(alpha), AlphaCoords(alpha)

    def interpolate_index(self, i: int, j: int, theta: float) -> np.ndarray:
        return interpolate(self.anchors[i], self.anchors[j], theta)


def sample_in_hull(hull: PersonalHull, seed: int) -> np.ndarray:
    """Dirichlet-weighted anchor combination; inside the hull by construction."""
    return hull.sample(np.random.default_rng(seed))


def interpolate(wa: np.ndarray, wb: np.ndarray, theta: float) -> np.ndarray:
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"interpolation weight must lie in [0, 1], got {theta}")
    wa = np.asarray(wa, dtype=np.float64)
    wb = np.asarray(wb, dtype=np.float64)
    return (1.0 - theta) * wa + theta * wb


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort algorithm)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(v) + 1)
    cond = u - css / idx > 0
    rho = idx[cond][-1]
    theta = css[cond][-1] / rho
    return np.maximum(v - theta, 0.0)


def _kkt_residual(alpha: np.ndarray, grad: np.ndarray) -> float:
    mu = grad.min()
    active = alpha > 1e-12
    if not active.any():
        return 0.0
    return float((grad[active] - mu).max())


def project_to_hull(w: np.ndarray, hull: PersonalHull, tol: float = 1e-8,
                    max_iter: int = 1000) -> tuple[np.ndarray, AlphaCoords]:
    """argmin over the hull of ||w - alpha @ anchors||_2, by accelerated
    projected gradient with a Lipschitz step, solved to a KKT residual.

    The default tolerance is tighter than the 1e-6 contract so that the
    projection is idempotent to 1e-6 in latent space as well.
    """
    m = hull.anchors
    n = m.shape[0]
    w = np.asarray(w, dtype=np.float64)
    if n == 1:
        return m[0].copy(), AlphaCoords(np.ones(1))

    gram = m @ m.T
    mw = m @ w
    lip = float(np.linalg.eigvalsh(gram)[-1])
    lip = max(lip, 1e-12)

    alpha = np.full(n, 1.0 / n)
    y = alpha.copy()
    t = 1.0
    prev = alpha.copy()
    for _ in range(max_iter):
        grad_y = gram @ y - mw
        alpha = project_simplex(y - grad_y / lip)
        grad = gram @ alpha - mw
        if _kkt_residual(alpha, grad) <= tol:
            return hull.combine(alpha), AlphaCoords(alpha)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = alpha + ((t - 1.0) / t_next) * (alpha - prev)
        if np.dot(grad_y, alpha - prev) > 0:  # adaptive restart
            y = alpha.copy()
            t_next = 1.0
        prev = alpha.copy()
        t = t_next
    grad = gram @ alpha - mw
    raise ProjectionError(
        f"hull projection did not reach KKT residual {tol:g} in {max_iter} iterations "
        f"(residual {_kkt_residual(alpha, grad):.3e})"
    )


def find_direction(latents: np.ndarray, labels: np.ndarray, attribute: str = "attr",
                   regularization: float = 1.0) -> EditDirection:
    """Unit normal of a soft-margin linear separator between the two classes."""
    from sklearn.svm import LinearSVC

    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if latents.shape[0] != labels.shape[0]:
        raise ValueError("latents and labels disagree in length")
    for cls in (0, 1):
        if (labels == cls).sum() < 10:
            raise ValueError(f"need >= 10 examples of class {cls}")
    svc = LinearSVC(C=regularization, dual=False, tol=1e-7, max_iter=50_000)
    svc.fit(latents, labels)
    if svc.score(latents, labels) < 1.0:
        warnings.warn(f"classes not linearly separable for {attribute!r}; fitted with slack")
    coef = svc.coef_[0]
    norm = np.linalg.norm(coef)
    if norm == 0.0:
        raise ValueError("degenerate separator (zero normal)")
    return EditDirection(vector=coef / norm, attribute=attribute, margin=float(1.0 / norm))


def edit_alpha(w: np.ndarray, direction: EditDirection, magnitude: float,
               hull: PersonalHull, mode: str = "w-projected",
               max_magnitude: float = 50.0) -> tuple[np.ndarray, AlphaCoords]:
    """Move along an attribute direction, staying inside the hull.

    ``w-projected`` (default) steps in latent space then projects back onto
    the hull; ``alpha-native`` takes the step on the barycentric coordinates
    directly (the direction pulled back through the anchor matrix).
    """
    if abs(magnitude) > max_magnitude:
        raise ValueError(f"edit magnitude {magnitude} exceeds cap {max_magnitude}")
    w = np.asarray(w, dtype=np.float64)
    if mode == "w-projected":
        return project_to_hull(w + magnitude * direction.vector, hull)
    if mode == "alpha-native":
        _, alpha = project_to_hull(w, hull)
        d_alpha = hull.anchors @ direction.vector
        nrm = np.linalg.norm(d_alpha)
        if nrm < 1e-12:
            return hull.combine(alpha.values), alpha
        new_alpha = project_simplex(alpha.values + magnitude * d_alpha / nrm)
        return hull.combine(new_alpha), AlphaCoords(new_alpha)
    raise ValueError(f"unknown edit mode {mode!r}")


# ---------------------------------------------------------------------------
# persistence


def save_hull(path: str | Path, identity_id: str, hull: PersonalHull,
              directions: dict[str, EditDirection] | None = None,
              extra: dict | None = None) -> None:
    payload = {
        "identity_id": identity_id,
        "anchors": [[float(x) for x in row] for row in hull.anchors],
        "concentration": hull.concentration,
        "directions": {
            name: {"vector": [float(x) for x in d.vector], "margin": d.margin}
            for name, d in (directions or {}).items()
        },
    }
    if extra:
        payload.update(extra)
    write_json(path, payload)


def load_hull(path: str | Path) -> tuple[str, PersonalHull, dict[str, EditDirection]]:
    data = read_json(path)
    hull = PersonalHull(np.array(data["anchors"], dtype=np.float64),
                        concentration=data.get("concentration", 0.5))
    directions = {
        name: EditDirection(vector=np.array(rec["vector"]), attribute=name, margin=rec["margin"])
        for name, rec in data.get("directions", {}).items()
    }
    return data["identity_id"], hull, directions
