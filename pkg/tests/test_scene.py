import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peft3d import scene
from peft3d.scene import CameraPose, IdentityParams


def spearman(a, b):
    ra = np.argsort(np.argsort(a)).astype(float)
    rb = np.argsort(np.argsort(b)).astype(float)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra * rb).sum() / np.sqrt((ra**2).sum() * (rb**2).sum()))


def test_sample_identity_deterministic():
    a = scene.sample_identity(123)
    b = scene.sample_identity(123)
    assert a == b


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=30, deadline=None)
def test_sample_identity_in_range(seed):
    p = scene.sample_identity(seed)
    arr = p.as_array()
    assert arr.shape == (16,)
    assert np.all(np.abs(arr) <= 1.0)


def test_adjacent_seeds_differ():
    a = scene.sample_identity(5).as_array()
    b = scene.sample_identity(6).as_array()
    assert np.any(a != b)


def test_render_rejects_bad_resolution():
    p = scene.sample_identity(1)
    with pytest.raises(ValueError):
        scene.render_gt(p, CameraPose(0, 0), 17)


def test_render_rejects_out_of_range_pose():
    p = scene.sample_identity(1)
    with pytest.raises(scene.PoseRangeError):
        scene.render_gt(p, CameraPose(0.7, 0.0), 64)
    with pytest.raises(scene.PoseRangeError):
        scene.render_gt(p, CameraPose(0.0, -0.5), 64)


def test_frontal_face_mirror_symmetric():
    p = IdentityParams(tuple([0.0] * 16))
    img = scene.render_gt(p, CameraPose(0.0, 0.0), 64).astype(int)
    assert np.abs(img - img[:, ::-1]).max() <= 1


def test_yaw_negation_mirrors_image():
    p = scene.sample_identity(9)
    a = scene.render_gt(p, CameraPose(0.3, 0.15), 64).astype(int)
    b = scene.render_gt(p, CameraPose(-0.3, 0.15), 64).astype(int)
    assert np.abs(a - b[:, ::-1]).max() <= 1


def test_render_deterministic():
    p = scene.sample_identity(3)
    a = scene.render_gt(p, CameraPose(0.1, -0.2), 32)
    b = scene.render_gt(p, CameraPose(0.1, -0.2), 32)
    assert np.array_equal(a, b)


def test_smile_strictly_monotone_in_curvature_stat():
    p = scene.sample_identity(7)
    stats = [
        scene.mouth_curvature_stat(scene.render_gt(p.replace(smile=s), CameraPose(0, 0), 64))
        for s in np.linspace(-1.0, 1.0, 7)
    ]
    assert all(b > a for a, b in zip(stats, stats[1:]))


def test_smile_sign_separates():
    p = scene.sample_identity(11)
    lo = scene.mouth_curvature_stat(scene.render_gt(p.replace(smile=-1.0), CameraPose(0, 0), 64))
    hi = scene.mouth_curvature_stat(scene.render_gt(p.replace(smile=1.0), CameraPose(0, 0), 64))
    assert lo < 0 < hi


def test_wrinkle_stat_increases_with_age():
    p = scene.sample_identity(7).replace(hairstyle=-1.0)
    stats = [
        scene.forehead_wrinkle_stat(scene.render_gt(p.replace(age=a), CameraPose(0, 0), 64))
        for a in np.linspace(-1.0, 1.0, 5)
    ]
    assert all(b > a for a, b in zip(stats, stats[1:]))


def test_smile_regression_spearman():
    # attribute verifiability: the curvature oracle ranks 100 random
    # identities by their smile parameter with rho >= 0.95
    trues, est = [], []
    rng = np.random.default_rng(0)
    for i in range(100):
        p = scene.sample_identity(1000 + i)
        pose = CameraPose(rng.uniform(-0.35, 0.35), rng.uniform(-0.25, 0.25))
        est.append(scene.mouth_curvature_stat(scene.render_gt(p, pose, 64)))
        trues.append(p["smile"])
    assert spearman(trues, est) >= 0.95


def test_face_bbox_contains_center():
    p = scene.sample_identity(2)
    r0, c0, r1, c1 = scene.face_bbox(p, CameraPose(0, 0), 64)
    assert r0 < 32 < r1 and c0 < 32 < c1
    assert 0 <= r0 < r1 <= 64


def test_background_mask_matches_background_color():
    p = scene.sample_identity(2)
    img = scene.render_gt_float(p, CameraPose(0.2, 0.1), 64)
    mask = scene.background_mask(p, CameraPose(0.2, 0.1), 64)
    pure_bg = np.abs(img - scene.BACKGROUND).max(axis=-1) < 1e-9
    # every pure-background pixel is flagged background
    assert np.all(mask[pure_bg])


class TestCorpus:
    def test_single_image_corpus(self, tmp_path):
        c = scene.generate_corpus(1, 2, None, seed=1, out_dir=tmp_path / "c", n_test=1)
        assert (tmp_path / "c" / "manifest.json").exists()
        assert (tmp_path / "c" / "id0000" / "img_000.png").exists()
        assert (tmp_path / "c" / "id0000" / "img_000.json").exists()
        assert len(c.records("id0000", "reference")) == 1
        assert len(c.records("id0000", "test")) == 1

    def test_regeneration_identical_digest(self, tmp_path):
        a = scene.generate_corpus(2, 6, None, seed=9, out_dir=tmp_path / "a", n_test=2)
        b = scene.generate_corpus(2, 6, None, seed=9, out_dir=tmp_path / "b", n_test=2)
        assert a.manifest_digest() == b.manifest_digest()

    def test_different_seed_changes_digest(self, tmp_path):
        a = scene.generate_corpus(1, 4, None, seed=9, out_dir=tmp_path / "a", n_test=1)
        b = scene.generate_corpus(1, 4, None, seed=10, out_dir=tmp_path / "b", n_test=1)
        assert a.manifest_digest() != b.manifest_digest()

    def test_refuses_nonempty_dir(self, tmp_path):
        out = tmp_path / "c"
        scene.generate_corpus(1, 2, None, seed=1, out_dir=out, n_test=1)
        with pytest.raises(FileExistsError):
            scene.generate_corpus(1, 2, None, seed=1, out_dir=out, n_test=1)
        scene.generate_corpus(1, 2, None, seed=1, out_dir=out, n_test=1, force=True)

    def test_split_disjoint_and_sized(self, tmp_path):
        c = scene.generate_corpus(2, 12, None, seed=3, out_dir=tmp_path / "c", n_test=4)
        for iid in c.identity_ids:
            ref = {r.name for r in c.records(iid, "reference")}
            test = {r.name for r in c.records(iid, "test")}
            assert len(ref) == 8 and len(test) == 4
            assert not ref & test

    def test_pose_coverage_no_empty_decile(self, tmp_path):
        c = scene.generate_corpus(4, 50, None, seed=5, out_dir=tmp_path / "c", n_test=5)
        recs = c.all_records()
        yaws = np.array([r.yaw for r in recs])
        pitches = np.array([r.pitch for r in recs])
        yh, _ = np.histogram(yaws, bins=10, range=(-scene.GEN_YAW_LIMIT, scene.GEN_YAW_LIMIT))
        ph, _ = np.histogram(pitches, bins=10, range=(-scene.GEN_PITCH_LIMIT, scene.GEN_PITCH_LIMIT))
        assert np.all(yh > 0) and np.all(ph > 0)

    def test_records_carry_identity_and_pose(self, tmp_path):
        c = scene.generate_corpus(1, 3, None, seed=5, out_dir=tmp_path / "c", n_test=1)
        for rec in c.all_records():
            assert rec.identity_id == "id0000"
            assert abs(rec.yaw) <= scene.GEN_YAW_LIMIT
            assert abs(rec.pitch) <= scene.GEN_PITCH_LIMIT
            img = c.load_image(rec)
            gt = scene.render_gt(rec.params, rec.pose, 64)
            assert np.array_equal((img * 255).round().astype(np.uint8), gt)
