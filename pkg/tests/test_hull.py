import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peft3d.hull import (
    AlphaCoords,
    EditDirection,
    PersonalHull,
    ProjectionError,
    edit_alpha,
    find_direction,
    interpolate,
    load_hull,
    project_simplex,
    project_to_hull,
    sample_in_hull,
    save_hull,
)


@pytest.fixture
def hull3():
    rng = np.random.default_rng(0)
    return PersonalHull(rng.normal(size=(3, 2)))


@pytest.fixture
def hull_latent():
    rng = np.random.default_rng(1)
    return PersonalHull(rng.normal(size=(12, 8)))


class TestSampling:
    def test_single_anchor_returns_it(self):
        hull = PersonalHull(np.array([[1.0, 2.0, 3.0]]))
        w = sample_in_hull(hull, seed=0)
        assert np.allclose(w, [1.0, 2.0, 3.0])

    def test_sample_projection_roundtrip(self, hull_latent):
        w = sample_in_hull(hull_latent, seed=3)
        w2, alpha = project_to_hull(w, hull_latent)
        assert np.linalg.norm(w2 - w) <= 1e-5

    def test_monte_carlo_mean_near_centroid(self, hull3):
        rng = np.random.default_rng(7)
        samples = np.stack([hull3.sample(rng) for _ in range(10_000)])
        mean = samples.mean(axis=0)
        # symmetric Dirichlet: E[w] = centroid; allow 3 standard errors
        se = samples.std(axis=0) / np.sqrt(len(samples))
        assert np.all(np.abs(mean - hull3.centroid()) <= 3 * se + 1e-12)

    def test_sample_deterministic_in_seed(self, hull_latent):
        assert np.array_equal(sample_in_hull(hull_latent, 5), sample_in_hull(hull_latent, 5))


class TestInterpolate:
    def test_endpoints(self):
        a, b = np.array([1.0, 0.0]), np.array([0.0, 2.0])
        assert np.array_equal(interpolate(a, b, 0.0), a)
        assert np.array_equal(interpolate(a, b, 1.0), b)

    def test_midpoint_equidistant(self):
        a, b = np.array([1.0, 0.0]), np.array([0.0, 2.0])
        mid = interpolate(a, b, 0.5)
        assert abs(np.linalg.norm(mid - a) - np.linalg.norm(mid - b)) <= 1e-12

    def test_rejects_out_of_range(self):
        a = np.zeros(2)
        with pytest.raises(ValueError):
            interpolate(a, a, 1.5)
        with pytest.raises(ValueError):
            interpolate(a, a, -0.1)

    @given(st.floats(0.0, 1.0))
    @settings(max_examples=30, deadline=None)
    def test_affine_identity(self, theta):
        rng = np.random.default_rng(11)
        a, b = rng.normal(size=4), rng.normal(size=4)
        lhs = interpolate(a, b, theta) + interpolate(b, a, theta)
        assert np.allclose(lhs, a + b, atol=1e-12)


class TestProjection:
    def test_anchor_projects_to_itself(self, hull_latent):
        w = hull_latent.anchors[4]
        w2, alpha = project_to_hull(w, hull_latent)
        assert np.linalg.norm(w2 - w) <= 1e-5
        assert alpha.values[4] >= 0.99

    def test_centroid_gives_uniform_alpha(self):
        # affinely independent anchors in general position
        rng = np.random.default_rng(3)
        anchors = rng.normal(size=(4, 6))
        hull = PersonalHull(anchors)
        w = hull.centroid()
        _, alpha = project_to_hull(w, hull)
        assert np.abs(alpha.values - 0.25).max() <= 1e-4

    def test_exterior_matches_simplex_grid_oracle(self):
        rng = np.random.default_rng(5)
        anchors = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]])
        hull = PersonalHull(anchors)
        # exhaustive barycentric grid over the 2-simplex, step 5e-4
        g = np.linspace(0.0, 1.0, 2001)
        a1, a2 = np.meshgrid(g, g, indexing="ij")
        keep = (a1 + a2) <= 1.0 + 1e-12
        a1, a2 = a1[keep], a2[keep]
        a3 = 1.0 - a1 - a2
        cands = (
            a1[:, None] * anchors[0] + a2[:, None] * anchors[1] + a3[:, None] * anchors[2]
        )
        for case in range(5):
            w = rng.normal(size=2) * 3.0
            w_proj, _ = project_to_hull(w, hull)
            best = cands[np.argmin(np.sum((cands - w) ** 2, axis=1))]
            assert np.linalg.norm(w_proj - best) <= 1e-3

    def test_idempotent(self, hull_latent):
        rng = np.random.default_rng(9)
        w = rng.normal(size=8) * 2
        w1, _ = project_to_hull(w, hull_latent)
        w2, _ = project_to_hull(w1, hull_latent)
        assert np.linalg.norm(w2 - w1) <= 1e-6

    def test_nonexpansive_toward_hull_points(self, hull_latent):
        rng = np.random.default_rng(10)
        w = rng.normal(size=8) * 3
        w_proj, _ = project_to_hull(w, hull_latent)
        for _ in range(20):
            h = hull_latent.sample(rng)
            assert np.linalg.norm(w_proj - h) <= np.linalg.norm(w - h) + 1e-9

    def test_alpha_is_probability_vector(self, hull_latent):
        rng = np.random.default_rng(12)
        for _ in range(10):
            _, alpha = project_to_hull(rng.normal(size=8) * 2, hull_latent)
            assert np.all(alpha.values >= -1e-8)
            assert abs(alpha.values.sum() - 1.0) <= 1e-8

    def test_nonconvergence_reports_residual(self, hull_latent):
        with pytest.raises(ProjectionError, match="residual"):
            project_to_hull(np.full(8, 5.0), hull_latent, tol=1e-14, max_iter=1)

    def test_kkt_residual_enforced(self, hull_latent):
        # a converged projection satisfies the KKT conditions tightly
        rng = np.random.default_rng(13)
        w = rng.normal(size=8) * 2
        _, alpha = project_to_hull(w, hull_latent, tol=1e-6)
        m = hull_latent.anchors
        grad = m @ m.T @ alpha.values - m @ w
        mu = grad.min()
        active = alpha.values > 1e-12
        assert (grad[active] - mu).max() <= 1e-6


class TestSimplexProjection:
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_output_on_simplex(self, vals):
        out = project_simplex(np.array(vals, dtype=np.float64))
        assert np.all(out >= 0)
        assert abs(out.sum() - 1.0) <= 1e-9

    def test_already_on_simplex_unchanged(self):
        v = np.array([0.2, 0.3, 0.5])
        assert np.allclose(project_simplex(v), v)


class TestDirections:
    def test_separated_clouds_recover_axis(self):
        rng = np.random.default_rng(0)
        pos = rng.normal(size=(150, 5)) * 0.15
        pos[:, 0] += 3.0
        neg = rng.normal(size=(150, 5)) * 0.15
        neg[:, 0] -= 3.0
        lat = np.vstack([pos, neg])
        lab = np.array([1] * 150 + [0] * 150)
        d = find_direction(lat, lab, "axis0")
        angle = np.degrees(np.arccos(np.clip(abs(d.vector[0]), -1, 1)))
        assert angle <= 5.0

    def test_flipped_labels_negate_direction(self):
        rng = np.random.default_rng(1)
        lat = rng.normal(size=(60, 4))
        lab = (lat[:, 1] + 0.3 * rng.normal(size=60) > 0).astype(int)
        d1 = find_direction(lat, lab)
        d2 = find_direction(lat, 1 - lab)
        cos = float(d1.vector @ d2.vector)
        assert np.degrees(np.arccos(np.clip(-cos, -1, 1))) <= 1.0

    def test_unit_norm(self):
        rng = np.random.default_rng(2)
        lat = rng.normal(size=(30, 3))
        lab = (lat[:, 2] > 0).astype(int)
        d = find_direction(lat, lab)
        assert abs(np.linalg.norm(d.vector) - 1.0) <= 1e-8

    def test_inseparable_warns(self):
        rng = np.random.default_rng(3)
        lat = rng.normal(size=(50, 3))
        lab = rng.integers(0, 2, size=50)
        with pytest.warns(UserWarning, match="slack"):
            find_direction(lat, lab)

    def test_too_few_examples_rejected(self):
        lat = np.random.default_rng(4).normal(size=(12, 3))
        lab = np.array([1] * 9 + [0] * 3)
        with pytest.raises(ValueError):
            find_direction(lat, lab)


class TestEditAlpha:
    def test_zero_magnitude_is_projection(self, hull_latent):
        w = sample_in_hull(hull_latent, 17)
        direction = EditDirection(np.eye(8)[0], "e0", 1.0)
        w_edit, _ = edit_alpha(w, direction, 0.0, hull_latent)
        assert np.linalg.norm(w_edit - w) <= 1e-5

    def test_opposite_magnitudes_opposite_sides(self, hull_latent):
        c = hull_latent.centroid()
        rng = np.random.default_rng(21)
        v = rng.normal(size=8)
        direction = EditDirection(v / np.linalg.norm(v), "d", 1.0)
        plus, _ = edit_alpha(c, direction, 0.5, hull_latent)
        minus, _ = edit_alpha(c, direction, -0.5, hull_latent)
        assert float((plus - c) @ direction.vector) > 0
        assert float((minus - c) @ direction.vector) < 0

    def test_result_inside_hull(self, hull_latent):
        w = sample_in_hull(hull_latent, 23)
        direction = EditDirection(np.eye(8)[2], "e2", 1.0)
        w_edit, alpha = edit_alpha(w, direction, 5.0, hull_latent)
        assert np.all(alpha.values >= -1e-8)
        assert abs(alpha.values.sum() - 1.0) <= 1e-8
        assert np.linalg.norm(hull_latent.combine(alpha.values) - w_edit) <= 1e-9

    def test_magnitude_cap(self, hull_latent):
        direction = EditDirection(np.eye(8)[0], "e0", 1.0)
        with pytest.raises(ValueError, match="cap"):
            edit_alpha(hull_latent.centroid(), direction, 1000.0, hull_latent)

    def test_alpha_native_mode(self, hull_latent):
        w = sample_in_hull(hull_latent, 29)
        direction = EditDirection(np.eye(8)[1], "e1", 1.0)
        w_edit, alpha = edit_alpha(w, direction, 0.5, hull_latent, mode="alpha-native")
        assert abs(alpha.values.sum() - 1.0) <= 1e-8
        with pytest.raises(ValueError):
            edit_alpha(w, direction, 0.5, hull_latent, mode="bogus")


def test_hull_serialization_roundtrip(tmp_path, hull_latent):
    d = EditDirection(np.eye(8)[0], "smile", 0.5)
    save_hull(tmp_path / "hull.json", "id0007", hull_latent, {"smile": d})
    iid, loaded, dirs = load_hull(tmp_path / "hull.json")
    assert iid == "id0007"
    assert np.allclose(loaded.anchors, hull_latent.anchors)
    assert np.allclose(dirs["smile"].vector, d.vector)
