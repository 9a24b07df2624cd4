import numpy as np
import pytest
import torch

from peft3d.adapters import AdapterPolicy, attach_adapters
from peft3d.generator import (
    GeneratorConfig,
    RenderConfig,
    TriPlaneGenerator,
    camera_rays,
    sample_planes,
)
from peft3d.scene import CameraPose


@pytest.fixture(scope="module")
def model():
    return TriPlaneGenerator(seed=1)


def bilinear_oracle(planes, xyz):
    """Independent manual bilinear interpolation over the three planes."""
    b, _, f, p, _ = planes.shape
    out = np.zeros((b, xyz.shape[1], f))
    pl = planes.numpy()
    pts = xyz.numpy()
    for bi in range(b):
        for ni in range(pts.shape[1]):
            x, y, z = pts[bi, ni]
            total = np.zeros(f)
            for k, (a_c, b_c) in enumerate(((x, y), (x, z), (y, z))):
                ua = (a_c + 1) / 2 * (p - 1)
                ub = (b_c + 1) / 2 * (p - 1)
                ia, ib = int(np.floor(ua)), int(np.floor(ub))
                ia, ib = min(max(ia, 0), p - 2), min(max(ib, 0), p - 2)
                fa, fb = ua - ia, ub - ib
                v = (
                    pl[bi, k, :, ib, ia] * (1 - fa) * (1 - fb)
                    + pl[bi, k, :, ib, ia + 1] * fa * (1 - fb)
                    + pl[bi, k, :, ib + 1, ia] * (1 - fa) * fb
                    + pl[bi, k, :, ib + 1, ia + 1] * fa * fb
                )
                total += v
            out[bi, ni] = total
    return out


class TestMapping:
    def test_zero_latent_fixed_output(self, model):
        z = torch.zeros(1, 64)
        a = model.map_latent(z)
        b = model.map_latent(z)
        assert torch.equal(a, b)
        assert torch.isfinite(a).all()

    def test_same_z_same_w(self, model):
        z = torch.randn(3, 64)
        assert torch.equal(model.map_latent(z), model.map_latent(z))

    def test_continuity(self, model):
        z = torch.randn(1, 64)
        base = model.map_latent(z)
        norms = []
        for eps in (1e-1, 1e-2, 1e-3):
            dz = torch.zeros_like(z)
            dz[0, 0] = eps
            norms.append((model.map_latent(z + dz) - base).norm().item())
        assert norms[0] > norms[1] > norms[2]
        assert norms[2] < 1e-2


class TestPlanes:
    def test_deterministic(self, model):
        w = torch.randn(2, 64)
        assert torch.equal(model.synthesize_planes(w), model.synthesize_planes(w))

    def test_shape_and_finite(self, model):
        w = torch.randn(4, 64)
        planes = model.synthesize_planes(w)
        assert planes.shape == (4, 3, 8, 32, 32)
        assert torch.isfinite(planes).all()

    def test_zero_init_adapters_noop(self):
        m = TriPlaneGenerator(seed=3)
        w = torch.randn(2, 64)
        before = m.synthesize_planes(w).detach()
        attach_adapters(m, AdapterPolicy(rank=1))
        after = m.synthesize_planes(w).detach()
        assert (before - after).abs().max() <= 1e-6


class TestQueryPoint:
    def test_grid_node_exact(self, model):
        planes = torch.randn(1, 3, 8, 32, 32)
        ii, jj, kk = 5, 20, 9
        grid = torch.linspace(-1, 1, 32)
        xyz = torch.tensor([[[grid[ii], grid[jj], grid[kk]]]])
        feats = sample_planes(planes, xyz)
        expected = planes[0, 0, :, jj, ii] + planes[0, 1, :, kk, ii] + planes[0, 2, :, kk, jj]
        assert (feats[0, 0] - expected).abs().max() <= 1e-6

    def test_matches_bilinear_oracle(self, model):
        torch.manual_seed(0)
        planes = torch.randn(2, 3, 8, 32, 32)
        xyz = torch.rand(2, 40, 3) * 2 - 1
        got = sample_planes(planes, xyz).numpy()
        want = bilinear_oracle(planes, xyz)
        assert np.abs(got - want).max() <= 1e-5

    def test_all_zero_planes_constant_output(self, model):
        planes = torch.zeros(1, 3, 8, 32, 32)
        xyz = torch.rand(1, 50, 3) * 2 - 1
        color, density = model.query_point(planes, xyz)
        assert (color - color[0, 0]).abs().max() <= 1e-7
        assert (density - density[0, 0]).abs().max() <= 1e-7

    def test_outside_cube_zero_density(self, model):
        planes = torch.randn(1, 3, 8, 32, 32)
        xyz = torch.tensor([[[1.5, 0.0, 0.0], [0.0, -2.0, 0.3], [0.2, 0.2, 0.2]]])
        _, density = model.query_point(planes, xyz)
        assert density[0, 0] == 0.0
        assert density[0, 1] == 0.0
        assert density[0, 2] >= 0.0

    def test_density_nonnegative(self, model):
        planes = torch.randn(1, 3, 8, 32, 32) * 3
        xyz = torch.rand(1, 100, 3) * 2 - 1
        _, density = model.query_point(planes, xyz)
        assert (density >= 0).all()


class TestRender:
    def test_rejects_degenerate_near_far(self):
        with pytest.raises(ValueError):
            RenderConfig(near=2.0, far=2.0)

    def test_zero_density_gives_background_exactly(self):
        m = TriPlaneGenerator(seed=2)
        with torch.no_grad():
            m.decoder.fc1.weight.zero_()
            m.decoder.fc1.bias.zero_()
            m.decoder.fc1.bias[3] = -60.0  # softplus(-60) underflows to exactly 0
        planes = m.synthesize_planes(torch.randn(1, 64))
        img = m.render(planes, CameraPose(0.1, -0.1))
        bg = torch.tensor(m.cfg.render.background, dtype=img.dtype)
        assert (img[0].permute(1, 2, 0) - bg).abs().max() == 0.0

    def test_opaque_constant_field_saturates(self):
        m = TriPlaneGenerator(seed=2)
        with torch.no_grad():
            m.decoder.fc0.weight.zero_()
            m.decoder.fc0.bias.zero_()
            m.decoder.fc1.weight.zero_()
            m.decoder.fc1.bias.copy_(torch.tensor([0.4, -0.3, 0.1, 60.0]))
        planes = m.synthesize_planes(torch.randn(1, 64))
        img = m.render(planes, CameraPose(0.0, 0.0))
        want = torch.sigmoid(torch.tensor([0.4, -0.3, 0.1]))
        assert (img[0].permute(1, 2, 0) - want).abs().max() <= 1e-4

    def test_compositing_weight_bounds(self, model):
        planes = model.synthesize_planes(torch.randn(3, 64)) * 2.0
        _, weights = model.render(planes, [CameraPose(0.2, 0.1)] * 3, return_weights=True)
        assert (weights >= 0).all()
        assert (weights <= 1.0).all()
        assert (weights.sum(dim=-1) <= 1.0 + 1e-6).all()

    def test_sample_refinement_converges(self, model):
        planes = model.synthesize_planes(torch.randn(1, 64))
        base = model.render(planes, CameraPose(0.0, 0.0))
        fine = model.render(planes, CameraPose(0.0, 0.0), RenderConfig(n_samples=32))
        assert (base - fine).abs().max() <= 2e-2


class TestFullPipeline:
    def test_generate_deterministic(self, model):
        w = torch.randn(1, 64)
        r1, f1 = model.generate(w, CameraPose(0.1, 0.0))
        r2, f2 = model.generate(w, CameraPose(0.1, 0.0))
        assert torch.equal(r1, r2) and torch.equal(f1, f2)

    def test_resolutions(self, model):
        raw, full = model.generate(torch.randn(2, 64), [CameraPose(0, 0)] * 2)
        assert raw.shape == (2, 3, 32, 32)
        assert full.shape == (2, 3, 64, 64)

    def test_pose_sweep_finite(self, model):
        w = torch.randn(1, 64)
        for yaw in np.linspace(-0.35, 0.35, 5):
            for pitch in np.linspace(-0.25, 0.25, 3):
                raw, full = model.generate(w, CameraPose(float(yaw), float(pitch)))
                assert torch.isfinite(raw).all() and torch.isfinite(full).all()

    def test_superres_zero_adapters_noop(self):
        m = TriPlaneGenerator(seed=4)
        raw = torch.rand(1, 3, 32, 32)
        before = m.superresolve(raw).detach()
        attach_adapters(m, AdapterPolicy(rank=1))
        after = m.superresolve(raw).detach()
        assert (before - after).abs().max() <= 1e-6

    def test_adapters_disabled_equals_never_attached(self):
        m = TriPlaneGenerator(seed=5)
        w = torch.randn(1, 64)
        before = m.generate(w, CameraPose(0, 0))
        reg = attach_adapters(m, AdapterPolicy(rank=2))
        with torch.no_grad():
            for e in reg.adapted_entries():
                e.adapter.B.normal_(0, 0.05)
        reg.set_enabled(False)
        after = m.generate(w, CameraPose(0, 0))
        assert torch.equal(before[0], after[0]) and torch.equal(before[1], after[1])

    def test_lora_parameter_fraction_below_two_percent(self):
        m = TriPlaneGenerator(seed=0)
        reg = attach_adapters(m, AdapterPolicy(rank=1))
        counts = reg.count_parameters()
        assert counts["trainable"] / counts["full_model"] <= 0.02

    def test_checkpoint_roundtrip(self, model, tmp_path):
        w = torch.randn(1, 64)
        want = model.generate(w, CameraPose(0.2, -0.1))
        model.save(tmp_path / "gen.bin", step=7)
        loaded = TriPlaneGenerator.load(tmp_path / "gen.bin")
        got = loaded.generate(w, CameraPose(0.2, -0.1))
        assert torch.equal(want[0], got[0]) and torch.equal(want[1], got[1])


class TestGradients:
    def test_decoder_gradients_match_finite_differences(self):
        # double precision probe of 10 random (pixel, parameter) pairs
        m = TriPlaneGenerator(seed=6).double()
        w = torch.randn(1, 64, dtype=torch.float64)
        planes = m.synthesize_planes(w).detach()
        pose = CameraPose(0.1, 0.05)
        params = [m.decoder.fc0.weight, m.decoder.fc0.bias, m.decoder.fc1.weight, m.decoder.fc1.bias]

        rng = np.random.default_rng(0)
        for probe in range(10):
            ci, ii, jj = rng.integers(3), rng.integers(32), rng.integers(32)
            img = m.render(planes, pose)
            pix = img[0, ci, ii, jj]
            grads = torch.autograd.grad(pix, params, allow_unused=True)

            pi = int(rng.integers(len(params)))
            p, g = params[pi], grads[pi]
            flat_idx = int(rng.integers(p.numel()))
            eps = 1e-5
            with torch.no_grad():
                orig = p.reshape(-1)[flat_idx].item()
                p.reshape(-1)[flat_idx] = orig + eps
                up = m.render(planes, pose)[0, ci, ii, jj].item()
                p.reshape(-1)[flat_idx] = orig - eps
                down = m.render(planes, pose)[0, ci, ii, jj].item()
                p.reshape(-1)[flat_idx] = orig
            fd = (up - down) / (2 * eps)
            an = g.reshape(-1)[flat_idx].item()
            denom = max(abs(fd), abs(an), 1e-6)
            assert abs(fd - an) / denom <= 1e-3, f"probe {probe}: fd={fd} analytic={an}"
