import numpy as np
import pytest
import torch

from peft3d.evalsuite import (
    Embedder,
    EmbedderConfig,
    GateError,
    MetricsReport,
    diversity,
    embed_images,
    id_sim,
    id_sim_batch,
    interpolation_curve,
    perceptual_distance,
    train_embedder,
    write_report,
)
from peft3d.hull import PersonalHull
from peft3d.scene import generate_corpus


@pytest.fixture(scope="module")
def embedder_corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("embcorpus")
    train = generate_corpus(10, 6, None, seed=21, out_dir=root / "train", n_test=1)
    held = generate_corpus(4, 8, None, seed=22, out_dir=root / "held", n_test=1, identity_offset=100)
    return train, held


@pytest.fixture(scope="module")
def trained_embedder(embedder_corpora):
    train, held = embedder_corpora
    cfg = EmbedderConfig(steps=300, batch_size=16, min_accuracy=0.85, seed=1)
    return train_embedder(train, held, cfg)


class TestEmbedderTraining:
    def test_gate_report(self, trained_embedder):
        model, report = trained_embedder
        assert report["verification_accuracy"] >= 0.85
        assert report["triple_rate"] >= 0.85
        assert report["digest"] == model.digest()

    def test_undertrained_fails_gate(self, embedder_corpora):
        train, held = embedder_corpora
        cfg = EmbedderConfig(steps=1, batch_size=8, min_accuracy=0.99, seed=0)
        with pytest.raises(GateError):
            train_embedder(train, held, cfg)

    def test_too_few_identities_rejected(self, embedder_corpora):
        train, held = embedder_corpora
        with pytest.raises(ValueError):
            train_embedder(held, train, EmbedderConfig(steps=1))

    def test_norms_unit(self, trained_embedder):
        model, _ = trained_embedder
        x = torch.rand(5, 3, 64, 64)
        e = model.embed(x)
        assert np.abs(np.linalg.norm(e.numpy(), axis=1) - 1.0).max() <= 1e-6

    def test_save_load_roundtrip(self, trained_embedder, tmp_path):
        model, _ = trained_embedder
        model.save(tmp_path / "emb.bin")
        loaded = Embedder.load(tmp_path / "emb.bin")
        x = torch.rand(2, 3, 64, 64)
        assert torch.equal(model.embed(x), loaded.embed(x))
        assert loaded.digest() == model.digest()


class TestIdSim:
    def test_reference_member_scores_one(self, rand_embedder):
        ref = torch.rand(4, 3, 64, 64)
        val = id_sim(ref[2], ref, rand_embedder)
        assert abs(val - 1.0) <= 1e-6

    def test_singleton_reference_is_plain_cosine(self, rand_embedder):
        ref = torch.rand(1, 3, 64, 64)
        img = torch.rand(3, 64, 64)
        want = float(embed_images(rand_embedder, ref)[0] @ rand_embedder.embed(img.unsqueeze(0))[0])
        assert abs(id_sim(img, ref, rand_embedder) - want) <= 1e-6

    def test_matches_exhaustive_max(self, rand_embedder):
        ref = torch.rand(5, 3, 64, 64)
        img = torch.rand(3, 64, 64)
        e = rand_embedder.embed(img.unsqueeze(0))[0]
        refs = embed_images(rand_embedder, ref)
        want = max(float(refs[j] @ e) for j in range(5))
        assert abs(id_sim(img, ref, rand_embedder) - want) <= 1e-6

    def test_never_exceeds_one(self, rand_embedder):
        ref = torch.rand(6, 3, 64, 64)
        vals = id_sim_batch(torch.rand(8, 3, 64, 64), embed_images(rand_embedder, ref), rand_embedder)
        assert (vals <= 1.0 + 1e-6).all()

    def test_empty_reference_rejected(self, rand_embedder):
        with pytest.raises(ValueError):
            id_sim(torch.rand(3, 64, 64), torch.zeros(0, 3, 64, 64), rand_embedder)


class TestPerceptualDistance:
    def test_zero_on_identical(self, rand_embedder):
        a = torch.rand(3, 32, 32)
        assert float(perceptual_distance(a, a.clone(), rand_embedder)) == 0.0

    def test_symmetric(self, rand_embedder):
        a, b = torch.rand(3, 32, 32), torch.rand(3, 32, 32)
        d1 = float(perceptual_distance(a, b, rand_embedder))
        d2 = float(perceptual_distance(b, a, rand_embedder))
        assert abs(d1 - d2) <= 1e-7

    def test_positive_on_different(self, rand_embedder):
        a = torch.rand(3, 32, 32)
        b = a + 0.01
        assert float(perceptual_distance(a, b.clamp(0, 1), rand_embedder)) > 0

    def test_noise_ramp_monotone(self, rand_embedder):
        torch.manual_seed(0)
        a = torch.rand(3, 64, 64)
        noise = torch.randn(3, 64, 64)
        ds = [
            float(perceptual_distance(a, (a + s * noise).clamp(0, 1), rand_embedder))
            for s in (0.01, 0.05, 0.1)
        ]
        assert ds[0] < ds[1] < ds[2]

    def test_resolution_mismatch_rejected(self, rand_embedder):
        with pytest.raises(ValueError):
            perceptual_distance(torch.rand(3, 64, 64), torch.rand(3, 32, 32), rand_embedder)


class StubModel:
    """Emits a fixed image sequence regardless of latents; for protocol tests."""

    def __init__(self, images):
        self.images = images
        self.cursor = 0

    def generate(self, w, poses):
        n = w.shape[0]
        out = self.images[self.cursor : self.cursor + n]
        self.cursor += n
        return out, out


class TestDiversity:
    def test_copies_of_one_image_give_zero(self, rand_embedder):
        train = torch.rand(2, 3, 32, 32)
        samples = train[0].unsqueeze(0).repeat(6, 1, 1, 1)
        model = StubModel(samples)
        hull = PersonalHull(np.zeros((2, 4)))
        with pytest.warns(UserWarning):
            val, nonempty = diversity(model, hull, train, rand_embedder, n=6, seed=0)
        assert val == 0.0
        assert nonempty == 1

    def test_two_clusters_hand_computed(self, rand_embedder):
        torch.manual_seed(3)
        train = torch.rand(2, 3, 32, 32)
        # three samples near each training image
        near0 = (train[0].unsqueeze(0) + 0.05 * torch.randn(3, 3, 32, 32)).clamp(0, 1)
        near1 = (train[1].unsqueeze(0) + 0.05 * torch.randn(3, 3, 32, 32)).clamp(0, 1)
        samples = torch.cat([near0, near1])
        model = StubModel(samples)
        hull = PersonalHull(np.zeros((2, 4)))
        val, nonempty = diversity(model, hull, train, rand_embedder, n=6, seed=0)

        def pd(a, b):
            return float(perceptual_distance(a, b, rand_embedder))

        expected = np.mean(
            [
                np.std([pd(near0[0], near0[1]), pd(near0[0], near0[2]), pd(near0[1], near0[2])]),
                np.std([pd(near1[0], near1[1]), pd(near1[0], near1[2]), pd(near1[1], near1[2])]),
            ]
        )
        assert nonempty == 2
        assert abs(val - expected) <= 1e-6

    def test_requires_two_training_images(self, rand_embedder):
        model = StubModel(torch.rand(4, 3, 32, 32))
        with pytest.raises(ValueError):
            diversity(model, PersonalHull(np.zeros((1, 4))), torch.rand(1, 3, 32, 32), rand_embedder, n=4)


class TestInterpolationCurve:
    def test_shape_and_determinism(self, tiny_model, rand_embedder):
        anchors = np.random.default_rng(0).normal(size=(4, 8))
        hull = PersonalHull(anchors)
        ref = torch.rand(3, 3, 32, 32)
        ref_embs = embed_images(rand_embedder, ref)
        c1 = interpolation_curve(tiny_model, hull, rand_embedder, ref_embs, pairs=2, steps=4, views=2, seed=5)
        c2 = interpolation_curve(tiny_model, hull, rand_embedder, ref_embs, pairs=2, steps=4, views=2, seed=5)
        assert c1.shape == (4,)
        assert np.array_equal(c1, c2)

    def test_needs_two_anchors(self, tiny_model, rand_embedder):
        hull = PersonalHull(np.zeros((1, 8)))
        with pytest.raises(ValueError):
            interpolation_curve(tiny_model, hull, rand_embedder, torch.zeros(1, 32))


class TestReport:
    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_report(MetricsReport(task="t", arms={}), tmp_path)

    def test_rows_per_arm(self, tmp_path):
        rep = MetricsReport(
            task="inversion",
            arms={"pretrained": {"id_sim": 0.5}, "lora_r1": {"id_sim": 0.61, "perc": 0.1}},
            config_digests={"train": "abc"},
            seed=3,
        )
        csv_path, json_path = write_report(rep, tmp_path)
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "arm,id_sim,perc"
        assert len(lines) == 3
        assert json_path.exists()

    def test_byte_identical_regeneration(self, tmp_path):
        rep = MetricsReport(task="x", arms={"a": {"m": 1.234567890123}}, seed=1)
        p1, j1 = write_report(rep, tmp_path / "r1")
        p2, j2 = write_report(rep, tmp_path / "r2")
        assert p1.read_bytes() == p2.read_bytes()
        assert j1.read_bytes() == j2.read_bytes()
