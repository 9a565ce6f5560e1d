import numpy as np
import pytest
import torch

from crcir.errors import InvalidInputError, TrainingDivergedError
from crcir.metrics import chamfer
from crcir.model import CodecModel
from crcir.pipeline import LADDER, Bitstream, CodecConfig, compress, decompress
from crcir.synth import FAMILIES, SurfaceSampler, random_corpus, random_sampler, synth_dataset
from crcir.training import (
    LOG_COLUMNS,
    TrainConfig,
    collate,
    forward_batch,
    prepare_corpus,
    prepare_example,
    rd_loss,
    train,
)
from trained import DESK


@pytest.fixture(scope="module")
def tiny_corpus():
    return [s.points for s in random_corpus(4, 1024, seed=3)]


def tiny_config(**kw):
    base = dict(stage1_steps=3, stage2_steps=3, batch_size=2, rates=(15, 30), rates_per_shape=1, extra_queries=64)
    base.update(kw)
    return TrainConfig(**base)


class TestLoss:
    def test_zero_rate(self):
        t = np.zeros((10, 3))
        assert rd_loss(t, t + 0.1, 0.0, 0.0, 5e-3, 10) == pytest.approx(0.1)

    def test_bits_equal_points(self):
        t = np.ones((4, 3))
        assert rd_loss(t, t, 60.0, 40.0, 5e-3, 100) == pytest.approx(0.005)

    def test_zero_iff_perfect(self):
        t = np.random.default_rng(0).normal(size=(5, 3))
        assert rd_loss(t, t, 0.0, 0.0, 5e-3, 5) == 0.0
        assert rd_loss(t, t + 1e-3, 0.0, 0.0, 5e-3, 5) > 0
        assert rd_loss(t, t, 1.0, 0.0, 5e-3, 5) > 0

    def test_torch_matches_numpy(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        got = rd_loss(torch.tensor(a), torch.tensor(b), torch.tensor(7.0), torch.tensor(3.0), 0.01, 20)
        assert got.item() == pytest.approx(rd_loss(a, b, 7.0, 3.0, 0.01, 20))


class TestConfig:
    def test_full_scale_values(self):
        p = TrainConfig.full_scale()
        assert (p.stage1_steps, p.stage1_lr, p.stage2_steps, p.stage2_lr, p.batch_size) == (34410, 1e-2, 10519, 1e-4, 24)
        assert p.lmbda == 5e-3

    @pytest.mark.parametrize("kw", [{"stage1_lr": 0}, {"stage2_lr": -1}, {"batch_size": 0}, {"stage1_steps": -1}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidInputError):
            TrainConfig(**kw)


class TestSynth:
    def test_sphere_norms(self):
        pts = SurfaceSampler("sphere", {"radius": 1.0}, 10_000).sample(np.random.default_rng(0))
        assert pts.shape == (10_000, 3)
        np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-6)

    def test_torus_implicit(self):
        s = SurfaceSampler("torus", {"R": 1.0, "r": 0.3}, 8192)
        assert np.abs(s.implicit_residual(s.sample(np.random.default_rng(1)))).max() <= 1e-6

    @pytest.mark.parametrize("family", FAMILIES)
    def test_all_families_on_surface(self, family):
        rng = np.random.default_rng(2)
        s = random_sampler(rng, 5000, family)
        assert np.abs(s.implicit_residual(s.sample(rng))).max() <= 1e-6

    def test_same_seed(self):
        a = random_corpus(3, 2000, seed=9)
        b = random_corpus(3, 2000, seed=9)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.points, y.points)

    def test_normalised(self):
        shapes = synth_dataset([SurfaceSampler("torus", {}, 8192)], seed=0)
        pts = shapes[0].points
        assert np.abs(pts).max() <= 1.0 + 1e-12
        assert np.ptp(pts, 0).max() == pytest.approx(2.0)

    def test_unknown_family(self):
        with pytest.raises(InvalidInputError):
            SurfaceSampler("cube")


class TestExamples:
    def test_shapes(self, tiny_corpus):
        ex = prepare_example(tiny_corpus[0], 15, np.random.default_rng(0), tiny_config())
        assert ex.feats.shape == (ex.m * ex.r, 6)
        assert ex.residuals.shape == ex.relpos.shape == (ex.m * ex.r, 3)
        assert len(ex.q_relpos) == len(ex.q_cluster) == len(ex.q_targets) == 64
        assert ex.q_cluster.max() < ex.m

    def test_no_extra_queries(self, tiny_corpus):
        ex = prepare_example(tiny_corpus[0], 15, None, tiny_config(extra_queries=0))
        assert len(ex.q_relpos) == 0

    def test_rates_per_shape(self, tiny_corpus):
        items = prepare_corpus(tiny_corpus, tiny_config(rates_per_shape=2))
        assert len(items) == 8
        # two distinct rates for the same shape give two cluster counts
        assert items[0].m != items[1].m

    def test_collate_offsets(self, tiny_corpus):
        items = prepare_corpus(tiny_corpus[:2], tiny_config())
        b = collate(items)
        assert b.n_clusters == sum(e.m for e in items)
        assert int(b.cluster_ids.max()) == b.n_clusters - 1
        assert int(b.q_cluster[-1]) >= items[0].m


class TestTrain:
    def test_seeded_runs_identical(self, tiny_corpus):
        torch.set_num_threads(1)
        a, _ = train(tiny_corpus, tiny_config())
        b, _ = train(tiny_corpus, tiny_config())
        assert a.checksum == b.checksum

    def test_log(self, tiny_corpus, tmp_path):
        path = tmp_path / "log.csv"
        _, log = train(tiny_corpus, tiny_config(), log_path=path)
        lines = path.read_text().splitlines()
        assert lines[0].split(",") == list(LOG_COLUMNS)
        assert len(lines) == 7
        assert log.column("stage").tolist() == [1, 1, 1, 2, 2, 2]
        assert log.column("lr", 2).tolist() == [1e-4] * 3

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            train([], tiny_config())

    def test_nan_aborts(self, tiny_corpus):
        model = CodecModel(seed=0)
        with torch.no_grad():
            model.decoder.head.bias.fill_(float("nan"))
        with pytest.raises(TrainingDivergedError, match="non-finite"):
            train(tiny_corpus, tiny_config(), model=model)

    def test_stage1_is_distortion_only(self, tiny_corpus):
        _, log = train(tiny_corpus, tiny_config())
        np.testing.assert_allclose(log.column("loss", 1), log.column("distortion", 1))
        expect = log.column("distortion", 2) + 5e-3 * (log.column("bits_y_pp", 2) + log.column("bits_z_pp", 2))
        np.testing.assert_allclose(log.column("loss", 2), expect, rtol=1e-5)

    def test_stage1_entropy_fit_leaves_transforms_alone(self, tiny_corpus):
        model = CodecModel(seed=0)
        batch = collate(prepare_corpus(tiny_corpus[:2], tiny_config()))
        out = forward_batch(model, batch, 5e-3, False, torch.Generator().manual_seed(0))
        grads = torch.autograd.grad(out.aux, list(model.parameters()), allow_unused=True)
        touched = {n.split(".")[0] for (n, _), g in zip(model.named_parameters(), grads)
                   if g is not None and torch.count_nonzero(g) > 0}
        assert touched == {"hyper_encoder", "hyper_decoder", "prior"}

    def test_no_dead_parameters(self, tiny_corpus):
        model = CodecModel(seed=0)
        items = prepare_corpus(tiny_corpus, tiny_config(rates_per_shape=2))
        seen = {n: False for n, p in model.named_parameters()}
        gen = torch.Generator().manual_seed(0)
        rng = np.random.default_rng(0)
        model.train()
        opt = torch.optim.Adam(model.parameters(), 1e-3)
        for _ in range(100):
            batch = collate([items[i] for i in rng.choice(len(items), 2, replace=False)])
            out = forward_batch(model, batch, 5e-3, True, gen)
            opt.zero_grad()
            out.loss.backward()
            for n, p in model.named_parameters():
                seen[n] |= bool(p.grad is not None and torch.count_nonzero(p.grad) > 0)
            opt.step()
        assert [n for n, ok in seen.items() if not ok] == []

    def test_decodes_at_every_ladder_rate(self, tiny_corpus):
        model, _ = train(tiny_corpus, tiny_config())
        for rate in LADDER:
            data = compress(tiny_corpus[1], model, CodecConfig(rate=rate))
            assert len(decompress(data, model)) > 0


def _coded(model, clouds, rates=(30, 15, 8)):
    """Mean latent bits per point and mean Chamfer over clouds and rates."""
    bits, dist = [], []
    for points, _ in clouds:
        for rate in rates:
            data = compress(points, model, CodecConfig(rate=rate))
            bs = Bitstream.from_bytes(data)
            bits.append(8 * (len(bs.y) + len(bs.z)) / len(points))
            dist.append(chamfer(points, decompress(data, model)))
    return float(np.mean(bits)), float(np.mean(dist))


@pytest.mark.slow
class TestTrainedOracles:
    def test_stage2_trades_bits_for_little_distortion(self, trained, held_out):
        b1, d1 = _coded(trained.stage1, held_out)
        b2, d2 = _coded(trained.model, held_out)
        print(f"stage 1: {b1:.3f} bpp latents, chamfer {d1:.5f}; stage 2: {b2:.3f}, {d2:.5f}")
        assert b2 <= 0.8 * b1
        assert d2 <= 1.1 * d1

    def test_rate_term_saves_bits(self, trained, held_out):
        b0, d0 = _coded(trained.ablation, held_out)
        b, d = _coded(trained.model, held_out)
        print(f"lambda 0: {b0:.3f} bpp latents, chamfer {d0:.5f}; lambda 5e-3: {b:.3f}, {d:.5f}")
        assert b0 >= b
        # comparable distortion: the rate term may cost at most a tenth
        assert d <= 1.1 * d0

    def test_log_covers_both_stages(self, trained):
        assert trained.log.column("stage").tolist() == [1] * DESK.stage1_steps + [2] * DESK.stage2_steps
        assert np.all(np.isfinite(trained.log.column("loss")))
