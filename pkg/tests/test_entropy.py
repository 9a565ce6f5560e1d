import math

import numpy as np
import pytest
import torch

from crcir.coder import TOTAL, logistic_cdfs
from crcir.entropy import (
    SIGMA_FLOOR,
    EdgeConvBlock,
    GaussianParams,
    HyperDecoder,
    HyperEncoder,
    PriorParams,
    batch_plans,
    build_graph_plan,
    coarse_count,
    decode_y,
    decode_z,
    encode_y,
    encode_z,
    factorized_rate_bits,
    gather_weights,
    gaussian_rate_bits,
)
from crcir.errors import DecodeError, InvalidInputError, StateError
from crcir.geometry import farthest_point_sample


def cloud(m, seed=0):
    return np.random.default_rng(seed).normal(size=(m, 3))


class TestGraphPlan:
    def test_coarse_count(self):
        assert coarse_count(4000) == 500
        assert coarse_count(9) == 2

    def test_node_counts(self):
        plan = build_graph_plan(cloud(4000), 8, 4)
        assert plan.m_coarse == 500
        assert [len(lv.seeds) for lv in plan.levels] == [2000, 1000, 500]

    def test_seeds_are_fps(self):
        pts = cloud(300)
        plan = build_graph_plan(pts)
        np.testing.assert_array_equal(plan.levels[0].seeds, farthest_point_sample(pts, 150))
        np.testing.assert_array_equal(plan.coarse_points, pts[plan.fps_chain()[-plan.m_coarse:]])

    def test_patch_self_first(self):
        plan = build_graph_plan(cloud(100))
        lv = plan.levels[0]
        np.testing.assert_array_equal(lv.patch[:, 0], lv.seeds)

    def test_replication_is_exact(self):
        pts = cloud(500, 3)
        a, b = build_graph_plan(pts), build_graph_plan(pts.copy())
        np.testing.assert_array_equal(a.fps_chain(), b.fps_chain())
        np.testing.assert_array_equal(a.gather_index, b.gather_index)

    def test_too_small(self):
        with pytest.raises(InvalidInputError):
            build_graph_plan(cloud(7))

    def test_minimal(self):
        plan = build_graph_plan(cloud(8), 8, 4)
        assert plan.m_coarse == 1 and plan.gather_index.shape == (8, 4)


class TestHyperEncoder:
    def test_channels(self):
        henc = HyperEncoder()
        assert [(b.edge.in_features // 2, b.edge.out_features) for b in henc.blocks] == [(8, 32), (32, 32), (32, 8)]

    def test_output_shape(self):
        plan = build_graph_plan(cloud(4000))
        z = HyperEncoder()(torch.randn(4000, 8), batch_plans([plan]))
        assert z.shape == (500, 8)

    def test_constant_features(self):
        torch.manual_seed(0)
        henc = HyperEncoder()
        for b in henc.blocks:
            torch.nn.init.zeros_(b.edge.bias)
        plan = batch_plans([build_graph_plan(cloud(200))])
        z = henc(torch.ones(200, 8), plan)
        torch.testing.assert_close(z, z[:1].expand_as(z))

    def test_max_pool_monotone(self):
        torch.manual_seed(1)
        blk = EdgeConvBlock(4, 6)
        x = torch.randn(10, 4)
        seeds = torch.tensor([0, 1])
        small = blk(x, seeds, torch.tensor([[0, 2, 3], [1, 4, 5]]))
        big = blk(x, seeds, torch.tensor([[0, 2, 3, 7], [1, 4, 5, 8]]))
        assert torch.all(big >= small)

    def test_batching_matches_single(self):
        torch.manual_seed(2)
        henc = HyperEncoder()
        a, b = cloud(60, 1), cloud(90, 2)
        pa, pb = build_graph_plan(a), build_graph_plan(b)
        ya, yb = torch.randn(60, 8), torch.randn(90, 8)
        joint = henc(torch.cat([ya, yb]), batch_plans([pa, pb]))
        torch.testing.assert_close(joint, torch.cat([henc(ya, batch_plans([pa])), henc(yb, batch_plans([pb]))]))


class TestHyperDecoder:
    def test_equal_distances(self):
        w = gather_weights(torch.tensor([[0.3, 0.3]]), torch.tensor(1.0))
        torch.testing.assert_close(w, torch.tensor([[0.5, 0.5]]))

    def test_weight_formula(self):
        w = gather_weights(torch.tensor([[0.0, math.log(2.0)]], dtype=torch.float64), torch.tensor(1.0))
        torch.testing.assert_close(w, torch.tensor([[2 / 3, 1 / 3]], dtype=torch.float64))

    def test_weights_normalised(self):
        d = torch.rand(100, 4) * 3
        for a in (0.01, 1.0, 50.0):
            torch.testing.assert_close(gather_weights(d, torch.tensor(a)).sum(1), torch.ones(100))

    def test_alpha_initialised(self):
        assert HyperDecoder().alpha.item() == 1.0

    def test_sigma_floor(self):
        torch.manual_seed(3)
        plan = build_graph_plan(cloud(100))
        hdec = HyperDecoder()
        with torch.no_grad():
            hdec.head.fc1.bias[8:] = -100.0
        mu, sigma = hdec(torch.randn(plan.m_coarse, 8), batch_plans([plan]))
        assert mu.shape == sigma.shape == (100, 8)
        assert torch.all(sigma >= SIGMA_FLOOR)


class TestRates:
    def test_unit_gaussian(self):
        gp = GaussianParams(np.zeros((1, 1)), np.ones((1, 1)))
        p = math.erf(0.5 / math.sqrt(2))
        assert gaussian_rate_bits(np.zeros((1, 1)), gp) == pytest.approx(-math.log2(p), abs=1e-9)
        # the commonly quoted 1.3851 is a rounding of this value
        assert -math.log2(p) == pytest.approx(1.3849, abs=1e-4)

    def test_floor_scale(self):
        gp = GaussianParams(np.full((1, 1), 0.3), np.full((1, 1), SIGMA_FLOOR))
        assert gaussian_rate_bits(np.full((1, 1), 0.3), gp) < 1e-9

    def test_additive(self):
        rng = np.random.default_rng(0)
        mu, sig = rng.normal(size=(10, 8)), rng.uniform(0.1, 3, (10, 8))
        y = mu + np.round(rng.normal(size=(10, 8)) * 2)
        whole = gaussian_rate_bits(y, GaussianParams(mu, sig))
        parts = sum(gaussian_rate_bits(y[i : i + 1], GaussianParams(mu[i : i + 1], sig[i : i + 1])) for i in range(10))
        assert whole == pytest.approx(parts)

    def test_scale_below_floor(self):
        with pytest.raises(StateError):
            gaussian_rate_bits(np.zeros((1, 1)), GaussianParams(np.zeros((1, 1)), np.full((1, 1), 1e-3)))

    def test_logistic_self_consistent(self):
        prior = PriorParams(np.zeros(1, np.float32), np.full(1, 50.0, np.float32))
        pmf = 1 / (1 + math.exp(-0.5 / 50)) - 1 / (1 + math.exp(0.5 / 50))
        assert factorized_rate_bits(np.zeros((1, 1)), prior) == pytest.approx(-math.log2(pmf))

    def test_logistic_symmetric(self):
        prior = PriorParams(np.full(2, 1.0, np.float32), np.full(2, 0.8, np.float32))
        assert factorized_rate_bits(np.array([[3.0, 3.0]]), prior) == pytest.approx(
            factorized_rate_bits(np.array([[-1.0, -1.0]]), prior)
        )

    def test_logistic_escape_mass(self):
        cs = logistic_cdfs(np.zeros(1), np.full(1, 1e-2), -4, 4)
        m = cs.table(0).masses()
        assert m[0] >= 1 and m[-1] >= 1 and m.sum() == TOTAL

    def test_analytic_matches_coded_z(self):
        rng = np.random.default_rng(1)
        loc = rng.normal(size=8).astype(np.float32)
        scale = rng.uniform(0.5, 3, 8).astype(np.float32)
        prior = PriorParams(loc, scale)
        z = np.round(loc + rng.logistic(size=(4000, 8)) * scale)
        coded = 8 * (len(encode_z(z, prior)) - 9)
        assert abs(factorized_rate_bits(z, prior) - coded) / coded <= 0.005


class TestSections:
    def test_y_round_trip(self):
        rng = np.random.default_rng(2)
        sig = rng.uniform(0.01, 4, (300, 8)).astype(np.float32)
        sym = np.round(rng.normal(size=(300, 8)) * sig).astype(np.int64)
        sym[0, 0] = 500  # far beyond the table range
        np.testing.assert_array_equal(decode_y(encode_y(sym, sig), sig), sym)

    def test_z_round_trip(self):
        rng = np.random.default_rng(3)
        prior = PriorParams(rng.normal(size=8).astype(np.float32), rng.uniform(0.2, 2, 8).astype(np.float32))
        z = np.round(rng.normal(size=(50, 8)) * 3)
        z[3, 3] = -200
        np.testing.assert_array_equal(decode_z(encode_z(z, prior), 50, prior), z)

    def test_all_zero(self):
        sig = np.ones((10, 8), np.float32)
        assert decode_y(encode_y(np.zeros((10, 8), int), sig), sig).sum() == 0

    def test_wrong_count(self):
        sig = np.ones((10, 8), np.float32)
        data = encode_y(np.zeros((10, 8), int), sig)
        with pytest.raises(DecodeError):
            decode_y(data, np.ones((11, 8), np.float32))

    def test_truncated(self):
        sig = np.ones((10, 8), np.float32)
        data = encode_y(np.arange(80).reshape(10, 8) % 5, sig)
        with pytest.raises(DecodeError):
            decode_y(data[:-3], sig)
