"""Rate-distortion training at desk scale.

Each training example is a cloud prepared at one downsampling rate: the base
layer (FPS, voxel quantisation, interpolation), the residual targets, the
graph plan of the hyper networks, and an extra set of denser decoder queries
drawn from a higher upsampling rate so the implicit decoder learns to answer
at densities other than the encoder's.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from crcir.basecodec import DEFAULT_DEPTH, quantize_coords
from crcir.entropy import GraphPlan, batch_plans, build_graph_plan, gaussian_bits
from crcir.errors import InvalidInputError, TrainingDivergedError
from crcir.geometry import as_points, farthest_point_sample, interpolate_upsample, nearest, residual_targets
from crcir.model import CodecModel
from crcir.nn import adam, quantize
from crcir.pipeline import LADDER, choose_r
from crcir.refinement import local_scale, member_features

LOG_COLUMNS = ("step", "stage", "distortion", "bits_y_pp", "bits_z_pp", "loss", "lr")


@dataclass
class TrainConfig:
    lmbda: float = 5e-3
    stage1_steps: int = 2000
    stage1_lr: float = 1e-3
    stage2_steps: int = 1000
    stage2_lr: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    rates: tuple = LADDER
    rates_per_shape: int = 3
    extra_query_mult: int = 4  # dense queries come from r * this
    extra_queries: int = 2048  # per example; 0 disables
    depth: int = DEFAULT_DEPTH
    k_enc: int = 8
    k_dec: int = 4
    log_every: int = 1
    local_units: bool = True  # measure distortion in units of the local point spacing
    pairing: str = "matched"  # residual pairing, see geometry.residual_targets
    stage1_entropy: bool = True  # fit the entropy model to detached latents during stage 1

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        return cls(stage1_steps=34410, stage1_lr=1e-2, stage2_steps=10519, stage2_lr=1e-4, batch_size=24)

    def __post_init__(self):
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise InvalidInputError("step counts must be nonnegative")
        if not (self.stage1_lr > 0 and self.stage2_lr > 0):
            raise InvalidInputError("learning rates must be positive")
        if self.batch_size < 1:
            raise InvalidInputError("batch size must be positive")


def rd_loss(targets, predicted, bits_y, bits_z, lmbda: float, n_points: int):
    """Mean absolute residual error plus lambda times bits per point."""
    if isinstance(targets, torch.Tensor):
        dist = torch.mean(torch.abs(predicted - targets))
    else:
        dist = float(np.mean(np.abs(np.asarray(predicted) - np.asarray(targets))))
    return dist + lmbda * (bits_y + bits_z) / n_points


# --------------------------------------------------------------------------
# example preparation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Example:
    n: int
    m: int
    r: int
    feats: np.ndarray  # (m r, 6) scaled member features
    residuals: np.ndarray  # (m r, 3)
    relpos: np.ndarray  # (m r, 3) unscaled
    scale: np.ndarray  # (m,)
    plan: GraphPlan
    q_relpos: np.ndarray  # (q, 3) extra decoder queries
    q_cluster: np.ndarray  # (q,)
    q_targets: np.ndarray  # (q, 3)


def prepare_example(cloud, rate: float, rng: np.random.Generator | None = None, config: TrainConfig | None = None) -> Example:
    cfg = config or TrainConfig()
    pts = as_points(cloud)
    n = len(pts)
    m = max(8, int(round(n / rate)))
    sparse = quantize_coords(pts[farthest_point_sample(pts, m)], cfg.depth).dequantize()
    m_act = len(sparse)
    r = choose_r(n, m_act)
    base, cmap = interpolate_upsample(sparse, r)
    res = residual_targets(pts, base, cmap, cfg.pairing)
    scale = local_scale(sparse)
    feats = member_features(cmap, res, scale)
    plan = build_graph_plan(sparse, cfg.k_enc, cfg.k_dec)

    rq = min(r * cfg.extra_query_mult, m_act - 1)
    if cfg.extra_queries > 0 and rq > r:
        dense, dmap = interpolate_upsample(sparse, rq)
        # only the members beyond the first r are new
        cand = (np.arange(m_act)[:, None] * rq + np.arange(r, rq)[None, :]).ravel()
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(cand, size=min(cfg.extra_queries, len(cand)), replace=False)
        pick.sort()
        q_pts = dense[pick]
        qi, _ = nearest(q_pts, pts)
        q_cluster = pick // rq
        q_rel = dmap.member_relpos.reshape(-1, 3)[pick]
        q_tgt = pts[qi] - q_pts
    else:
        q_rel = np.zeros((0, 3))
        q_cluster = np.zeros(0, np.int64)
        q_tgt = np.zeros((0, 3))
    return Example(
        n, m_act, r, feats.astype(np.float32), res.astype(np.float32),
        cmap.member_relpos.reshape(-1, 3).astype(np.float32), scale.astype(np.float32), plan,
        q_rel.astype(np.float32), q_cluster.astype(np.int64), q_tgt.astype(np.float32),
    )


def prepare_corpus(clouds, config: TrainConfig) -> list[Example]:
    rng = np.random.default_rng(config.seed)
    out = []
    rates = list(config.rates)
    for cloud in clouds:
        k = min(config.rates_per_shape, len(rates))
        for rate in rng.choice(rates, size=k, replace=False):
            out.append(prepare_example(cloud, float(rate), rng, config))
    return out


@dataclass
class Batch:
    feats: torch.Tensor
    cluster_ids: torch.Tensor
    residuals: torch.Tensor
    relpos: torch.Tensor  # member relpos / scale
    member_scale: torch.Tensor  # (Σ m r, 1)
    q_relpos: torch.Tensor
    q_cluster: torch.Tensor
    q_scale: torch.Tensor
    q_targets: torch.Tensor
    plan: object
    n_clusters: int
    n_points: int


def collate(examples) -> Batch:
    feats, ids, res, rel, msc, qrel, qcl, qsc, qt = ([] for _ in range(9))
    off = 0
    for ex in examples:
        sc = np.repeat(ex.scale, ex.r)[:, None]
        feats.append(ex.feats)
        ids.append(np.repeat(np.arange(ex.m), ex.r) + off)
        res.append(ex.residuals)
        rel.append(ex.relpos / sc)
        msc.append(sc)
        qs = ex.scale[ex.q_cluster][:, None]
        qrel.append(ex.q_relpos / qs)
        qcl.append(ex.q_cluster + off)
        qsc.append(qs)
        qt.append(ex.q_targets)
        off += ex.m
    t = lambda xs, dt=torch.float32: torch.as_tensor(np.concatenate(xs), dtype=dt)  # noqa: E731
    return Batch(
        t(feats), t(ids, torch.int64), t(res), t(rel), t(msc), t(qrel), t(qcl, torch.int64), t(qsc), t(qt),
        batch_plans([ex.plan for ex in examples]), off, sum(ex.n for ex in examples),
    )


# --------------------------------------------------------------------------
# forward pass with the noise proxy
# --------------------------------------------------------------------------


@dataclass
class StepResult:
    loss: torch.Tensor
    distortion: torch.Tensor
    bits_y: torch.Tensor
    bits_z: torch.Tensor
    n_points: int
    aux: torch.Tensor | None = None  # entropy-model fitting term, stage 1 only


def forward_batch(model: CodecModel, batch: Batch, lmbda: float, with_rate: bool = True,
                  generator: torch.Generator | None = None, local_units: bool = True) -> StepResult:
    """Loss terms for one batch.

    Without the rate the entropy model still sees the latents, detached, and
    ``aux`` carries their rate per point; its gradient reaches only the
    entropy networks.
    """
    y = model.encoder(batch.feats, batch.cluster_ids, batch.n_clusters)
    y_t = quantize(y, "noise", generator)
    y_r, y_rt = (y, y_t) if with_rate else (y.detach(), y_t.detach())
    z = model.hyper_encoder(y_r, batch.plan)
    z_t = quantize(z, "noise", generator)
    mu, sigma = model.hyper_decoder(z_t, batch.plan)
    bits_y = gaussian_bits(y_rt, mu, sigma).sum()
    bits_z = model.prior(z_t).sum()

    # the decoder works in local units; the loss may stay there so every rate weighs alike
    m_unit = 1.0 if local_units else batch.member_scale
    q_unit = 1.0 if local_units else batch.q_scale
    pred = model.decoder(batch.relpos, y_t[batch.cluster_ids]) * m_unit
    targets, preds = [batch.residuals * m_unit / batch.member_scale], [pred]
    if len(batch.q_relpos):
        preds.append(model.decoder(batch.q_relpos, y_t[batch.q_cluster]) * q_unit)
        targets.append(batch.q_targets * q_unit / batch.q_scale)
    dist = torch.mean(torch.abs(torch.cat(preds) - torch.cat(targets)))
    aux = None
    if with_rate:
        loss = rd_loss(torch.cat(targets), torch.cat(preds), bits_y, bits_z, lmbda, batch.n_points)
    else:
        loss = dist
        aux = (bits_y + bits_z) / batch.n_points
    return StepResult(loss, dist, bits_y, bits_z, batch.n_points, aux)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow(row)

    def column(self, name: str, stage: int | None = None) -> np.ndarray:
        return np.array([r[name] for r in self.rows if stage is None or r["stage"] == stage])


def train(
    dataset,
    config: TrainConfig = TrainConfig(),
    model: CodecModel | None = None,
    log_path=None,
    progress=None,
) -> tuple[CodecModel, TrainLog]:
    """Two-stage training: distortion only, then the full rate-distortion loss.

    During stage 1 the entropy model is fitted to the detached latents
    (``stage1_entropy``) so stage 2 starts from a calibrated rate model; the
    transforms themselves see only the distortion there.

    ``dataset`` holds normalised clouds (arrays or objects with ``.points``)
    or already prepared :class:`Example` objects.
    """
    items = list(dataset)
    if not items:
        raise InvalidInputError("training dataset is empty")
    if not isinstance(items[0], Example):
        items = prepare_corpus([getattr(c, "points", c) for c in items], config)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed + 1)
    gen = torch.Generator().manual_seed(config.seed + 2)
    if model is None:
        model = CodecModel(config.k_enc, config.k_dec, config.lmbda, seed=config.seed)
    model.lmbda = config.lmbda
    log = TrainLog()
    step = 0
    t0 = time.time()
    for stage, steps, lr in ((1, config.stage1_steps, config.stage1_lr), (2, config.stage2_steps, config.stage2_lr)):
        if steps == 0:
            continue
        opt = adam(model.parameters(), lr)
        model.train()
        for _ in range(steps):
            pick = rng.choice(len(items), size=min(config.batch_size, len(items)), replace=False)
            batch = collate([items[i] for i in pick])
            out = forward_batch(model, batch, config.lmbda, with_rate=stage == 2, generator=gen,
                                local_units=config.local_units)
            total = out.loss + out.aux if stage == 1 and config.stage1_entropy else out.loss
            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step} (stage {stage}): distortion={out.distortion.item():.4g} "
                    f"bits_y={out.bits_y.item():.4g} bits_z={out.bits_z.item():.4g}"
                )
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            if step % config.log_every == 0:
                log.append(
                    step=step, stage=stage, distortion=out.distortion.item(),
                    bits_y_pp=out.bits_y.item() / out.n_points, bits_z_pp=out.bits_z.item() / out.n_points,
                    loss=out.loss.item(), lr=lr,
                )
            if progress is not None:
                progress(step, stage, out, time.time() - t0)
            step += 1
    model.eval()
    if log_path is not None:
        log.write_csv(log_path)
    return model, log
