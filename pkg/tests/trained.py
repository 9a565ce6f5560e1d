"""Desk-scale trained model shared by the slow tests.

Training takes a quarter of an hour on one core, so the result is cached
under ``tests/.artifacts`` keyed by the sources of the modules that shape
the weights and by the training configuration. Delete the directory (or set ``CRCIR_RETRAIN=1``) to force a
fresh run. The cache also holds a stage-2 ablation with lambda = 0 that
starts from the same stage-1 checkpoint.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

import crcir
from crcir.model import CodecModel
from crcir.synth import FAMILIES, make_shape, random_corpus, random_sampler
from crcir.training import TrainConfig, TrainLog, prepare_corpus, train

CACHE = Path(os.environ.get("CRCIR_TEST_CACHE", Path(__file__).parent / ".artifacts"))
DESK = TrainConfig()  # 2000 + 1000 steps, batch 8
CORPUS_SIZE = 200
CORPUS_POINTS = 8192
TEST_CLOUDS = 20
DENSE_POINTS = 65536


@dataclass
class Trained:
    model: CodecModel
    log: TrainLog
    stage1: CodecModel
    ablation: CodecModel
    ablation_log: TrainLog
    train_seconds: float


# modules whose code changes the trained weights
_TRAINING_SOURCES = ("basecodec", "entropy", "geometry", "model", "modelfile", "nn", "refinement", "synth", "training")


def _key() -> str:
    h = hashlib.blake2b(digest_size=8)
    root = Path(crcir.__file__).parent
    for name in _TRAINING_SOURCES:
        h.update((root / f"{name}.py").read_bytes())
    h.update(repr((DESK, CORPUS_SIZE, CORPUS_POINTS)).encode())
    return h.hexdigest()


def _read_log(path) -> TrainLog:
    log = TrainLog()
    with open(path) as fh:
        for row in csv.DictReader(fh):
            log.append(**{k: (int(v) if k in ("step", "stage") else float(v)) for k, v in row.items()})
    return log


def _train(out: Path) -> None:
    torch.set_num_threads(1)
    t0 = time.time()
    shapes = random_corpus(CORPUS_SIZE, CORPUS_POINTS, seed=0)
    items = prepare_corpus([s.points for s in shapes], DESK)
    stage1, log1 = train(items, replace(DESK, stage2_steps=0))
    model, log2 = train(items, replace(DESK, stage1_steps=0), model=copy.deepcopy(stage1))
    seconds = time.time() - t0
    ablation, log3 = train(items, replace(DESK, stage1_steps=0, lmbda=0.0), model=copy.deepcopy(stage1))

    out.mkdir(parents=True, exist_ok=True)
    stage1.save(out / "stage1.crcw")
    model.save(out / "model.crcw")
    ablation.save(out / "ablation.crcw")
    # stage-2 runs restart step numbering; shift them after stage 1
    for row in log2.rows + log3.rows:
        row["step"] += DESK.stage1_steps
    TrainLog(log1.rows + log2.rows).write_csv(out / "log.csv")
    TrainLog(log1.rows + log3.rows).write_csv(out / "ablation.csv")
    (out / "meta.json").write_text(json.dumps({"train_seconds": seconds}))


def load_trained() -> Trained:
    out = CACHE / _key()
    if os.environ.get("CRCIR_RETRAIN") or not (out / "meta.json").exists():
        _train(out)
    meta = json.loads((out / "meta.json").read_text())
    return Trained(
        CodecModel.load(out / "model.crcw"),
        _read_log(out / "log.csv"),
        CodecModel.load(out / "stage1.crcw"),
        CodecModel.load(out / "ablation.crcw"),
        _read_log(out / "ablation.csv"),
        meta["train_seconds"],
    )


def held_out_clouds(count: int = TEST_CLOUDS, seed: int = 1234):
    """Held-out clouds with a dense ground truth drawn from the same surface.

    Families cycle so each appears equally; the first 8192 of the dense
    samples form the codec input.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        sampler = random_sampler(rng, CORPUS_POINTS, FAMILIES[i % len(FAMILIES)])
        dense = make_shape(sampler, rng, n=DENSE_POINTS).points
        out.append((dense[:CORPUS_POINTS], dense))
    return out
