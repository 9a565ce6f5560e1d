"""All trainable networks of the codec behind one object, plus (de)serialisation."""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from crcir import modelfile
from crcir.entropy import FactorizedPrior, HyperDecoder, HyperEncoder, PriorParams
from crcir.errors import DecodeError, ModelMismatchError
from crcir.nn import count_parameters
from crcir.refinement import ClusterEncoder, ResidualDecoder

_META = "meta."
DEFAULT_META = {"k_enc": 8.0, "k_dec": 4.0, "lmbda": 5e-3}


class CodecModel(nn.Module):
    def __init__(self, k_enc: int = 8, k_dec: int = 4, lmbda: float = 5e-3, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.encoder = ClusterEncoder()
        self.decoder = ResidualDecoder()
        self.hyper_encoder = HyperEncoder()
        self.hyper_decoder = HyperDecoder()
        self.prior = FactorizedPrior()
        self.k_enc, self.k_dec, self.lmbda = int(k_enc), int(k_dec), float(lmbda)

    def parameter_count(self) -> int:
        return count_parameters(self)

    def prior_params(self) -> PriorParams:
        return PriorParams.from_module(self.prior)

    # ---- serialisation -------------------------------------------------

    def entries(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, t in self.state_dict().items():
            if name.endswith("num_batches_tracked"):
                continue
            out[name] = t.detach().cpu().numpy().astype(np.float32)
        out[_META + "k_enc"] = np.array(self.k_enc, np.float32)
        out[_META + "k_dec"] = np.array(self.k_dec, np.float32)
        out[_META + "lmbda"] = np.array(self.lmbda, np.float32)
        return out

    @property
    def checksum(self) -> int:
        return modelfile.payload_checksum(self.entries().values())

    def save(self, path) -> int:
        return modelfile.save(path, self.entries())

    @classmethod
    def from_entries(cls, entries) -> "CodecModel":
        meta = dict(DEFAULT_META)
        for k, v in entries.items():
            if k.startswith(_META):
                meta[k[len(_META) :]] = float(np.asarray(v).reshape(-1)[0])
        model = cls(int(meta["k_enc"]), int(meta["k_dec"]), float(meta["lmbda"]))
        state = model.state_dict()
        weights = {k: v for k, v in entries.items() if not k.startswith(_META)}
        expected = {k for k in state if not k.endswith("num_batches_tracked")}
        if set(weights) != expected:
            missing = sorted(expected - set(weights))
            extra = sorted(set(weights) - expected)
            raise DecodeError(f"model file does not match the architecture (missing {missing[:3]}, extra {extra[:3]})")
        for k, v in weights.items():
            if tuple(v.shape) != tuple(state[k].shape):
                raise DecodeError(f"parameter {k} has shape {v.shape}, expected {tuple(state[k].shape)}")
            state[k] = torch.as_tensor(np.array(v, dtype=np.float32))
        model.load_state_dict(state)
        model.eval()
        return model

    @classmethod
    def load(cls, path) -> "CodecModel":
        path = Path(path)
        if not path.exists():
            raise ModelMismatchError(f"model file {path} not found")
        entries, _ = modelfile.load(path)
        return cls.from_entries(entries)
