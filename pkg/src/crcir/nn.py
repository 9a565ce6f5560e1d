"""Small building blocks for the codec networks.

Every "convolution" in these architectures has kernel size one, so layers act
on individual points (rows) and are plain linear maps.
"""

from __future__ import annotations

import torch
from torch import nn

from crcir.errors import StateError

BN_MOMENTUM = 0.1  # torch convention: running = 0.9 * running + 0.1 * batch
BN_EPS = 1e-5
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class ResnetBlock(nn.Module):
    """linear -> (batchnorm) -> relu -> linear, plus a projected skip when widths differ."""

    def __init__(self, in_ch: int, out_ch: int, norm: bool = True):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.fc0 = nn.Linear(in_ch, out_ch)
        self.norm = nn.BatchNorm1d(out_ch, eps=BN_EPS, momentum=BN_MOMENTUM) if norm else nn.Identity()
        self.fc1 = nn.Linear(out_ch, out_ch)
        self.skip = nn.Linear(in_ch, out_ch, bias=False) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_ch:
            raise ValueError(f"expected {self.in_ch} channels, got {x.shape[-1]}")
        return self.skip(x) + self.fc1(torch.relu(self.norm(self.fc0(x))))


def mlp(widths: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for a, b in zip(widths[:-1], widths[1:]):
        layers += [nn.Linear(a, b), nn.ReLU()]
    return nn.Sequential(*layers)


def segment_softmax(logits: torch.Tensor, segments: torch.Tensor, count: int) -> torch.Tensor:
    """Softmax of ``logits`` within each group of equal ``segments`` ids."""
    peak = torch.full((count,), -torch.inf, dtype=logits.dtype, device=logits.device)
    peak = peak.scatter_reduce(0, segments, logits, reduce="amax", include_self=True)
    e = torch.exp(logits - peak[segments].detach())
    denom = torch.zeros(count, dtype=logits.dtype, device=logits.device).index_add(0, segments, e)
    return e / denom[segments]


def segment_sum(values: torch.Tensor, segments: torch.Tensor, count: int) -> torch.Tensor:
    out = values.new_zeros((count,) + tuple(values.shape[1:]))
    return out.index_add(0, segments, values)


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def quantize(x: torch.Tensor, mode: str, generator: torch.Generator | None = None) -> torch.Tensor:
    """``round``: half away from zero. ``noise``: additive U(-1/2, 1/2), the training proxy."""
    if mode == "round":
        return round_half_away(x)
    if mode == "noise":
        u = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) - 0.5
        return x + u
    raise ValueError(f"unknown quantization mode {mode!r}")


def adam(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def backward(loss: torch.Tensor, grad: torch.Tensor | None = None) -> None:
    """Reverse pass through the recorded graph; a graph can be consumed once."""
    try:
        loss.backward(grad)
    except RuntimeError as exc:
        if "second time" in str(exc) or "does not require grad" in str(exc):
            raise StateError("computation graph already consumed or never recorded") from exc
        raise


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
