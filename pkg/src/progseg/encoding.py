"""Fourier position encoding, dual position embedding and the offset branch."""
from __future__ import annotations

import dataclasses
import math

import torch
from torch import nn

DIR_EPS = 1e-8


@dataclasses.dataclass(frozen=True)
class FourierSpec:
    num_bands: int = 16
    base_scale: float = 2.0 * math.pi / 4.0

    def __post_init__(self):
        if self.num_bands < 1:
            raise ValueError("num_bands must be >= 1")

    @property
    def embed_dim(self) -> int:
        return 6 * self.num_bands

    @classmethod
    def for_extent(cls, extent: float, num_bands: int = 16) -> "FourierSpec":
        """Lowest frequency completes one period across ``extent`` meters."""
        return cls(num_bands=num_bands, base_scale=2.0 * math.pi / extent)


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def fourier_encode(coords, spec: FourierSpec) -> torch.Tensor:
    """Encode (M, 3) coordinates as (M, 6B) features.

    Column layout per row: for each axis, for each band b,
    ``[sin(f_b x), cos(f_b x)]`` with ``f_b = base_scale * 2**b``.
    """
    x = _as_tensor(coords)
    if not torch.all(torch.isfinite(x)):
        raise ValueError("non-finite coordinates")
    freqs = spec.base_scale * 2.0 ** torch.arange(spec.num_bands, dtype=x.dtype)
    ang = x[..., :, None] * freqs  # (M, 3, B)
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)  # (M, 3, B, 2)
    return out.reshape(*x.shape[:-1], spec.embed_dim)


def dual_position_embedding(coords, offsets, spec: FourierSpec, mode: str = "dual") -> torch.Tensor:
    """E = Fourier(C) + Fourier(C + O); ``mode`` selects either term alone for ablations."""
    c = _as_tensor(coords)
    if mode == "original":
        return fourier_encode(c, spec)
    shifted = fourier_encode(c + _as_tensor(offsets), spec)
    if mode == "centralized":
        return shifted
    if mode == "dual":
        return fourier_encode(c, spec) + shifted
    raise ValueError(f"unknown embedding mode {mode!r}")


class OffsetHead(nn.Module):
    """Two-layer MLP predicting per-voxel center offsets from [F, C]."""

    def __init__(self, feat_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or feat_dim
        self.fc1 = nn.Linear(feat_dim + 3, hidden)
        self.fc2 = nn.Linear(hidden, 3)
        self.act = nn.GELU()

    def forward(self, feats, coords):
        return self.fc2(self.act(self.fc1(torch.cat([feats, coords], dim=-1))))


def predict_offsets(feats, coords, head: OffsetHead) -> torch.Tensor:
    return head(feats, _as_tensor(coords))


def _fg(fg_mask):
    return torch.as_tensor(fg_mask, dtype=torch.bool)


def loss_reg(o, o_star, fg_mask) -> torch.Tensor:
    """Mean L2 distance between predicted and target offsets over foreground voxels."""
    fg = _fg(fg_mask)
    if not bool(fg.any()):
        return o.sum() * 0.0
    diff = o[fg] - _as_tensor(o_star)[fg]
    return torch.linalg.vector_norm(diff, dim=-1).mean()


def loss_dir(o, o_star, fg_mask, eps: float = DIR_EPS) -> torch.Tensor:
    """Mean negative cosine between predicted and target offsets.

    Foreground voxels where either vector is shorter than ``eps`` are left
    out of both the sum and the count.
    """
    fg = _fg(fg_mask)
    o_star = _as_tensor(o_star)
    n_pred = torch.linalg.vector_norm(o, dim=-1)
    n_tgt = torch.linalg.vector_norm(o_star, dim=-1)
    keep = fg & (n_pred.detach() >= eps) & (n_tgt >= eps)
    if not bool(keep.any()):
        return o.sum() * 0.0
    cos = (o[keep] * o_star[keep]).sum(-1) / (n_pred[keep] * n_tgt[keep])
    return -cos.mean()
