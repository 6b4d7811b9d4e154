"""Farthest point sampling, weighted FPS and class-aware voxel sampling."""
from __future__ import annotations

import dataclasses

import numpy as np
import torch

from . import kernels
from .geometry import VoxelScene

DEFAULT_ALPHA = 25.0
DEFAULT_PER_INSTANCE = 128


@dataclasses.dataclass(frozen=True)
class SampleSet:
    indices: np.ndarray
    kind: str  # "fps" | "weighted_fps" | "class_aware" | "random"

    def __len__(self):
        return len(self.indices)


class BudgetExceeded(ValueError):
    pass


def _check_k(k, m):
    if not 1 <= k <= m:
        raise ValueError(f"need 1 <= k <= M, got k={k}, M={m}")


def fps(coords, k: int, seed_index: int = 0, backend=None) -> SampleSet:
    """Exact greedy farthest point sampling (ties go to the lowest index)."""
    coords = np.asarray(coords, dtype=np.float64)
    _check_k(k, len(coords))
    if not 0 <= seed_index < len(coords):
        raise ValueError("seed_index out of range")
    idx = kernels.get_backend(backend).fps(coords, int(k), int(seed_index))
    return SampleSet(np.asarray(idx, dtype=np.int64), "fps")


def weighted_fps(coords, weights, k: int, backend=None) -> SampleSet:
    """Greedy FPS scoring each candidate by ``w_i * min_dist_i``.

    Weights are clamped to [0, 1]; the first sample is the highest-weight
    voxel.
    """
    coords = np.asarray(coords, dtype=np.float64)
    _check_k(k, len(coords))
    w = np.clip(np.asarray(weights, dtype=np.float64), 0.0, 1.0)
    if w.shape != (len(coords),):
        raise ValueError("weights must have one entry per voxel")
    idx = kernels.get_backend(backend).weighted_fps(coords, w, int(k))
    return SampleSet(np.asarray(idx, dtype=np.int64), "weighted_fps")


def oracle_weights(gt_offsets, alpha: float = DEFAULT_ALPHA, fg_mask=None) -> np.ndarray:
    """``exp(-alpha * |O*|)``; zero on background when ``fg_mask`` is given."""
    w = np.exp(-alpha * np.linalg.norm(np.asarray(gt_offsets), axis=-1))
    return w if fg_mask is None else np.where(fg_mask, w, 0.0)


def loss_fore(w, o_star, fg_mask, alpha: float = DEFAULT_ALPHA) -> torch.Tensor:
    fg = torch.as_tensor(fg_mask, dtype=torch.bool)
    if not bool(fg.any()):
        return w.sum() * 0.0
    target = torch.exp(-alpha * torch.linalg.vector_norm(torch.as_tensor(o_star), dim=-1))
    return (w[fg] - target[fg]).abs().mean()


def loss_back(w, fg_mask) -> torch.Tensor:
    bg = ~torch.as_tensor(fg_mask, dtype=torch.bool)
    if not bool(bg.any()):
        return w.sum() * 0.0
    return w[bg].abs().mean()


def class_aware_capacity(vs: VoxelScene) -> int:
    """Largest sample the per-instance cap allows: background plus half of each instance."""
    sizes = np.bincount(vs.gt_instance[vs.fg_mask]) if vs.fg_mask.any() else np.zeros(0, dtype=np.int64)
    return int((~vs.fg_mask).sum() + (sizes // 2).sum())


def class_aware_sample(vs: VoxelScene, n_per_instance: int, total: int, rng) -> SampleSet:
    """Take up to ``n_per_instance`` voxels per instance, then fill uniformly.

    No instance ever contributes more than ``floor(size / 2)`` voxels, the
    fill included; the fill draws from background voxels and from each
    instance's remaining allowance.
    """
    m = vs.num_voxels
    if total > m:
        raise ValueError(f"sample budget {total} exceeds voxel count {m}")
    if n_per_instance < 1:
        raise ValueError("n_per_instance must be >= 1")
    picked, pool = [], [np.flatnonzero(~vs.fg_mask)]
    for inst in vs.instance_ids():
        members = rng.permutation(np.flatnonzero(vs.gt_instance == inst))
        cap = len(members) // 2
        take = min(n_per_instance, cap)
        picked.append(members[:take])
        pool.append(members[take:cap])
    chosen = np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)
    if len(chosen) > total:
        raise BudgetExceeded("budget exceeded")
    pool = np.concatenate(pool)
    if total - len(chosen) > len(pool):
        raise BudgetExceeded(f"budget {total} exceeds the {len(chosen) + len(pool)} voxels "
                             "allowed by the per-instance cap")
    fill = rng.choice(pool, size=total - len(chosen), replace=False)
    return SampleSet(np.sort(np.concatenate([chosen, fill]).astype(np.int64)), "class_aware")


def random_sample(vs: VoxelScene, total: int, rng) -> SampleSet:
    m = vs.num_voxels
    if total > m:
        raise ValueError(f"sample budget {total} exceeds voxel count {m}")
    return SampleSet(np.sort(rng.choice(m, size=total, replace=False)).astype(np.int64), "random")
