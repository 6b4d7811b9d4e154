"""Bipartite assignment between queries and ground-truth instances."""
from __future__ import annotations

import dataclasses
import functools
import itertools

import numpy as np
import torch

from . import kernels
from .losses import batch_bce_cost, batch_ce_cost, batch_dice_cost

DEFAULT_LAMBDAS = (2.0, 5.0, 2.0)
TIE_TOL = 1e-9
BRUTE_FORCE_LIMIT = 8


@dataclasses.dataclass(frozen=True)
class Assignment:
    """``gt_of_query[q]`` is the matched gt index or -1."""

    gt_of_query: np.ndarray

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(int(q), int(g)) for q, g in enumerate(self.gt_of_query) if g >= 0]

    @property
    def matched(self) -> np.ndarray:
        return self.gt_of_query >= 0

    def total(self, cost) -> float:
        cost = np.asarray(cost)
        return float(sum(cost[q, g] for q, g in self.pairs))

    def __eq__(self, other):
        return isinstance(other, Assignment) and np.array_equal(self.gt_of_query, other.gt_of_query)

    def __hash__(self):
        return hash(self.gt_of_query.tobytes())


def _validate(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost entries must be finite")
    return cost


def hungarian(cost, backend=None, tol: float = TIE_TOL) -> Assignment:
    """Minimum-total assignment; ties resolved to the lexicographically smallest pair list."""
    cost = _validate(cost)
    k, g = cost.shape
    if k == 0 or g == 0:
        return Assignment(np.full(k, -1, dtype=np.int64))
    out = kernels.get_backend(backend).hungarian_lex(cost, tol)
    return Assignment(np.asarray(out, dtype=np.int64))


@functools.lru_cache(maxsize=64)
def _perms(n, r):
    return np.array(list(itertools.permutations(range(n), r)), dtype=np.int64).reshape(-1, r)


def brute_force_assign(cost, tol: float = TIE_TOL) -> Assignment:
    """Exhaustive search over all injections; test oracle for :func:`hungarian`."""
    cost = _validate(cost)
    k, g = cost.shape
    if min(k, g) > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to min(k, G) <= {BRUTE_FORCE_LIMIT}")
    if k == 0 or g == 0:
        return Assignment(np.full(k, -1, dtype=np.int64))
    if k >= g:
        # row chosen for each column
        cand = _perms(k, g)
        totals = cost[cand, np.arange(g)].sum(axis=1)
    else:
        cand = _perms(g, k)
        totals = cost[np.arange(k), cand].sum(axis=1)
    best = totals.min()
    thresh = best + tol * max(1.0, abs(best))
    keys = []
    for idx in np.flatnonzero(totals <= thresh):
        p = cand[idx]
        if k >= g:
            pairs = sorted((int(p[c]), c) for c in range(g))
        else:
            pairs = [(r, int(p[r])) for r in range(k)]
        keys.append(pairs)
    pairs = min(keys)
    out = np.full(k, -1, dtype=np.int64)
    for q, c in pairs:
        out[q] = c
    return Assignment(out)


def proposal_cost(mask_logits, sem_logits, gt_masks, gt_classes, lambdas=DEFAULT_LAMBDAS) -> np.ndarray:
    """k x G association cost: weighted dice + mask BCE + semantic CE."""
    mask_logits = torch.as_tensor(mask_logits, dtype=torch.float64)
    sem_logits = torch.as_tensor(sem_logits, dtype=torch.float64)
    gt_masks = torch.as_tensor(gt_masks, dtype=torch.float64)
    gt_classes = torch.as_tensor(gt_classes, dtype=torch.long)
    if mask_logits.ndim != 2 or gt_masks.ndim != 2 or mask_logits.shape[1] != gt_masks.shape[1]:
        raise ValueError("mask logits and gt masks must cover the same voxels")
    if sem_logits.shape[0] != mask_logits.shape[0] or gt_classes.shape[0] != gt_masks.shape[0]:
        raise ValueError("query/gt counts disagree")
    l1, l2, l3 = lambdas
    with torch.no_grad():
        c = (
            l1 * batch_dice_cost(mask_logits, gt_masks)
            + l2 * batch_bce_cost(mask_logits, gt_masks)
            + l3 * batch_ce_cost(sem_logits, gt_classes)
        )
    return c.numpy()


def center_cost(query_centers, centers) -> np.ndarray:
    a = np.asarray(query_centers, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
