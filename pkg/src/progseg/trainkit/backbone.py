"""Micro-backbone: per-voxel MLP, one radius mean-pooling round, second MLP."""
from __future__ import annotations

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn


def radius_adjacency(coords, radius: float) -> torch.Tensor:
    """Row-normalized sparse (M, M) averaging operator over r-neighbors (self included)."""
    coords = np.asarray(coords, dtype=np.float64)
    m = len(coords)
    pairs = cKDTree(coords).query_pairs(radius, output_type="ndarray")
    rows = np.concatenate([np.arange(m), pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([np.arange(m), pairs[:, 1], pairs[:, 0]])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    deg = np.bincount(rows, minlength=m).astype(np.float64)
    vals = 1.0 / deg[rows]
    idx = torch.as_tensor(np.stack([rows, cols]), dtype=torch.long)
    return torch.sparse_coo_tensor(idx, torch.as_tensor(vals), (m, m), check_invariants=False).coalesce()


class MicroBackbone(nn.Module):
    def __init__(self, in_dim: int = 6, hidden: int = 32, out_dim: int = 32):
        super().__init__()
        self.mlp1 = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))
        self.mlp2 = nn.Sequential(nn.Linear(out_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))

    def forward(self, feats_in, adjacency):
        h = self.mlp1(feats_in)
        return self.mlp2(torch.sparse.mm(adjacency, h))


def backbone_forward(vs, backbone: MicroBackbone, radius: float) -> torch.Tensor:
    feats = torch.as_tensor(vs.feats_in, dtype=torch.float64)
    return backbone(feats, radius_adjacency(vs.coords, radius))
