"""The full segmenter: backbone, offset and weight heads, shared decoder."""
from __future__ import annotations

import dataclasses

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..config import RunConfig
from ..decoder import (
    DecoderConfig,
    DecoderParams,
    GroundTruth,
    QuerySet,
    StagePlan,
    Trace,
    run_progressive,
)
from ..encoding import FourierSpec, OffsetHead, dual_position_embedding, fourier_encode, loss_dir, loss_reg
from ..geometry import VoxelScene, center_offsets, gt_centers
from ..losses import PredictionSet, loss_all
from ..matching import Assignment
from ..sampling import class_aware_capacity, class_aware_sample, fps, loss_back, loss_fore, random_sample, weighted_fps
from .backbone import MicroBackbone, radius_adjacency


@dataclasses.dataclass
class SceneTensors:
    """A voxel scene with everything the model needs precomputed."""

    vs: VoxelScene
    coords: torch.Tensor
    feats_in: torch.Tensor
    adjacency: torch.Tensor
    o_star: torch.Tensor
    o_star_fore: torch.Tensor
    fg: torch.Tensor
    gt_masks: np.ndarray  # (G, M) bool
    gt_classes: np.ndarray
    gt_centers: np.ndarray
    voxel_class: torch.Tensor  # S for background

    @classmethod
    def build(cls, vs: VoxelScene, radius: float, center_definition: str = "average"):
        insts = gt_centers(vs)
        m = vs.num_voxels
        masks = np.zeros((len(insts), m), dtype=bool)
        for g, inst in enumerate(insts):
            masks[g, inst.voxel_ids] = True
        vclass = np.where(vs.fg_mask, vs.gt_semantic, vs.num_classes)
        return cls(
            vs=vs,
            coords=torch.as_tensor(vs.coords, dtype=torch.float64),
            feats_in=torch.as_tensor(vs.feats_in, dtype=torch.float64),
            adjacency=radius_adjacency(vs.coords, radius),
            o_star=torch.as_tensor(vs.gt_offsets, dtype=torch.float64),
            o_star_fore=torch.as_tensor(center_offsets(vs, center_definition), dtype=torch.float64),
            fg=torch.as_tensor(vs.fg_mask),
            gt_masks=masks,
            gt_classes=np.array([i.semantic for i in insts], dtype=np.int64),
            gt_centers=np.array([i.center for i in insts], dtype=np.float64).reshape(-1, 3),
            voxel_class=torch.as_tensor(vclass, dtype=torch.long),
        )


@dataclasses.dataclass
class ModelTrace:
    sample_idx: np.ndarray
    init_idx: np.ndarray
    init_pos: np.ndarray
    decoder: Trace


@dataclasses.dataclass
class ForwardOutput:
    total: torch.Tensor
    terms: dict
    preds: list
    assignments: list
    stages: list
    result: object
    trace: ModelTrace
    sample_idx: np.ndarray


class Segmenter(nn.Module):
    def __init__(self, cfg: RunConfig, num_classes: int = 3):
        super().__init__()
        self.cfg = cfg
        m = cfg.model
        self.num_classes = num_classes
        self.spec = FourierSpec(m.fourier_bands, m.fourier_base_scale)
        d = m.feat_dim
        self.backbone = MicroBackbone(6, m.backbone_hidden, d)
        self.offset_head = OffsetHead(d, m.offset_hidden)
        self.weight_head = nn.Linear(d, 1)
        if m.literal_attention:
            dcfg = DecoderConfig.literal(d, num_classes)
        else:
            dcfg = DecoderConfig(dim=d, pos_dim=self.spec.embed_dim, num_classes=num_classes,
                                 num_heads=m.num_heads, ffn_dim=m.ffn_dim, residual=m.residual)
        self.decoder = DecoderParams(dcfg)
        self.voxel_sem = nn.Linear(d, num_classes + 1) if m.weight_semantic else None
        self.plan = StagePlan.from_layers(m.num_layers, fine=m.fine, merge=m.merge)
        self.double()

    def prepare(self, vs: VoxelScene) -> SceneTensors:
        return SceneTensors.build(vs, self.cfg.model.backbone_radius, self.cfg.model.center_definition)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def encode(self, st: SceneTensors):
        feats = self.backbone(st.feats_in, st.adjacency)
        offsets = self.offset_head(feats, st.coords)
        w = torch.clamp(self.weight_head(feats).squeeze(-1), 0.0, 1.0)
        sem_logits = None
        if self.voxel_sem is not None:
            sem_logits = self.voxel_sem(feats)
            w = w * (1.0 - torch.softmax(sem_logits, dim=-1)[:, -1])
        pos = dual_position_embedding(st.coords, offsets, self.spec, self.cfg.model.embedding)
        if self.cfg.model.mask_features == "F+E":
            mask_feats = feats + self.decoder.pos_proj(pos)
        else:
            mask_feats = feats
        return feats, offsets, w, pos, mask_feats, sem_logits

    def encode_position(self, xyz) -> torch.Tensor:
        return fourier_encode(torch.as_tensor(xyz, dtype=torch.float64), self.spec)

    def _init_queries(self, st, feats, offsets, w, pos):
        m = self.cfg.model
        k = min(m.num_queries, st.vs.num_voxels)
        coords = st.vs.coords
        if m.query_init == "pred_center":
            shifted = coords + offsets.detach().numpy()
            idx = fps(shifted, k, 0).indices
            return idx, shifted[idx]
        if m.query_init == "gt_center" and len(st.gt_centers):
            centers = st.gt_centers[:k]
            near = np.argmin(((coords[None] - centers[:, None]) ** 2).sum(-1), axis=1)
            rest = [i for i in fps(coords, k, 0).indices if i not in set(near)][: k - len(near)]
            idx = np.concatenate([near, np.array(rest, dtype=np.int64)])
            p = np.vstack([centers, coords[rest]]) if rest else centers
            return idx, p
        if m.query_sampling == "weighted_fps":
            idx = weighted_fps(coords, w.detach().numpy(), k).indices
        else:
            idx = fps(coords, k, 0).indices
        return idx, coords[idx]

    def forward_scene(self, st: SceneTensors, rng=None, train: bool = True,
                      replay: ModelTrace | None = None, with_gt: bool = True) -> ForwardOutput:
        cfg = self.cfg
        feats, offsets, w, pos, mask_feats, vsem = self.encode(st)
        m_vox = st.vs.num_voxels

        if replay is not None:
            sample_idx, init_idx, init_pos = replay.sample_idx, replay.init_idx, replay.init_pos
        else:
            if train:
                budget = min(cfg.train.sample_budget, m_vox)
                if cfg.model.point_sampling == "class_aware":
                    budget = min(budget, class_aware_capacity(st.vs))
                    sample_idx = class_aware_sample(st.vs, cfg.train.n_per_instance, budget, rng).indices
                else:
                    sample_idx = random_sample(st.vs, budget, rng).indices
            else:
                sample_idx = np.arange(m_vox)
            init_idx, init_pos = self._init_queries(st, feats, offsets, w, pos)

        if cfg.model.query_init == "gt_center" and len(st.gt_centers):
            scale = 2.0 if cfg.model.embedding == "dual" else 1.0
            qe = scale * self.encode_position(init_pos)
        else:
            qe = pos[init_idx]
        init = QuerySet(feats[init_idx], np.asarray(init_pos), qe)

        sel = torch.as_tensor(sample_idx, dtype=torch.long)
        coords_s = st.vs.coords[sample_idx]
        gt = None
        if with_gt:
            gt = GroundTruth(st.gt_masks[:, sample_idx], st.gt_classes, st.gt_centers)
        avg_coords = None
        if cfg.model.fine_query_embedding == "avg_shifted":
            avg_coords = coords_s + offsets.detach().numpy()[sample_idx]
        lambdas = tuple(cfg.loss.lambdas)
        result = run_progressive(
            init, feats[sel], pos[sel], mask_feats[sel], coords_s, self.plan, self.decoder, gt,
            self.encode_position, lambdas=lambdas, coarse_matching=cfg.model.coarse_matching,
            fine_embedding=cfg.model.fine_query_embedding, avg_coords=avg_coords,
            replay=None if replay is None else replay.decoder,
        )
        trace = ModelTrace(sample_idx, init_idx, np.asarray(init_pos), result.trace)
        if not with_gt:
            return ForwardOutput(torch.zeros((), dtype=torch.float64), {}, result.preds, [], result.stages,
                                 result, trace, sample_idx)

        lc = cfg.loss
        aux = {
            "reg": lc.w_reg * loss_reg(offsets, st.o_star, st.fg),
            "dir": lc.w_dir * loss_dir(offsets, st.o_star, st.fg),
        }
        if lc.use_loss_fore:
            aux["fore"] = lc.w_fore * loss_fore(w, st.o_star_fore, st.fg, lc.alpha)
        if lc.use_loss_back:
            aux["back"] = lc.w_back * loss_back(w, st.fg)
        if vsem is not None:
            aux["voxel_sem"] = F.cross_entropy(vsem, st.voxel_class)
        if lc.loss_cm and result.fine_assignment is not None:
            aux["cm"] = _soft_center_loss(result, self.plan, coords_s, st.gt_centers)
        total, terms = loss_all(result.preds, result.assignments, gt.masks, gt.classes, aux,
                                lambdas, no_object_weight=lc.no_object_weight)
        return ForwardOutput(total, terms, result.preds, result.assignments, result.stages,
                             result, trace, sample_idx)

    @torch.no_grad()
    def predict_scene(self, st: SceneTensors) -> PredictionSet:
        out = self.forward_scene(st, train=False, with_gt=False)
        return out.preds[-1]


def _soft_center_loss(result, plan: StagePlan, coords_s, centers):
    """Distance between sigmoid-weighted query centers and their center-matched targets."""
    if not result.fine_assignment.pairs:
        return torch.zeros((), dtype=torch.float64)
    logits = result.preds[plan.coarse - 1].mask_logits
    p = torch.sigmoid(logits)
    c = torch.as_tensor(coords_s, dtype=torch.float64)
    soft = (p @ c) / p.sum(-1, keepdim=True).clamp(min=1e-9)
    pairs = result.fine_assignment.pairs
    q = torch.tensor([a for a, _ in pairs])
    g = torch.tensor([b for _, b in pairs])
    tgt = torch.as_tensor(centers, dtype=torch.float64)[g]
    return torch.linalg.vector_norm(soft[q] - tgt, dim=-1).mean()
