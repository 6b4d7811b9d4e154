"""Masked-attention query decoder and the coarse/fine/merge controller.

One :class:`DecoderParams` instance is shared by every layer, so the number
of trainable parameters does not depend on how many layers are run.
"""
from __future__ import annotations

import dataclasses
import math
from typing import Callable

import numpy as np
import torch
from torch import nn

from .losses import PredictionSet
from .matching import Assignment, center_cost, hungarian, proposal_cost


class NumericOverflowError(ArithmeticError):
    pass


@dataclasses.dataclass(frozen=True)
class DecoderConfig:
    dim: int = 32
    pos_dim: int = 96
    num_classes: int = 3  # real classes; heads emit num_classes + 1
    num_heads: int = 4
    ffn_dim: int = 64
    use_projections: bool = True
    use_norm: bool = True
    use_ffn: bool = True
    residual: bool = True
    project_pos: bool = True
    mask_head: bool = True

    @classmethod
    def literal(cls, dim: int, num_classes: int = 3) -> "DecoderConfig":
        """Bare attention equations: no projections, norms, FFN or residuals."""
        return cls(dim=dim, pos_dim=dim, num_classes=num_classes, num_heads=1,
                   use_projections=False, use_norm=False, use_ffn=False,
                   residual=False, project_pos=False, mask_head=False)


class DecoderParams(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        if cfg.dim % cfg.num_heads:
            raise ValueError("dim must be divisible by num_heads")
        if not cfg.project_pos and cfg.pos_dim != cfg.dim:
            raise ValueError("unprojected position embeddings need pos_dim == dim")
        self.cfg = cfg
        d = cfg.dim
        ident = nn.Identity
        lin = (lambda: nn.Linear(d, d)) if cfg.use_projections else ident
        self.cross_q, self.cross_k, self.cross_v, self.cross_out = lin(), lin(), lin(), lin()
        self.self_q, self.self_k, self.self_v, self.self_out = lin(), lin(), lin(), lin()
        norm = (lambda: nn.LayerNorm(d)) if cfg.use_norm else ident
        self.norm1, self.norm2, self.norm3 = norm(), norm(), norm()
        self.ffn = (
            nn.Sequential(nn.Linear(d, cfg.ffn_dim), nn.GELU(), nn.Linear(cfg.ffn_dim, d))
            if cfg.use_ffn else None
        )
        self.pos_proj = nn.Linear(cfg.pos_dim, d) if cfg.project_pos else ident()
        self.mask_embed = (
            nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d)) if cfg.mask_head else ident()
        )
        self.sem_head = nn.Linear(d, cfg.num_classes + 1)


@dataclasses.dataclass
class QuerySet:
    feats: torch.Tensor  # Q_f, (k, D)
    pos_coords: np.ndarray  # (k, 3)
    pos_embed: torch.Tensor  # Q_e, (k, D_e)

    @property
    def k(self) -> int:
        return self.feats.shape[0]


@dataclasses.dataclass
class AttentionMask:
    """``allowed[q, j]`` is True where the additive mask entry is 0."""

    allowed: np.ndarray  # (k, M) bool

    @property
    def additive(self) -> torch.Tensor:
        out = torch.zeros(self.allowed.shape, dtype=torch.float64)
        return out.masked_fill(torch.as_tensor(~self.allowed), -math.inf)

    @classmethod
    def from_logits(cls, logits) -> "AttentionMask":
        pos = np.asarray(torch.as_tensor(logits).detach() > 0)
        empty = ~pos.any(axis=1)
        pos[empty] = True  # an all-negative row falls back to full attention
        return cls(pos)


@dataclasses.dataclass(frozen=True)
class StagePlan:
    coarse: int = 6
    fine: int = 5
    merge: int = 1
    # Position embedding for the merge layer when no fine stage ran.
    merge_uses_avg: bool = True

    @classmethod
    def from_layers(cls, num_layers: int, fine: bool = True, merge: bool = True) -> "StagePlan":
        L = num_layers
        if fine and merge:
            return cls(L, L - 1, 1)
        if fine:
            return cls(L, L - 1, 0)
        if merge:
            return cls(2 * L - 2, 0, 1)
        return cls(2 * L - 1, 0, 0)

    @property
    def total(self) -> int:
        return self.coarse + self.fine + self.merge


def _attend(q, k, v, allowed, heads):
    kq, d = q.shape
    m = k.shape[0]
    dh = d // heads
    qh = q.reshape(kq, heads, dh).transpose(0, 1)
    kh = k.reshape(m, heads, dh).transpose(0, 1)
    vh = v.reshape(m, heads, -1).transpose(0, 1)
    scores = qh @ kh.transpose(1, 2) / math.sqrt(dh)
    if allowed is not None:
        # additive mask applied after scaling
        scores = scores + allowed[None]
    attn = torch.softmax(scores, dim=-1)
    return (attn @ vh).transpose(0, 1).reshape(kq, -1), attn


def decoder_layer(q: QuerySet, feats, pos, mask: AttentionMask | None, p: DecoderParams,
                  return_attn: bool = False):
    """Masked cross-attention to voxels, self-attention among queries, FFN.

    Position embeddings enter queries and keys only; values are the bare
    voxel features and query features.
    """
    cfg = p.cfg
    qpos = p.pos_proj(q.pos_embed)
    kpos = p.pos_proj(pos)
    x = q.feats
    add_mask = mask.additive if mask is not None else None
    ca, cross_attn = _attend(p.cross_q(x + qpos), p.cross_k(feats + kpos), p.cross_v(feats),
                             add_mask, cfg.num_heads)
    ca = p.cross_out(ca)
    x = p.norm1(x + ca if cfg.residual else ca)
    s_in = x + qpos
    sa, self_attn = _attend(p.self_q(s_in), p.self_k(s_in), p.self_v(x), None, cfg.num_heads)
    sa = p.self_out(sa)
    x = p.norm2(x + sa if cfg.residual else sa)
    if p.ffn is not None:
        x = p.norm3(x + p.ffn(x))
    if not bool(torch.isfinite(x).all()):
        raise NumericOverflowError("numeric overflow")
    out = QuerySet(x, q.pos_coords, q.pos_embed)
    if return_attn:
        return out, cross_attn, self_attn
    return out


def predict(q: QuerySet, mask_feats, p: DecoderParams) -> PredictionSet:
    logits = p.mask_embed(q.feats) @ mask_feats.T
    return PredictionSet(logits, p.sem_head(q.feats))


def compute_mask(q: QuerySet, mask_feats, p: DecoderParams):
    """Mask logits of ``q`` over voxels and the attention mask they induce."""
    logits = p.mask_embed(q.feats) @ mask_feats.T
    return logits, AttentionMask.from_logits(logits)


def aggregation_average(mask_logits, coords, fallback) -> np.ndarray:
    """Mean coordinate of each query's positive voxels (fallback row if none)."""
    pos = np.asarray(torch.as_tensor(mask_logits).detach() > 0, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    n = pos.sum(axis=1)
    out = np.array(fallback, dtype=np.float64, copy=True)
    hit = n > 0
    out[hit] = (pos[hit] @ coords) / n[hit, None]
    return out


@dataclasses.dataclass
class GroundTruth:
    """Targets restricted to the voxel set the decoder attends to."""

    masks: np.ndarray  # (G, M') bool
    classes: np.ndarray  # (G,)
    centers: np.ndarray  # (G, 3)

    @property
    def count(self) -> int:
        return len(self.classes)


@dataclasses.dataclass
class Trace:
    """Discrete decisions of one forward pass, replayable for finite differences."""

    masks: list = dataclasses.field(default_factory=list)
    assignments: list = dataclasses.field(default_factory=list)
    c_avg: np.ndarray | None = None


@dataclasses.dataclass
class ProgressiveResult:
    preds: list[PredictionSet]
    assignments: list[Assignment | None]
    stages: list[str]
    query_pos_embed: list[torch.Tensor]
    c_avg: np.ndarray | None
    fine_assignment: Assignment | None
    trace: Trace
    final_queries: QuerySet


def _match(kind, pred: PredictionSet, gt: GroundTruth, lambdas, query_centers):
    if gt.count == 0:
        return Assignment(np.full(len(query_centers) if pred is None else pred.mask_logits.shape[0],
                                  -1, dtype=np.int64))
    if kind == "center":
        return hungarian(center_cost(query_centers, gt.centers))
    return hungarian(proposal_cost(pred.mask_logits.detach(), pred.semantic_logits.detach(),
                                   gt.masks, gt.classes, lambdas))


def run_progressive(
    init: QuerySet,
    feats,
    pos,
    mask_feats,
    coords,
    plan: StagePlan,
    p: DecoderParams,
    gt: GroundTruth | None,
    encode_position: Callable[[np.ndarray], torch.Tensor],
    lambdas=(2.0, 5.0, 2.0),
    coarse_matching: str = "proposal",
    fine_embedding: str = "avg",
    avg_coords=None,
    replay: Trace | None = None,
) -> ProgressiveResult:
    """Run coarse, fine and merge stages over one scene.

    Coarse layers keep the initial position embedding and re-match targets
    after every layer. The fine stage computes averaged query positions from
    the last coarse masks, center-matches them once and holds both fixed.
    The merge layer keeps the averaged embedding and re-matches by proposal
    cost. With ``gt=None`` no matching is done (inference).

    ``avg_coords`` overrides the coordinates averaged for query positions
    (e.g. shifted coordinates ``C + O``); ``fine_embedding='initial'`` keeps
    the coarse embedding in the fine and merge stages.
    """
    trace = Trace() if replay is None else replay
    preds, assigns, stages, embeds = [], [], [], []
    layer = 0
    q = init
    logits0, mask = compute_mask(q, mask_feats, p)
    c_avg = None
    fine_assign = None
    avg_src = coords if avg_coords is None else avg_coords

    if replay is not None:
        mask = AttentionMask(replay.masks[0])
    else:
        trace.masks.append(mask.allowed)

    def step(stage, qe, assign_fn):
        nonlocal q, mask, layer
        q = decoder_layer(QuerySet(q.feats, q.pos_coords, qe), feats, pos, mask, p)
        pred = predict(q, mask_feats, p)
        if gt is None:
            a = None
        elif replay is not None:
            a = replay.assignments[layer]
        else:
            a = assign_fn(pred)
            trace.assignments.append(a)
        preds.append(pred)
        assigns.append(a)
        stages.append(stage)
        embeds.append(qe)
        layer += 1
        if replay is not None:
            if layer < len(replay.masks):
                mask = AttentionMask(replay.masks[layer])
        else:
            mask = AttentionMask.from_logits(pred.mask_logits)
            trace.masks.append(mask.allowed)

    qe0 = init.pos_embed
    for _ in range(plan.coarse):
        step("coarse", qe0, lambda pr: _match(coarse_matching, pr, gt, lambdas, init.pos_coords))

    last_logits = preds[-1].mask_logits if preds else logits0
    need_avg = plan.fine > 0 or (plan.merge > 0 and plan.merge_uses_avg)
    qe_avg = qe0
    if need_avg:
        if replay is not None and replay.c_avg is not None:
            c_avg = replay.c_avg
        else:
            c_avg = aggregation_average(last_logits, avg_src, init.pos_coords)
            trace.c_avg = c_avg
        if fine_embedding != "initial":
            qe_avg = encode_position(c_avg)
        q = QuerySet(q.feats, c_avg, qe_avg)

    if plan.fine > 0 and gt is not None:
        if replay is not None:
            fine_assign = replay.assignments[layer]
        else:
            fine_assign = _match("center", preds[-1] if preds else None, gt, lambdas, c_avg)
    for _ in range(plan.fine):
        step("fine", qe_avg, lambda pr: fine_assign)

    for _ in range(plan.merge):
        step("merge", qe_avg, lambda pr: _match("proposal", pr, gt, lambdas, None))

    return ProgressiveResult(preds, assigns, stages, embeds, c_avg, fine_assign, trace, q)
