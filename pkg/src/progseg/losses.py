"""Mask/semantic losses, the per-layer set-prediction loss and confidence scores."""
from __future__ import annotations

import dataclasses

import numpy as np
import torch
import torch.nn.functional as F

DICE_EPS = 1.0
NO_OBJECT_WEIGHT = 0.1


@dataclasses.dataclass
class PredictionSet:
    """Per-query outputs of one decoder layer.

    ``semantic_logits`` has S + 1 columns; the last one is "no object".
    """

    mask_logits: torch.Tensor  # (k, M)
    semantic_logits: torch.Tensor  # (k, S + 1)

    @property
    def confidence(self) -> torch.Tensor:
        return confidence(self.mask_logits, self.semantic_logits)

    def detach(self) -> "PredictionSet":
        return PredictionSet(self.mask_logits.detach(), self.semantic_logits.detach())


def dice_loss(logits, gt_mask, eps: float = DICE_EPS) -> torch.Tensor:
    p = torch.sigmoid(torch.as_tensor(logits, dtype=torch.float64))
    g = torch.as_tensor(gt_mask, dtype=p.dtype)
    return 1.0 - (2.0 * (p * g).sum() + eps) / (p.sum() + g.sum() + eps)


def bce_mask(logits, gt_mask) -> torch.Tensor:
    x = torch.as_tensor(logits, dtype=torch.float64)
    return F.binary_cross_entropy_with_logits(x, torch.as_tensor(gt_mask, dtype=x.dtype))


def ce_seg(sem_logits, target: int) -> torch.Tensor:
    x = torch.as_tensor(sem_logits, dtype=torch.float64)
    if not 0 <= int(target) < x.shape[-1]:
        raise ValueError(f"target class {target} out of range [0, {x.shape[-1]})")
    return -torch.log_softmax(x, dim=-1)[int(target)]


def batch_dice_cost(logits, gt_masks, eps: float = DICE_EPS) -> torch.Tensor:
    """(k, M) logits x (G, M) masks -> (k, G) dice losses."""
    p = torch.sigmoid(logits)
    num = 2.0 * p @ gt_masks.T
    den = p.sum(-1)[:, None] + gt_masks.sum(-1)[None, :]
    return 1.0 - (num + eps) / (den + eps)


def batch_bce_cost(logits, gt_masks) -> torch.Tensor:
    # BCE(l, g) = softplus(l) - l * g, averaged over voxels
    m = logits.shape[-1]
    return (F.softplus(logits).sum(-1)[:, None] - logits @ gt_masks.T) / m


def batch_ce_cost(sem_logits, gt_classes) -> torch.Tensor:
    return -torch.log_softmax(sem_logits, dim=-1)[:, gt_classes]


def layer_loss(pred: PredictionSet, gt_of_query, gt_masks, gt_classes, lambdas,
               no_object_weight: float = NO_OBJECT_WEIGHT) -> dict:
    """Set-prediction loss of one layer under a fixed assignment.

    Mask terms average over matched pairs. The semantic term is a weighted
    mean over all queries: matched queries target their gt class with weight
    1, unmatched ones target "no object" with ``no_object_weight``.
    """
    k, num_cls = pred.semantic_logits.shape
    gq = torch.as_tensor(np.asarray(gt_of_query), dtype=torch.long)
    matched = gq >= 0
    gt_classes = torch.as_tensor(gt_classes, dtype=torch.long)
    target = torch.full((k,), num_cls - 1, dtype=torch.long)
    target[matched] = gt_classes[gq[matched]]
    weight = torch.full((k,), float(no_object_weight), dtype=pred.semantic_logits.dtype)
    weight[matched] = 1.0
    ce_all = F.cross_entropy(pred.semantic_logits, target, reduction="none")
    ce = (weight * ce_all).sum() / weight.sum()
    if bool(matched.any()):
        logits = pred.mask_logits[matched]
        masks = torch.as_tensor(gt_masks, dtype=logits.dtype)[gq[matched]]
        p = torch.sigmoid(logits)
        dice = (1.0 - (2.0 * (p * masks).sum(-1) + DICE_EPS)
                / (p.sum(-1) + masks.sum(-1) + DICE_EPS)).mean()
        bce = F.binary_cross_entropy_with_logits(logits, masks, reduction="none").mean(-1).mean()
    else:
        dice = bce = pred.mask_logits.sum() * 0.0
    l1, l2, l3 = lambdas
    return {"dice": dice, "bce": bce, "ce": ce, "ac": l1 * dice + l2 * bce + l3 * ce}


def loss_all(layer_preds, layer_assignments, gt_masks, gt_classes, aux: dict, lambdas,
             aux_weights: dict | None = None, no_object_weight: float = NO_OBJECT_WEIGHT):
    """Deeply supervised total: sum of per-layer association losses plus aux terms.

    ``aux`` maps names such as ``reg``, ``dir``, ``fore``, ``back`` to scalar
    tensors; each is scaled by ``aux_weights`` (default 1).
    Returns ``(total, breakdown)``.
    """
    aux_weights = aux_weights or {}
    terms = {}
    total = None
    for layer, (pred, assign) in enumerate(zip(layer_preds, layer_assignments)):
        parts = layer_loss(pred, assign.gt_of_query, gt_masks, gt_classes, lambdas, no_object_weight)
        terms[f"ac_{layer}"] = parts["ac"]
        total = parts["ac"] if total is None else total + parts["ac"]
    for name, value in aux.items():
        scaled = aux_weights.get(name, 1.0) * value
        terms[name] = scaled
        total = scaled if total is None else total + scaled
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    return total, terms


def confidence(mask_logits, semantic_logits) -> torch.Tensor:
    """Dominant real-class probability times mean sigmoid over positive voxels."""
    mask_logits = torch.as_tensor(mask_logits, dtype=torch.float64)
    semantic_logits = torch.as_tensor(semantic_logits, dtype=torch.float64)
    sem = torch.softmax(semantic_logits, dim=-1)[:, :-1].max(dim=-1).values
    pos = (mask_logits > 0).to(mask_logits.dtype)
    npos = pos.sum(-1)
    mean_mask = (torch.sigmoid(mask_logits) * pos).sum(-1) / npos.clamp(min=1.0)
    return torch.where(npos > 0, sem * mean_mask, torch.zeros_like(sem))
