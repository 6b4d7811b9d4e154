"""Central finite-difference verification of the analytic gradients.

The discrete choices of a forward pass (voxel sample, query seeds,
attention masks, assignments, averaged centers) are recorded once and
replayed for every perturbed evaluation, so the loss is a smooth function
of the parameters being probed.
"""
from __future__ import annotations

import dataclasses

import numpy as np
import torch

from .model import SceneTensors, Segmenter

GROUPS = ("backbone", "offset_head", "weight_head", "voxel_sem", "decoder.sem_head", "decoder")


def parameter_group(name: str) -> str:
    for g in GROUPS:
        if name.startswith(g + "."):
            return g
    return name.split(".")[0]


@dataclasses.dataclass
class Probe:
    name: str
    index: int
    analytic: float
    numeric: float
    term: str

    @property
    def abs_err(self) -> float:
        return abs(self.analytic - self.numeric)

    def rel_err(self, floor: float) -> float:
        return self.abs_err / max(abs(self.analytic), abs(self.numeric), floor)


@dataclasses.dataclass
class GradcheckReport:
    probes: list[Probe]
    floor: float
    eps: float

    @property
    def max_rel_err(self) -> float:
        return max((p.rel_err(self.floor) for p in self.probes), default=0.0)

    def groups(self) -> set[str]:
        return {parameter_group(p.name) for p in self.probes}

    def terms(self) -> set[str]:
        return {p.term for p in self.probes}

    def worst(self, n: int = 5) -> list[Probe]:
        return sorted(self.probes, key=lambda p: -p.rel_err(self.floor))[:n]


def _pick(model: Segmenter, n: int, rng) -> list[tuple[str, torch.nn.Parameter, int]]:
    """About ``n`` scalar entries, spread evenly over parameter groups."""
    by_group: dict[str, list] = {}
    for name, p in model.named_parameters():
        by_group.setdefault(parameter_group(name), []).append((name, p))
    per = int(np.ceil(n / len(by_group)))
    out = []
    for g in sorted(by_group):
        params = by_group[g]
        sizes = np.array([p.numel() for _, p in params])
        flat = rng.choice(sizes.sum(), size=min(per, sizes.sum()), replace=False)
        bounds = np.cumsum(sizes)
        for f in np.sort(flat):
            j = int(np.searchsorted(bounds, f, side="right"))
            start = bounds[j] - sizes[j]
            out.append((params[j][0], params[j][1], int(f - start)))
    return out


def gradcheck(model: Segmenter, st: SceneTensors, num_params: int = 200, eps: float = 1e-6,
              floor: float = 1e-6, rng=None, per_term: int = 0) -> GradcheckReport:
    """Compare autograd against central differences on sampled parameters.

    ``num_params`` entries are probed on the total loss; with ``per_term``
    > 0 that many extra entries are also probed on every loss term alone.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    model.train()
    first = model.forward_scene(st, rng)
    replay = first.trace
    term_names = ["total"] + (sorted(first.terms) if per_term else [])

    def loss_of(term):
        out = model.forward_scene(st, replay=replay)
        return out.total if term == "total" else out.terms[term]

    probes = []
    for term in term_names:
        picks = _pick(model, num_params if term == "total" else per_term, rng)
        model.zero_grad(set_to_none=True)
        loss_of(term).backward()
        grads = {name: p.grad.detach().clone().reshape(-1) if p.grad is not None else None
                 for name, p in model.named_parameters()}
        with torch.no_grad():
            for name, p, j in picks:
                flat = p.data.view(-1)
                orig = flat[j].item()
                flat[j] = orig + eps
                up = loss_of(term).item()
                flat[j] = orig - eps
                down = loss_of(term).item()
                flat[j] = orig
                g = grads[name]
                probes.append(Probe(name, j, 0.0 if g is None else g[j].item(),
                                    (up - down) / (2 * eps), term))
    model.zero_grad(set_to_none=True)
    return GradcheckReport(probes, floor, eps)
