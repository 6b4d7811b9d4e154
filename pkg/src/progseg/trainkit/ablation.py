"""Train and evaluate a matrix of config variants x seeds."""
from __future__ import annotations

import csv

from ..config import RunConfig, _merge, from_dict, preset_overrides
from .train import evaluate_model, train

METRICS = ("ap", "ap50", "ap25", "mprec50", "mrec50")


def variant_config(base: RunConfig, variant: str | dict, seed: int) -> RunConfig:
    """``base`` with a preset name (or override dict) applied and the seed replaced."""
    over = preset_overrides(variant) if isinstance(variant, str) else variant
    data = _merge(base.to_dict(), over)
    data["seed"] = seed
    return from_dict(data)


def run_matrix(base: RunConfig, variants, train_scenes, eval_scenes, seeds=(0,), log=None) -> list[dict]:
    """One metrics row per (variant, seed).

    ``variants`` maps a row label to a preset name or override dict; a plain
    list of preset names is also accepted.
    """
    if not isinstance(variants, dict):
        variants = {v: v for v in variants}
    rows = []
    for label, variant in variants.items():
        for seed in seeds:
            cfg = variant_config(base, variant, seed)
            state, _ = train(train_scenes, cfg)
            res = evaluate_model(state.model, [state.model.prepare(v) for v in eval_scenes])
            row = {"variant": label, "seed": seed, "config_hash": cfg.digest()}
            row.update({m: getattr(res, m) for m in METRICS})
            rows.append(row)
            if log is not None:
                log(row)
    return rows


def mean_by_variant(rows) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for label in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == label]
        out[label] = {m: sum(r[m] for r in sel) / len(sel) for m in METRICS}
    return out


def write_rows(rows, path):
    fields = ["variant", "seed", "config_hash", *METRICS]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
