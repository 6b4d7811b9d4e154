"""Timing and memory benchmarks for the sampling, matching and decoder kernels."""
from __future__ import annotations

import json
import resource
import time
import tracemalloc
from importlib import resources

import jsonschema
import numpy as np
import torch

from . import kernels
from .decoder import AttentionMask, DecoderConfig, DecoderParams, QuerySet, decoder_layer
from .matching import brute_force_assign, hungarian

REPORT_MAGIC = "progseg-bench"
REPORT_VERSION = 1


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def _peak_bytes(fn) -> int:
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def bench_sampling(sizes=(2000, 4000, 8000, 16000), k=64, repeats=3, seed=0) -> dict:
    rng = np.random.default_rng(seed)
    backends = ["python"] + (["cython"] if kernels.compiled_available() else [])
    rows = []
    for m in sizes:
        coords = rng.uniform(0, 4, size=(m, 3))
        weights = rng.uniform(0, 1, size=m)
        for b in backends:
            impl = kernels.get_backend(b)
            runs = {
                "fps": lambda: impl.fps(coords, k, 0),
                "weighted_fps": lambda: impl.weighted_fps(coords, weights, k),
            }
            for kind, fn in runs.items():
                rows.append({"kind": kind, "backend": b, "M": m, "k": k,
                             "seconds": _best_of(fn, repeats), "peak_bytes": _peak_bytes(fn)})
    scaling = {}
    for b in backends:
        sel = [r for r in rows if r["backend"] == b and r["kind"] == "fps"]
        if len(sel) < 2:
            continue
        x = np.log([r["M"] for r in sel])
        y = np.log([r["seconds"] for r in sel])
        slope, icpt = np.polyfit(x, y, 1)
        resid = y - (slope * x + icpt)
        r2 = 1.0 - resid.var() / y.var() if y.var() > 0 else 1.0
        scaling[b] = {"slope": float(slope), "r2": float(r2)}
    return {"runs": rows, "fps_scaling": scaling}


def bench_matching(n=7, trials=1000, seed=0) -> dict:
    rng = np.random.default_rng(seed)
    mats = rng.uniform(0, 1, size=(trials, n, n))
    t = time.perf_counter()
    fast = [hungarian(c) for c in mats]
    t_h = time.perf_counter() - t
    t = time.perf_counter()
    slow = [brute_force_assign(c) for c in mats]
    t_b = time.perf_counter() - t
    mism = sum(abs(a.total(c) - b.total(c)) > 1e-9 for a, b, c in zip(fast, slow, mats))
    return {"n": n, "trials": trials, "hungarian_seconds": t_h, "brute_force_seconds": t_b,
            "speedup": t_b / t_h, "mismatches": int(mism), "backend": kernels.BACKEND}


def bench_decoder(sizes=((500, 20), (1000, 20), (2000, 20), (1000, 50), (1000, 100)),
                  dim=32, repeats=3, seed=0) -> list[dict]:
    torch.manual_seed(seed)
    p = DecoderParams(DecoderConfig(dim=dim, pos_dim=36)).double()
    rows = []
    with torch.no_grad():
        for m, k in sizes:
            feats = torch.randn(m, dim, dtype=torch.float64)
            pos = torch.randn(m, 36, dtype=torch.float64)
            q = QuerySet(torch.randn(k, dim, dtype=torch.float64), np.zeros((k, 3)),
                         torch.randn(k, 36, dtype=torch.float64))
            mask = AttentionMask(np.random.default_rng(seed).uniform(size=(k, m)) > 0.5)
            sec = _best_of(lambda: decoder_layer(q, feats, pos, mask, p), repeats)
            rows.append({"M": m, "k": k, "seconds_per_layer": sec, "layers_per_second": 1.0 / sec})
    return rows


def run_bench(quick: bool = False, seed: int = 0) -> dict:
    sizes = (1000, 2000, 4000, 8000) if quick else (2000, 4000, 8000, 16000, 32000)
    report = {
        "magic": REPORT_MAGIC,
        "version": REPORT_VERSION,
        "backend": kernels.BACKEND,
        "torch_threads": torch.get_num_threads(),
        "sampling": bench_sampling(sizes, repeats=2 if quick else 3, seed=seed),
        "matching": bench_matching(trials=200 if quick else 1000, seed=seed),
        "decoder": bench_decoder(repeats=1 if quick else 3, seed=seed),
        "peak_rss_bytes": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024,
    }
    validate_report(report)
    return report


def report_schema() -> dict:
    return json.loads(resources.files("progseg").joinpath("schemas", "bench_report.json").read_text())


def validate_report(report: dict):
    jsonschema.validate(report, report_schema())
