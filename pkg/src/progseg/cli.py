"""Command-line entry point: ``progseg synth|train|infer|eval|bench``."""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, dump_config, preset_names, resolve_config
from .evalkit import Instance, evaluate, scene_ground_truth
from .geometry import SceneFormatError, load_scene, save_scene, voxelize
from .trainkit import ablation
from .trainkit.synth import generate_scene
from .trainkit.train import (
    CheckpointError,
    TrainingDiverged,
    infer,
    init_state,
    load_checkpoint,
    save_checkpoint,
    train,
)

DATA_ENV = "PROGSEG_DATA_DIR"
MANIFEST_MAGIC = "progseg-manifest"
PREDICTIONS_MAGIC = "progseg-predictions"
FORMAT_VERSION = 1


class UsageError(ValueError):
    pass


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_ENV, "data"))


# --- dataset manifest -------------------------------------------------------

def scene_seeds(cfg: RunConfig, n: int) -> list[int]:
    children = np.random.SeedSequence(cfg.seeds()["scene"]).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def write_dataset(cfg: RunConfig, out: Path, n: int) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(scene_seeds(cfg, n)):
        scene = generate_scene(cfg.synth.to_synth(s))
        name = f"scene_{i:04d}.txt"
        save_scene(scene, out / name)
        entries.append({"file": name, "seed": s, "num_points": scene.num_points,
                        "num_instances": scene.num_instances,
                        "sha256": hashlib.sha256((out / name).read_bytes()).hexdigest()})
    manifest = {"magic": MANIFEST_MAGIC, "version": FORMAT_VERSION, "seed": cfg.seed,
                "config_hash": cfg.digest(), "count": len(entries), "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(data: Path) -> dict:
    path = data / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: cannot read manifest ({exc})") from exc
    if manifest.get("magic") != MANIFEST_MAGIC or manifest.get("version") != FORMAT_VERSION:
        raise UsageError(f"{path}: not a version {FORMAT_VERSION} progseg manifest")
    if manifest.get("count") != len(manifest.get("scenes", [])):
        raise UsageError(f"{path}: count does not match scene list")
    return manifest


def load_dataset(data: Path, voxel_size: float, limit: int | None = None):
    manifest = read_manifest(data)
    entries = manifest["scenes"][:limit] if limit else manifest["scenes"]
    return [(e["file"], voxelize(load_scene(data / e["file"]), voxel_size)) for e in entries]


# --- prediction files ---------------------------------------------------------

def prediction_record(name: str, num_voxels: int, preds) -> dict:
    return {"scene": name, "num_voxels": int(num_voxels), "instances": [
        {"voxels": np.flatnonzero(p.mask).tolist(), "label": int(p.label), "confidence": float(p.confidence)}
        for p in preds]}


def read_predictions(path: Path) -> dict:
    try:
        blob = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: cannot read predictions ({exc})") from exc
    if blob.get("magic") != PREDICTIONS_MAGIC or blob.get("version") != FORMAT_VERSION:
        raise UsageError(f"{path}: not a version {FORMAT_VERSION} progseg prediction file")
    for rec in blob["scenes"]:
        m = rec["num_voxels"]
        for inst in rec["instances"]:
            v = inst["voxels"]
            if v and (min(v) < 0 or max(v) >= m):
                raise UsageError(f"{path}: voxel index out of range in scene {rec['scene']}")
            if not 0.0 <= inst["confidence"] <= 1.0:
                raise UsageError(f"{path}: confidence outside [0, 1] in scene {rec['scene']}")
    return blob


# --- commands -----------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    n = cfg.train.num_scenes if args.num_scenes is None else args.num_scenes
    if n < 0:
        raise UsageError("--num-scenes must be >= 0")
    out = Path(args.out) if args.out else default_data_dir()
    manifest = write_dataset(cfg, out, n)
    print(f"wrote {manifest['count']} scenes to {out}")
    return 0


def _announce(model):
    print(f"parameters: {model.num_parameters()}", file=sys.stderr)


def cmd_train(cfg: RunConfig, args) -> int:
    data = Path(args.data) if args.data else default_data_dir()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = [vs for _, vs in load_dataset(data, cfg.model.voxel_size, cfg.train.num_scenes)]
    if not scenes:
        raise UsageError(f"{data}: dataset is empty")
    if args.ablate:
        eval_scenes = scenes
        if args.eval_data:
            eval_scenes = [vs for _, vs in load_dataset(Path(args.eval_data), cfg.model.voxel_size)]
        names = [v.strip() for v in args.ablate.split(",") if v.strip()]
        unknown = sorted(set(names) - set(preset_names()))
        if unknown:
            raise UsageError(f"unknown presets {unknown}")
        seeds = [cfg.seed + i for i in range(args.ablate_seeds)]
        rows = ablation.run_matrix(cfg, names, scenes, eval_scenes, seeds,
                                   log=lambda r: print(json.dumps(r, sort_keys=True)))
        ablation.write_rows(rows, out / "ablation.csv")
        return 0
    state = load_checkpoint(args.resume, cfg) if args.resume else init_state(cfg)
    trace_path = out / "trace.jsonl" if cfg.debug_trace else None
    _announce(state.model)
    state, _ = train(scenes, cfg, state=state, log_path=out / "metrics.jsonl",
                     checkpoint_dir=out / "checkpoints", trace_path=trace_path)
    save_checkpoint(state, out / "final.pt")
    print(f"trained to step {state.step}; checkpoint {out / 'final.pt'}")
    return 0


def cmd_infer(cfg: RunConfig, args) -> int:
    state = load_checkpoint(args.checkpoint)
    vsize = state.cfg.model.voxel_size
    data = Path(args.data) if args.data else default_data_dir()
    records = []
    for name, vs in load_dataset(data, vsize):
        _, preds = infer(state.model.prepare(vs), state, args.top_k, args.confidence_threshold)
        records.append(prediction_record(name, vs.num_voxels, preds))
    blob = {"magic": PREDICTIONS_MAGIC, "version": FORMAT_VERSION, "voxel_size": vsize,
            "checkpoint_step": state.step, "scenes": records}
    Path(args.out).write_text(json.dumps(blob) + "\n")
    print(f"wrote predictions for {len(records)} scenes to {args.out}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    blob = read_predictions(Path(args.predictions))
    data = Path(args.data) if args.data else default_data_dir()
    pairs = []
    for rec in blob["scenes"]:
        vs = voxelize(load_scene(data / rec["scene"]), blob["voxel_size"])
        if vs.num_voxels != rec["num_voxels"]:
            raise UsageError(f"scene {rec['scene']}: prediction has {rec['num_voxels']} voxels, "
                             f"scene has {vs.num_voxels}")
        preds = []
        for inst in rec["instances"]:
            mask = np.zeros(vs.num_voxels, dtype=bool)
            mask[inst["voxels"]] = True
            preds.append(Instance(mask, inst["label"], inst["confidence"]))
        pairs.append((preds, scene_ground_truth(vs.gt_instance, vs.gt_semantic)))
    res = evaluate(pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(res.to_json() + "\n")
    (out / "eval.csv").write_text(res.csv_row())
    print(res.csv_row(), end="")
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    from .bench import run_bench

    report = run_bench(quick=args.quick, seed=cfg.seed)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    m = report["matching"]
    print(f"hungarian vs brute force ({m['n']}x{m['n']}, {m['trials']} trials): {m['speedup']:.1f}x")
    for b, s in report["sampling"]["fps_scaling"].items():
        print(f"fps log-log slope in M ({b}): {s['slope']:.2f}")
    if not args.out:
        print(text, end="")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench}


def _common_flags(default) -> argparse.ArgumentParser:
    # flags accepted both before and after the subcommand; the sub-level copy
    # suppresses defaults so it cannot clobber values given at the top level
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run configuration")
    g.add_argument("--config", default=default, help="YAML run config")
    g.add_argument("--preset", default=default, help=f"named preset ({', '.join(preset_names())})")
    g.add_argument("--seed", type=int, default=default)
    g.add_argument("--threads", type=int, default=default)
    g.add_argument("--deterministic", action="store_true", default=default,
                   help="single-threaded, deterministic kernels")
    g.add_argument("--dump-defaults", action="store_true", default=False if default is None else default,
                   help="print the resolved config and exit")
    return common


def build_parser() -> argparse.ArgumentParser:
    top, common = _common_flags(None), _common_flags(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="progseg", parents=[top])
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", help=f"dataset directory (default ${DATA_ENV} or ./data)")
    p.add_argument("--num-scenes", type=int)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data")
    p.add_argument("--out", default="run")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--ablate", help="comma-separated presets; writes one metrics row per variant and seed")
    p.add_argument("--ablate-seeds", type=int, default=1)
    p.add_argument("--eval-data", help="dataset for ablation evaluation (default: training data)")

    p = sub.add_parser("infer", parents=[common], help="predict instances")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", default="predictions.json")
    p.add_argument("--top-k", type=int)
    p.add_argument("--confidence-threshold", type=float, default=0.0)

    p = sub.add_parser("eval", parents=[common], help="score a prediction file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--data")
    p.add_argument("--out", default="eval")

    p = sub.add_parser("bench", parents=[common], help="timing report")
    p.add_argument("--out")
    p.add_argument("--quick", action="store_true")
    return parser


def resolve(args) -> RunConfig:
    overrides = {}
    for key in ("seed", "threads", "deterministic"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return resolve_config(args.preset, args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        if args.dump_defaults:
            print(dump_config(cfg), end="")
            return 0
        if args.command is None:
            parser.print_help(sys.stderr)
            return 2
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, SceneFormatError, CheckpointError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
