"""Optimization loop, inference, checkpoints and the metrics log."""
from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import torch

from ..config import RunConfig, from_dict
from ..decoder import NumericOverflowError
from ..evalkit import EvalResult, Instance, evaluate, scene_ground_truth
from ..geometry import VoxelScene
from .model import SceneTensors, Segmenter

CHECKPOINT_MAGIC = "progseg-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclasses.dataclass
class TrainState:
    cfg: RunConfig
    model: Segmenter
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    step: int
    rng: np.random.Generator

    def state_dict(self) -> dict:
        return {
            "magic": CHECKPOINT_MAGIC,
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.digest(),
            "step": self.step,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "rng": self.rng.bit_generator.state,
            "num_parameters": self.model.num_parameters(),
        }


def configure_threads(cfg: RunConfig):
    torch.set_num_threads(1 if cfg.deterministic else cfg.threads)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)


def init_state(cfg: RunConfig, num_classes: int = 3) -> TrainState:
    seeds = cfg.seeds()
    torch.manual_seed(seeds["init"])
    model = Segmenter(cfg, num_classes)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.train.max_lr, weight_decay=cfg.train.weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(
        opt, max_lr=cfg.train.max_lr, total_steps=max(cfg.train.steps, 1), pct_start=cfg.train.pct_start)
    return TrainState(cfg, model, opt, sched, 0, np.random.default_rng(seeds["sampling"]))


def save_checkpoint(state: TrainState, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state.state_dict(), tmp)
    tmp.replace(path)


def load_checkpoint(path, cfg: RunConfig | None = None) -> TrainState:
    """Restore a state; ``cfg`` (if given) must hash to the stored config."""
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises assorted errors on garbage input
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from exc
    if not isinstance(blob, dict) or blob.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    stored = from_dict(blob["config"])
    if stored.digest() != blob["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    if cfg is not None and cfg.digest() != stored.digest():
        raise CheckpointError(f"{path}: checkpoint was written with a different config")
    state = init_state(stored, num_classes=blob["model"]["decoder.sem_head.bias"].shape[0] - 1)
    state.model.load_state_dict(blob["model"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.scheduler.load_state_dict(blob["scheduler"])
    state.step = int(blob["step"])
    state.rng.bit_generator.state = blob["rng"]
    return state


@dataclasses.dataclass
class Prediction:
    mask: np.ndarray  # bool over voxels
    label: int
    confidence: float
    query: int


def infer(st: SceneTensors, state, top_k: int | None = None, confidence_threshold: float = 0.0):
    """Final-layer predictions, masks binarized at logit 0, sorted by confidence.

    ``state`` is a :class:`TrainState` or a bare :class:`Segmenter`.
    Returns ``(PredictionSet, [Prediction, ...])``.
    """
    model = state.model if isinstance(state, TrainState) else state
    model.eval()
    pred = model.predict_scene(st)
    conf = pred.confidence.numpy()
    labels = pred.semantic_logits[:, :-1].argmax(-1).numpy()
    masks = (pred.mask_logits > 0).numpy()
    order = sorted(range(len(conf)), key=lambda i: (-conf[i], i))
    out = [Prediction(masks[i], int(labels[i]), float(conf[i]), i)
           for i in order if conf[i] >= confidence_threshold]
    if top_k is not None:
        out = out[:top_k]
    return pred, out


def evaluate_model(model: Segmenter, scenes: list[SceneTensors]) -> EvalResult:
    pairs = []
    for st in scenes:
        _, preds = infer(st, model)
        p = [Instance(x.mask, x.label, x.confidence) for x in preds]
        pairs.append((p, scene_ground_truth(st.vs.gt_instance, st.vs.gt_semantic)))
    return evaluate(pairs)


def _finite_terms(terms):
    return {k: float(v.detach()) for k, v in terms.items()}


def _write(log, record):
    if log is not None:
        log.write(json.dumps(record, sort_keys=True) + "\n")
        log.flush()


def train(scenes, cfg: RunConfig, state: TrainState | None = None, log_path=None,
          checkpoint_dir=None, eval_scenes=None, trace_path=None) -> tuple[TrainState, list[dict]]:
    """Train on ``scenes`` (voxel scenes) for ``cfg.train.steps`` total steps.

    One scene per step, cycling through the list in order. Passing a
    restored ``state`` resumes at its step counter. Returns the state and
    the list of metrics records (also appended to ``log_path`` as JSONL).
    """
    if not scenes:
        raise ValueError("train needs at least one scene")
    configure_threads(cfg)
    if state is None:
        state = init_state(cfg, scenes[0].num_classes if isinstance(scenes[0], VoxelScene) else 3)
    model = state.model
    tensors = [s if isinstance(s, SceneTensors) else model.prepare(s) for s in scenes]
    eval_t = tensors if eval_scenes is None else [
        s if isinstance(s, SceneTensors) else model.prepare(s) for s in eval_scenes]
    tc = cfg.train
    records = []
    log = open(log_path, "a") if log_path else None
    trace = open(trace_path, "a") if trace_path else None
    try:
        while state.step < tc.steps:
            model.train()
            i = state.step % len(tensors)
            try:
                out = model.forward_scene(tensors[i], state.rng)
            except NumericOverflowError as exc:
                _write(log, {"step": state.step, "event": "diverged", "scene": i, "error": str(exc)})
                raise TrainingDiverged(f"decoder overflow at step {state.step} on scene {i}") from exc
            terms = _finite_terms(out.terms)
            loss = float(out.total.detach())
            if not math.isfinite(loss):
                bad = sorted(k for k, v in terms.items() if not math.isfinite(v))
                _write(log, {"step": state.step, "event": "diverged", "scene": i, "terms": terms})
                raise TrainingDiverged(
                    f"loss became non-finite at step {state.step} on scene {i}; bad terms: {bad}")
            state.optimizer.zero_grad(set_to_none=True)
            out.total.backward()
            gnorm = torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            lr = state.optimizer.param_groups[0]["lr"]
            state.optimizer.step()
            if state.step + 1 < tc.steps:  # OneCycleLR refuses to step past its horizon
                state.scheduler.step()
            state.step += 1
            if trace is not None:
                _write(trace, _trace_record(state.step - 1, i, out))
            rec = {"step": state.step, "scene": i, "loss": loss, "lr": lr,
                   "grad_norm": float(gnorm), "terms": terms}
            if tc.eval_every and (state.step % tc.eval_every == 0 or state.step == tc.steps):
                rec["eval"] = dataclasses.asdict(evaluate_model(model, eval_t))
                rec["eval"]["per_class"] = {str(k): v for k, v in rec["eval"]["per_class"].items()}
            if tc.log_every and (state.step % tc.log_every == 0 or "eval" in rec):
                records.append(rec)
                _write(log, rec)
            if checkpoint_dir and tc.checkpoint_every and state.step % tc.checkpoint_every == 0:
                save_checkpoint(state, Path(checkpoint_dir) / f"step_{state.step:06d}.pt")
    finally:
        if log is not None:
            log.close()
        if trace is not None:
            trace.close()
    return state, records


def _trace_record(step, scene, out) -> dict:
    """Discrete decisions of a training step, for inspection and debugging."""
    res = out.result
    return {
        "step": step,
        "scene": scene,
        "stages": out.stages,
        "init_idx": out.trace.init_idx.tolist(),
        "assignments": [None if a is None else a.gt_of_query.tolist() for a in out.assignments],
        "c_avg": None if res.c_avg is None else np.asarray(res.c_avg).tolist(),
        "fine_assignment": None if res.fine_assignment is None else res.fine_assignment.gt_of_query.tolist(),
    }
