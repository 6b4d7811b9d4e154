"""Scenes, voxelization and ground-truth centers/offsets."""
from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

SCENE_MAGIC = "# progseg-scene v1"


class SceneFormatError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class Scene:
    """Raw labelled point cloud.

    ``instance`` is -1 for background; foreground instances are numbered
    0..G-1 and each carries a single semantic class in [0, num_classes).
    """

    coords: np.ndarray  # (N, 3) meters
    colors: np.ndarray  # (N, 3) in [0, 1]
    instance: np.ndarray  # (N,) int
    semantic: np.ndarray  # (N,) int
    num_classes: int

    def __post_init__(self):
        n = len(self.coords)
        if self.coords.shape != (n, 3) or self.colors.shape != (n, 3):
            raise ValueError("coords and colors must be (N, 3)")
        if self.instance.shape != (n,) or self.semantic.shape != (n,):
            raise ValueError("labels must be length N")

    @property
    def num_points(self) -> int:
        return len(self.coords)

    @property
    def num_instances(self) -> int:
        fg = self.instance[self.instance >= 0]
        return int(fg.max()) + 1 if fg.size else 0

    def validate(self):
        if self.num_points < 1:
            raise ValueError("empty input")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("non-finite coordinates")
        g = self.num_instances
        for inst in range(g):
            sem = np.unique(self.semantic[self.instance == inst])
            if sem.size == 0:
                raise ValueError(f"instance labels not contiguous: {inst} missing")
            if sem.size != 1:
                raise ValueError(f"instance {inst} has mixed semantic labels")
            if not 0 <= sem[0] < self.num_classes:
                raise ValueError(f"instance {inst} semantic {sem[0]} out of range")
        if np.any(self.semantic[self.instance < 0] != -1):
            raise ValueError("background points must carry semantic -1")


@dataclasses.dataclass(frozen=True)
class VoxelScene:
    coords: np.ndarray  # C, (M, 3) mean of member points
    feats_in: np.ndarray  # (M, 6) normalized coords + mean color
    gt_offsets: np.ndarray  # O*, (M, 3)
    fg_mask: np.ndarray  # (M,) bool
    gt_instance: np.ndarray  # (M,) int, -1 background
    gt_semantic: np.ndarray  # (M,) int, -1 background
    voxel_size: float
    num_classes: int

    @property
    def num_voxels(self) -> int:
        return len(self.coords)

    def instance_ids(self) -> np.ndarray:
        return np.unique(self.gt_instance[self.fg_mask])


@dataclasses.dataclass(frozen=True)
class GroundTruthInstance:
    id: int
    semantic: int
    voxel_ids: np.ndarray
    center: np.ndarray


def _majority_foreground(labels: np.ndarray) -> int:
    fg = labels[labels >= 0]
    if fg.size == 0:
        return -1
    ids, counts = np.unique(fg, return_counts=True)
    # np.unique sorts ids, so argmax picks the lowest id among ties
    return int(ids[np.argmax(counts)])


def voxelize(scene: Scene, voxel_size: float) -> VoxelScene:
    """Aggregate points into voxels of edge ``voxel_size``.

    A voxel is foreground if any member point is; its label is the most
    frequent foreground instance (lowest id on ties). Voxels are ordered by
    integer grid key so the output is deterministic.
    """
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    if scene.num_points == 0:
        raise ValueError("empty input")
    pts = np.asarray(scene.coords, dtype=np.float64)
    keys = np.floor(pts / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = len(uniq)
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    coords = np.stack([np.bincount(inverse, pts[:, a], m) for a in range(3)], 1) / counts[:, None]
    colors = np.stack(
        [np.bincount(inverse, scene.colors[:, a], m) for a in range(3)], 1
    ) / counts[:, None]

    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(m + 1))
    inst = np.empty(m, dtype=np.int64)
    for v in range(m):
        inst[v] = _majority_foreground(scene.instance[order[bounds[v]:bounds[v + 1]]])

    sem = np.full(m, -1, dtype=np.int64)
    inst_sem = {}
    for i in np.unique(scene.instance[scene.instance >= 0]):
        inst_sem[int(i)] = int(scene.semantic[scene.instance == i][0])
    for v in np.flatnonzero(inst >= 0):
        sem[v] = inst_sem[int(inst[v])]

    fg = inst >= 0
    offsets = np.zeros((m, 3))
    for i in np.unique(inst[fg]):
        sel = inst == i
        offsets[sel] = coords[sel].mean(axis=0) - coords[sel]

    lo, hi = coords.min(axis=0), coords.max(axis=0)
    half = np.maximum((hi - lo) / 2.0, 1e-9)
    feats = np.concatenate([(coords - (lo + hi) / 2.0) / half, colors], axis=1)
    return VoxelScene(
        coords=coords,
        feats_in=feats,
        gt_offsets=offsets,
        fg_mask=fg,
        gt_instance=inst,
        gt_semantic=sem,
        voxel_size=float(voxel_size),
        num_classes=scene.num_classes,
    )


def gt_centers(vs: VoxelScene) -> list[GroundTruthInstance]:
    out = []
    for i in vs.instance_ids():
        ids = np.flatnonzero(vs.gt_instance == i)
        out.append(
            GroundTruthInstance(
                id=int(i),
                semantic=int(vs.gt_semantic[ids[0]]),
                voxel_ids=ids,
                center=vs.coords[ids].mean(axis=0),
            )
        )
    return out


def center_offsets(vs: VoxelScene, how: str = "average") -> np.ndarray:
    """Per-voxel offsets to the instance center under a given center definition.

    ``average`` reproduces ``vs.gt_offsets``; ``median`` and ``box`` use the
    per-axis median and the bounding-box midpoint of the instance voxels.
    """
    if how == "average":
        return vs.gt_offsets
    out = np.zeros_like(vs.gt_offsets)
    for i in vs.instance_ids():
        sel = vs.gt_instance == i
        pts = vs.coords[sel]
        if how == "median":
            c = np.median(pts, axis=0)
        elif how == "box":
            c = (pts.min(axis=0) + pts.max(axis=0)) / 2.0
        else:
            raise ValueError(f"unknown center definition {how!r}")
        out[sel] = c - pts
    return out


def save_scene(scene: Scene, path) -> None:
    lines = [SCENE_MAGIC, f"{scene.num_points} {scene.num_classes} {scene.num_instances}"]
    for p, c, i, s in zip(scene.coords, scene.colors, scene.instance, scene.semantic):
        lines.append(
            " ".join(repr(float(x)) for x in (*p, *c)) + f" {int(i)} {int(s)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_scene(path) -> Scene:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != SCENE_MAGIC:
        raise SceneFormatError(f"{path}: missing scene header {SCENE_MAGIC!r}")
    try:
        n, s, g = (int(x) for x in text[1].split())
    except (IndexError, ValueError) as exc:
        raise SceneFormatError(f"{path}: bad 'N S G' line") from exc
    rows = text[2:2 + n]
    if len(rows) != n:
        raise SceneFormatError(f"{path}: expected {n} point lines, got {len(rows)}")
    coords = np.empty((n, 3))
    colors = np.empty((n, 3))
    inst = np.empty(n, dtype=np.int64)
    sem = np.empty(n, dtype=np.int64)
    for r, line in enumerate(rows):
        parts = line.split()
        if len(parts) != 8:
            raise SceneFormatError(f"{path}:{r + 3}: expected 8 fields")
        coords[r] = [float(x) for x in parts[0:3]]
        colors[r] = [float(x) for x in parts[3:6]]
        inst[r] = int(parts[6])
        sem[r] = int(parts[7])
    scene = Scene(coords, colors, inst, sem, s)
    if scene.num_instances != g:
        raise SceneFormatError(f"{path}: header says {g} instances, found {scene.num_instances}")
    return scene
