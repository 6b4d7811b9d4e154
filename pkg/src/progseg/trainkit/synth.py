"""Synthetic tabletop-style scenes: labelled shapes resting on a sparse floor."""
from __future__ import annotations

import dataclasses

import numpy as np

from ..geometry import Scene

SHAPES = ("box", "ball", "ellipsoid")
# base color per semantic class
PALETTE = np.array([[0.85, 0.25, 0.2], [0.2, 0.6, 0.85], [0.3, 0.8, 0.3], [0.8, 0.7, 0.2]])


class PackingError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    num_instances: tuple[int, int] = (3, 6)
    points_per_instance: tuple[int, int] = (400, 800)
    radius: tuple[float, float] = (0.25, 0.45)
    shapes: tuple[str, ...] = SHAPES
    min_separation: float = 0.3
    clutter_fraction: float = 0.1
    noise: float = 0.005
    extent: float = 4.0
    color_jitter: float = 0.08
    adjacent: bool = False
    adjacent_gap: float = 0.03
    max_retries: int = 200
    seed: int = 0

    def validate(self):
        lo, hi = self.num_instances
        if not 0 <= lo <= hi:
            raise ValueError("num_instances range is empty")
        if not 1 <= self.points_per_instance[0] <= self.points_per_instance[1]:
            raise ValueError("points_per_instance range is empty")
        if not 0 < self.radius[0] <= self.radius[1]:
            raise ValueError("radius range is empty")
        if self.min_separation <= 0:
            raise ValueError("min_separation must be positive")
        if not 0 <= self.clutter_fraction < 1:
            raise ValueError("clutter_fraction must be in [0, 1)")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ValueError(f"shapes must be drawn from {SHAPES}")


def _unit_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _surface(shape, radius, n, rng):
    """Points on the surface of a shape inscribed in a sphere of ``radius``."""
    if shape == "ball":
        return radius * _unit_sphere(rng, n)
    if shape == "ellipsoid":
        axes = radius * np.array([1.0, rng.uniform(0.5, 0.8), rng.uniform(0.4, 0.7)])
        return _unit_sphere(rng, n) * axes
    half = radius / np.sqrt(3.0) * rng.uniform(0.8, 1.2, size=3)
    half *= radius / np.linalg.norm(half)
    face = rng.integers(0, 6, size=n)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
    pts[np.arange(n), axis] = sign
    return pts * half


def _place(cfg: SynthConfig, radii, rng):
    centers = []
    for r in radii:
        for _ in range(cfg.max_retries):
            if cfg.adjacent and centers:
                j = rng.integers(len(centers))
                theta = rng.uniform(0, 2 * np.pi)
                d = radii[j] + r + cfg.adjacent_gap
                d = max(d, cfg.min_separation)
                xy = centers[j][:2] + d * np.array([np.cos(theta), np.sin(theta)])
            else:
                xy = rng.uniform(r, cfg.extent - r, size=2)
            c = np.array([xy[0], xy[1], r])
            if not (r <= xy[0] <= cfg.extent - r and r <= xy[1] <= cfg.extent - r):
                continue
            ok = all(
                np.linalg.norm(c - o) >= max(cfg.min_separation, r + ro + (cfg.adjacent_gap if cfg.adjacent else 0.02))
                for o, ro in zip(centers, radii)
            )
            if ok:
                centers.append(c)
                break
        else:
            raise PackingError("could not place instances; lower num_instances or radius")
    return np.array(centers).reshape(-1, 3)


def generate_scene(cfg: SynthConfig, seed: int | None = None) -> Scene:
    """Deterministic scene for ``seed`` (defaults to ``cfg.seed``).

    Semantic class = index of the shape in ``SHAPES``; colors come from a
    per-class palette with per-instance jitter.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    g = int(rng.integers(cfg.num_instances[0], cfg.num_instances[1] + 1))
    radii = rng.uniform(cfg.radius[0], cfg.radius[1], size=g)
    centers = _place(cfg, list(radii), rng)
    coords, colors, inst, sem = [], [], [], []
    for i in range(g):
        shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        cls = SHAPES.index(shape)
        n = int(rng.integers(cfg.points_per_instance[0], cfg.points_per_instance[1] + 1))
        pts = _surface(shape, radii[i], n, rng) + centers[i]
        base = np.clip(PALETTE[cls] + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1)
        coords.append(pts)
        colors.append(np.clip(base + rng.normal(0, 0.02, (n, 3)), 0, 1))
        inst.append(np.full(n, i))
        sem.append(np.full(n, cls))
    n_fg = sum(len(c) for c in coords)
    n_bg = int(round(cfg.clutter_fraction * n_fg / (1 - cfg.clutter_fraction))) if g else 200
    if n_bg:
        n_floor = int(0.7 * n_bg)
        floor = np.column_stack([rng.uniform(0, cfg.extent, (n_floor, 2)), np.zeros(n_floor)])
        junk = rng.uniform([0, 0, 0], [cfg.extent, cfg.extent, 1.0], size=(n_bg - n_floor, 3))
        bg = np.vstack([floor, junk])
        coords.append(bg)
        colors.append(np.clip(0.5 + rng.normal(0, 0.05, (n_bg, 3)), 0, 1))
        inst.append(np.full(n_bg, -1))
        sem.append(np.full(n_bg, -1))
    xyz = np.vstack(coords)
    xyz = xyz + rng.normal(0, cfg.noise, xyz.shape)
    return Scene(
        coords=xyz,
        colors=np.vstack(colors),
        instance=np.concatenate(inst).astype(np.int64),
        semantic=np.concatenate(sem).astype(np.int64),
        num_classes=len(SHAPES),
    )
