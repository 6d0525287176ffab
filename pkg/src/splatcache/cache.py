"""Multi-level splat cache: initialization, sub-sampling and per-frame images."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numba as nb
import numpy as np
from scipy.spatial import cKDTree

from .gsplat import FLOATS_PER_SPLAT, GaussianLevel, dump_level, load_level, rasterize
from .rng import SALT_INIT, next_float, seed_state
from .volume import TransferFunction, VolumeField, pack_medium, track

INIT_OPACITY = 0.1


@dataclass
class CacheConfig:
    N: int = 20000
    K: int = 2
    init_scale_factor: float = 0.5
    z_cap: float = 2.0
    seed: int = 0
    max_attempts: int = 1_000_000
    min_acceptance: float = 1e-4

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.N < self.K + 1:
            raise ValueError("N must be at least K + 1")

    def level_sizes(self) -> list:
        return level_sizes(self.N, self.K)


def level_sizes(N: int, K: int) -> list:
    return [N // (2**i) for i in range(K + 1)]


def parameter_bytes(N: int, K: int, bytes_per_float: int = 4) -> int:
    """Parameter footprint of all levels."""
    return sum(level_sizes(N, K)) * FLOATS_PER_SPLAT * bytes_per_float


@dataclass
class CacheHierarchy:
    levels: list
    seed: int = 0
    init_ms: float = 0.0
    scene_diagonal: float = 1.0
    meta: dict = dc_field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.levels) - 1

    def sizes(self) -> list:
        return [l.count for l in self.levels]

    def nbytes(self, bytes_per_float: int = 4) -> int:
        return sum(l.nbytes(bytes_per_float) for l in self.levels)

    def copy(self) -> "CacheHierarchy":
        return CacheHierarchy([l.copy() for l in self.levels], self.seed, self.init_ms, self.scene_diagonal, dict(self.meta))


@dataclass
class LevelImageSet:
    images: np.ndarray  # (K+1, H, W, 3)
    transmittance: np.ndarray  # (K+1, H, W)
    frame: int = 0
    splat_ms: list = dc_field(default_factory=list)

    @property
    def n_levels(self) -> int:
        return self.images.shape[0]


# --------------------------------------------------------------------------
# initialization


@nb.njit(cache=True)
def _sample_points(med, center, radius, n, seed, max_attempts, min_rate):
    pos = np.zeros((n, 3))
    alb = np.zeros((n, 3))
    st = np.zeros(2, dtype=np.uint64)
    seed_state(st, seed, 0, 0, 0, SALT_INIT)
    accepted = 0
    attempts = 0
    while accepted < n:
        if attempts >= max_attempts and accepted < min_rate * attempts:
            return pos[:accepted], alb[:accepted], attempts, False
        attempts += 1
        pts = np.empty((2, 3))
        for k in range(2):
            z = 1.0 - 2.0 * next_float(st)
            r = math.sqrt(max(0.0, 1.0 - z * z))
            phi = 2.0 * math.pi * next_float(st)
            pts[k, 0] = center[0] + radius * r * math.cos(phi)
            pts[k, 1] = center[1] + radius * r * math.sin(phi)
            pts[k, 2] = center[2] + radius * z
        dx = pts[1, 0] - pts[0, 0]
        dy = pts[1, 1] - pts[0, 1]
        dz = pts[1, 2] - pts[0, 2]
        L = math.sqrt(dx * dx + dy * dy + dz * dz)
        if L <= 0.0:
            continue
        dx /= L
        dy /= L
        dz /= L
        hit, t, r, g, b = track(med, pts[0, 0], pts[0, 1], pts[0, 2], dx, dy, dz, L, st)
        if hit:
            pos[accepted, 0] = pts[0, 0] + t * dx
            pos[accepted, 1] = pts[0, 1] + t * dy
            pos[accepted, 2] = pts[0, 2] + t * dz
            alb[accepted, 0] = r
            alb[accepted, 1] = g
            alb[accepted, 2] = b
            accepted += 1
    return pos, alb, attempts, True


def sample_volume_points(field: VolumeField, tf: TransferFunction, n: int, seed: int = 0, max_attempts: int = 1_000_000, min_acceptance: float = 1e-4):
    """First collisions of random chords of the bounding sphere: ``(positions, albedos, attempts)``."""
    if tf.max_extinction <= 0:
        raise ValueError("transfer function has no extinction; nothing to sample")
    med = pack_medium(field, tf)
    radius = 0.5 * field.diagonal
    pos, alb, attempts, ok = _sample_points(med, field.center, radius, int(n), int(seed), int(max_attempts), float(min_acceptance))
    if not ok:
        raise RuntimeError(
            f"volume sampling accepted {pos.shape[0]} of {attempts} rays (rate below {min_acceptance}); "
            "the transfer function is effectively empty"
        )
    return pos, alb, attempts


def scale_rule(positions, scene_diagonal: Optional[float] = None, factor: float = 0.5, z_cap: float = 2.0, floor_fraction: float = 1e-6) -> np.ndarray:
    """Isotropic splat scale from the mean distance to the 3 nearest neighbours.

    Distances above ``mean + z_cap * std`` are capped there before scaling by
    ``factor``; results are floored at ``floor_fraction * scene_diagonal``.
    """
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if p.shape[0] < 4:
        raise ValueError("scale_rule needs at least 4 points")
    if scene_diagonal is None:
        scene_diagonal = float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))
    dist, _ = cKDTree(p).query(p, k=4)
    raw = dist[:, 1:].mean(axis=1)
    cap = raw.mean() + z_cap * raw.std()
    s = np.minimum(cap, raw) * factor
    return np.maximum(s, floor_fraction * scene_diagonal)


def make_level(positions, albedos, scene_diagonal: float, config: CacheConfig) -> GaussianLevel:
    n = positions.shape[0]
    if n == 0:
        return GaussianLevel.empty()
    if n >= 4:
        s = scale_rule(positions, scene_diagonal, config.init_scale_factor, config.z_cap)
    else:
        s = np.full(n, 0.05 * scene_diagonal)
    return GaussianLevel.isotropic(positions, s, albedos, INIT_OPACITY)


def initialize_cache(field: VolumeField, tf: TransferFunction, config: CacheConfig, rng=None) -> CacheHierarchy:
    """Seed all levels from ``N`` volume samples.

    ``rng`` is an integer seed (defaults to ``config.seed``). Level ``i`` takes
    every ``2^i``-th point of one fixed random permutation.
    """
    seed = config.seed if rng is None else int(rng)
    start = time.perf_counter()
    pos, alb, attempts = sample_volume_points(field, tf, config.N, seed, config.max_attempts, config.min_acceptance)
    perm = np.random.default_rng(seed).permutation(config.N)
    diag = field.diagonal
    levels = []
    for i, size in enumerate(config.level_sizes()):
        idx = np.arange(config.N) if i == 0 else perm[:: 2**i][:size]
        levels.append(make_level(pos[idx], alb[idx], diag, config))
    ms = (time.perf_counter() - start) * 1e3
    return CacheHierarchy(levels, seed, ms, diag, {"attempts": int(attempts), "N": config.N, "K": config.K})


# --------------------------------------------------------------------------
# per-frame images


def splat_all_levels(hierarchy: CacheHierarchy, camera, resolution=None, frame: int = 0) -> LevelImageSet:
    if resolution is not None:
        camera = camera.with_resolution(resolution)
    w, h = camera.resolution
    imgs = np.zeros((len(hierarchy.levels), h, w, 3))
    trans = np.ones((len(hierarchy.levels), h, w))
    times = []
    for i, level in enumerate(hierarchy.levels):
        t0 = time.perf_counter()
        out = rasterize(level, camera)
        times.append((time.perf_counter() - t0) * 1e3)
        imgs[i] = out.rgb
        trans[i] = out.transmittance
    return LevelImageSet(imgs, trans, frame, times)


# --------------------------------------------------------------------------
# snapshots


def save_hierarchy(hierarchy: CacheHierarchy, directory, bytes_per_float: int = 8) -> None:
    os.makedirs(directory, exist_ok=True)
    files = []
    for i, level in enumerate(hierarchy.levels):
        name = f"level_{i}.bin"
        with open(os.path.join(directory, name), "wb") as f:
            f.write(dump_level(level, bytes_per_float))
        files.append(name)
    manifest = {
        "levels": files,
        "sizes": hierarchy.sizes(),
        "seed": hierarchy.seed,
        "init_ms": hierarchy.init_ms,
        "scene_diagonal": hierarchy.scene_diagonal,
        "meta": hierarchy.meta,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def load_hierarchy(directory) -> CacheHierarchy:
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    levels = []
    for name in manifest["levels"]:
        with open(os.path.join(directory, name), "rb") as f:
            levels.append(load_level(f.read()))
    return CacheHierarchy(levels, manifest["seed"], manifest["init_ms"], manifest["scene_diagonal"], manifest.get("meta", {}))
