"""Volumetric path tracing with uniform phase sampling or NEE + MIS.

Radiance is grouped by path length: the length-``n`` term of a path is the
light gathered at vertex ``n`` (light sample plus the MIS-weighted emitter or
background seen after scattering there). When a path wins the termination
lottery at vertex ``n`` the length-``n`` term is read from cache level
``n - 1`` instead, and the survivors' boosted weights account for every longer
length. This keeps the estimator unbiased for an exact cache.

Training records take the length-``l+1`` term of sample 0 for one level ``l``
drawn per pixel and frame, never anything read from the cache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import NamedTuple, Optional

import numba as nb
import numpy as np

from .policy import PolicyConfig, STORE_BOOSTED, luma, pack_policy
from .rng import SALT_PATH, SALT_RECORD, next_float, seed_state
from .scene import INV_4PI, Scene, camera_ray, cone_sample, light_mixture_pdf, nearest_light
from .trainer import PathBufferSet
from .volume import track, visibility

NATURAL = 0
EARLY_CACHE_HIT = 1
EXHAUSTED = 2
KIND_NAMES = ("natural", "early_cache_hit", "cache_miss_continue_exhausted")


class RadianceSample(NamedTuple):
    rgb: np.ndarray
    terminal_depth: int
    termination_kind: str


class TrainingRecord(NamedTuple):
    pixel: tuple
    depth: int
    value: np.ndarray

    @property
    def level(self) -> int:
        return self.depth - 1


@dataclass
class FrameBuffer:
    accumulation: np.ndarray
    sample_count: np.ndarray
    stats: dict = dc_field(default_factory=dict)

    @classmethod
    def empty(cls, width: int, height: int) -> "FrameBuffer":
        return cls(np.zeros((height, width, 3)), np.zeros((height, width), dtype=np.int64))

    def mean(self) -> np.ndarray:
        n = np.maximum(self.sample_count, 1)[..., None]
        return self.accumulation / n

    def merge(self, other: "FrameBuffer") -> "FrameBuffer":
        return FrameBuffer(self.accumulation + other.accumulation, self.sample_count + other.sample_count, dict(other.stats))


# --------------------------------------------------------------------------
# kernels


@nb.njit(cache=True)
def _uniform_sphere(state):
    z = 1.0 - 2.0 * next_float(state)
    r = math.sqrt(max(0.0, 1.0 - z * z))
    phi = 2.0 * math.pi * next_float(state)
    return r * math.cos(phi), r * math.sin(phi), z


@nb.njit(cache=True)
def _light_sample_unit(med, lights, x, y, z, state):
    """Light-strategy part of the direct light at a vertex per unit throughput."""
    nl = lights.shape[0]
    if nl == 0:
        return 0.0, 0.0, 0.0
    j = min(int(next_float(state) * nl), nl - 1)
    u1 = next_float(state)
    u2 = next_float(state)
    dx, dy, dz, dist, pdf = cone_sample(lights, j, x, y, z, u1, u2)
    pl = light_mixture_pdf(lights, x, y, z, dx, dy, dz)
    if pl <= 0.0:
        return 0.0, 0.0, 0.0
    v = visibility(med, x, y, z, x + dist * dx, y + dist * dy, z + dist * dz, state)
    if v == 0.0:
        return 0.0, 0.0, 0.0
    w = INV_4PI / (pl + INV_4PI)
    return lights[j, 4] * w, lights[j, 5] * w, lights[j, 6] * w


@nb.njit(cache=True)
def _exit_radiance(lights, bg, ox, oy, oz, dx, dy, dz, jl, mis):
    """Emitter or background radiance seen by an escaping segment."""
    if jl >= 0:
        w = 1.0
        if mis:
            pl = light_mixture_pdf(lights, ox, oy, oz, dx, dy, dz)
            w = INV_4PI / (INV_4PI + pl)
        return lights[jl, 4] * w, lights[jl, 5] * w, lights[jl, 6] * w
    return bg[0], bg[1], bg[2]


@nb.njit(cache=True)
def _probe_length_term(med, lights, bg, x, y, z, nee, state):
    """Length term at a vertex whose path was cut: light sample plus one escape."""
    dr = dg = db = 0.0
    if nee:
        dr, dg, db = _light_sample_unit(med, lights, x, y, z, state)
    dx, dy, dz = _uniform_sphere(state)
    tl, jl = nearest_light(lights, x, y, z, dx, dy, dz)
    hit, t, ar, ag, ab = track(med, x, y, z, dx, dy, dz, tl, state)
    if not hit:
        er, eg, eb = _exit_radiance(lights, bg, x, y, z, dx, dy, dz, jl, nee)
        dr += er
        dg += eg
        db += eb
    return dr, dg, db


@nb.njit(cache=True)
def trace_path(med, lights, bg, cam, dmax, px, py, state, nee, pol, imgs, rec_level):
    """One camera path.

    Returns ``(r, g, b, depth, kind, rec_ok, rec_r, rec_g, rec_b)``.
    """
    use_policy = pol[0] > 0.0
    C = pol[1]
    thresh = pol[2]
    eps = pol[3]
    boosted_rec = pol[4] > 0.0
    beta_div = pol[5] > 0.0
    nat_sub = pol[6] > 0.0
    n_levels = imgs.shape[0]

    jx = next_float(state)
    jy = next_float(state)
    dx, dy, dz = camera_ray(cam, px + jx, py + jy)
    ox, oy, oz = cam[0], cam[1], cam[2]

    lr = lg = lb = 0.0
    pr = pg = pb = 1.0  # raw throughput, product of albedos
    wr = wg = wb = 1.0  # boosted throughput
    sr = sg = sb = 1.0  # weight of the current segment's escape term
    beta = 1.0
    beta_prev = 1.0
    n = 0
    kind = NATURAL
    rec_ok = False
    rec_pending = False
    rcr = rcg = rcb = 0.0  # record weight
    rdr = rdg = rdb = 0.0  # record light term per unit weight
    while True:
        tl, jl = nearest_light(lights, ox, oy, oz, dx, dy, dz)
        hit, t, ar, ag, ab = track(med, ox, oy, oz, dx, dy, dz, tl, state)
        if not hit:
            er, eg, eb = _exit_radiance(lights, bg, ox, oy, oz, dx, dy, dz, jl, nee and n > 0)
            lr += sr * er
            lg += sg * eg
            lb += sb * eb
            if rec_pending:
                rdr += er
                rdg += eg
                rdb += eb
            if use_policy and nat_sub and n > 0 and luma(lr, lg, lb) <= 0.0:
                lvl = min(n, n_levels) - 1
                div = beta_prev if beta_div else 1.0
                lr += imgs[lvl, py, px, 0] / div
                lg += imgs[lvl, py, px, 1] / div
                lb += imgs[lvl, py, px, 2] / div
            break
        n += 1
        if rec_pending:
            rec_pending = False
            rec_ok = True
        if n > dmax:
            n = dmax
            kind = EXHAUSTED
            break
        x = ox + t * dx
        y = oy + t * dy
        z = oz + t * dz
        pr *= ar
        pg *= ag
        pb *= ab
        wr *= ar
        wg *= ag
        wb *= ab
        vr, vg, vb = wr, wg, wb  # weight of the length-n term
        beta_prev = beta
        record_here = rec_level == n - 1
        if record_here:
            if boosted_rec:
                rcr, rcg, rcb = vr, vg, vb
            else:
                rcr, rcg, rcb = pr, pg, pb
        if use_policy:
            tr = min(max(C * luma(wr, wg, wb), 0.0), 1.0)
            if tr < thresh:
                q = next_float(state)
                if q < 1.0 - tr:
                    lvl = min(n, n_levels) - 1
                    div = beta_prev if beta_div else 1.0
                    lr += imgs[lvl, py, px, 0] / div
                    lg += imgs[lvl, py, px, 1] / div
                    lb += imgs[lvl, py, px, 2] / div
                    kind = EARLY_CACHE_HIT
                    if record_here:
                        rdr, rdg, rdb = _probe_length_term(med, lights, bg, x, y, z, nee, state)
                        rec_ok = True
                    break
                inv = 1.0 / (tr + eps)
                wr *= inv
                wg *= inv
                wb *= inv
                beta *= tr
        if nee:
            er, eg, eb = _light_sample_unit(med, lights, x, y, z, state)
            lr += vr * er
            lg += vg * eg
            lb += vb * eb
            if record_here:
                rdr, rdg, rdb = er, eg, eb
        elif record_here:
            rdr = rdg = rdb = 0.0
        if record_here:
            rec_pending = True
        sr, sg, sb = vr, vg, vb
        ox, oy, oz = x, y, z
        dx, dy, dz = _uniform_sphere(state)
    if rec_pending:
        rec_ok = True
    return lr, lg, lb, n, kind, rec_ok, rcr * rdr, rcg * rdg, rcb * rdb


@nb.njit(cache=True)
def render_kernel(med, lights, bg, cam, dmax, nee, pol, imgs, seed, frame, spp, sample_offset, n_rec_levels, accum, counts, rec_vals, rec_valid, stats):
    h = accum.shape[0]
    w = accum.shape[1]
    state = np.zeros(2, dtype=np.uint64)
    rstate = np.zeros(2, dtype=np.uint64)
    for py in range(h):
        for px in range(w):
            pix = py * w + px
            for s in range(spp):
                gs = sample_offset + s
                rec_level = -1
                if gs == 0 and n_rec_levels > 0:
                    seed_state(rstate, seed, frame, pix, 0, SALT_RECORD)
                    rec_level = min(int(next_float(rstate) * n_rec_levels), n_rec_levels - 1)
                seed_state(state, seed, frame, pix, gs, SALT_PATH)
                r, g, b, depth, kind, rec_ok, qr, qg, qb = trace_path(med, lights, bg, cam, dmax, px, py, state, nee, pol, imgs, rec_level)
                if not (np.isfinite(r) and np.isfinite(g) and np.isfinite(b)) or r < 0.0 or g < 0.0 or b < 0.0:
                    stats[5] += 1.0
                    continue
                accum[py, px, 0] += r
                accum[py, px, 1] += g
                accum[py, px, 2] += b
                counts[py, px] += 1
                stats[0] += depth
                stats[1] += 1.0
                stats[2 + kind] += 1.0
                if rec_ok and np.isfinite(qr) and np.isfinite(qg) and np.isfinite(qb):
                    rec_vals[rec_level, py, px, 0] = qr
                    rec_vals[rec_level, py, px, 1] = qg
                    rec_vals[rec_level, py, px, 2] = qb
                    rec_valid[rec_level, py, px] = True


# --------------------------------------------------------------------------
# Python-facing operations

_NO_CACHE = np.zeros((1, 1, 1, 3))


def _images_or_dummy(level_images):
    if level_images is None:
        return _NO_CACHE
    imgs = level_images.images if hasattr(level_images, "images") else level_images
    return np.ascontiguousarray(imgs, dtype=np.float64)


def _single(scene: Scene, pixel, rng, nee: bool, policy, level_images, record_level):
    if policy is not None and level_images is None:
        raise ValueError("a policy needs level images for the current frame")
    med, lights, bg, cam = scene.pack()
    state = rng.state if hasattr(rng, "state") else rng
    px, py = pixel
    rec_level = -1 if record_level is None else int(record_level)
    r, g, b, depth, kind, rec_ok, qr, qg, qb = trace_path(
        med, lights, bg, cam, scene.max_depth, px, py, state, nee, pack_policy(policy), _images_or_dummy(level_images), rec_level
    )
    sample = RadianceSample(np.array([r, g, b]), int(depth), KIND_NAMES[kind])
    rec = TrainingRecord((px, py), rec_level + 1, np.array([qr, qg, qb])) if rec_ok else None
    return sample, rec


def trace_uniform(scene: Scene, pixel, rng) -> RadianceSample:
    """Uniform phase sampling; emitters count only when hit directly."""
    return _single(scene, pixel, rng, False, None, None, None)[0]


def trace_nee(scene: Scene, pixel, rng, policy: Optional[PolicyConfig] = None, level_images=None, record_level: Optional[int] = None):
    """Light sampling + MIS at every vertex, optionally consulting the cache.

    ``record_level`` selects which level's length term to report as a
    training record (``None`` for no record).
    """
    return _single(scene, pixel, rng, True, policy, level_images, record_level)


def render_frame(
    scene: Scene,
    spp: int,
    policy: Optional[PolicyConfig] = None,
    level_images=None,
    frame: int = 0,
    seed: int = 0,
    mode: str = "nee",
    sample_offset: int = 0,
    n_record_levels: Optional[int] = None,
):
    """Render ``spp`` samples per pixel; returns ``(FrameBuffer, PathBufferSet)``.

    Records are taken from global sample index 0 only, one level per pixel.
    ``n_record_levels`` defaults to the number of cache levels when a policy
    or level images are supplied, else no records are made.
    """
    if spp < 1:
        raise ValueError("spp must be >= 1")
    if mode not in ("nee", "uniform"):
        raise ValueError(f"unknown mode {mode!r}")
    if policy is not None and level_images is None:
        raise ValueError("a policy needs level images for the current frame")
    if level_images is not None and hasattr(level_images, "frame") and level_images.frame != frame:
        raise RuntimeError(f"level images are tagged for frame {level_images.frame}, rendering frame {frame}")
    imgs = _images_or_dummy(level_images)
    w, h = scene.camera.resolution
    if level_images is not None and imgs.shape[1:3] != (h, w):
        raise ValueError("level images do not match the render resolution")
    if n_record_levels is None:
        n_record_levels = imgs.shape[0] if level_images is not None else 0
    med, lights, bg, cam = scene.pack()
    fb = FrameBuffer.empty(w, h)
    nb_levels = max(n_record_levels, 1)
    rec_vals = np.zeros((nb_levels, h, w, 3))
    rec_valid = np.zeros((nb_levels, h, w), dtype=np.bool_)
    stats = np.zeros(6)
    render_kernel(
        med, lights, bg, cam, scene.max_depth, mode == "nee", pack_policy(policy), imgs,
        seed, frame, spp, sample_offset, n_record_levels,
        fb.accumulation, fb.sample_count, rec_vals, rec_valid, stats,
    )
    if stats[5] > 0:
        raise FloatingPointError(f"{int(stats[5])} non-finite or negative radiance samples in frame {frame}")
    fb.stats = {
        "mean_terminal_depth": stats[0] / max(stats[1], 1.0),
        "paths": int(stats[1]),
        "natural": int(stats[2]),
        "early_cache_hit": int(stats[3]),
        "exhausted": int(stats[4]),
    }
    buffers = PathBufferSet(rec_vals[:n_record_levels], rec_valid[:n_record_levels], frame)
    return fb, buffers
