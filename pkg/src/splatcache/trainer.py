"""Online fitting of the cache levels to noisy path-length samples."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .gsplat import PARAM_GROUPS, rasterize, rasterize_backward

DEFAULT_LRS = {
    "positions": 1.16e-3,
    "colors": 1.25e-2,
    "rotations": 1e-3,
    "log_scales": 0.0,
    "opacity_logits": 1.5e-1,
}
NO_DECAY = ("positions",)


@dataclass
class PathBufferSet:
    """Per-level training targets of one frame; at most one valid level per pixel."""

    samples: np.ndarray  # (L, H, W, 3)
    valid: np.ndarray  # (L, H, W) bool
    frame: int = 0

    @classmethod
    def empty(cls, n_levels: int, width: int, height: int, frame: int = 0) -> "PathBufferSet":
        return cls(np.zeros((n_levels, height, width, 3)), np.zeros((n_levels, height, width), dtype=bool), frame)

    @property
    def n_levels(self) -> int:
        return self.samples.shape[0]

    def valid_levels_per_pixel(self) -> np.ndarray:
        return self.valid.sum(axis=0)

    def check(self) -> None:
        if np.any(self.valid_levels_per_pixel() > 1):
            raise AssertionError("more than one valid level for a pixel")
        s = self.samples[self.valid]
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise AssertionError("training samples must be finite and non-negative")


# --------------------------------------------------------------------------
# loss


def hdr_loss(predicted, target, valid=None, detach_denominator: bool = False):
    """Relative squared error ``(x - y)^2 / (y + 0.01)^2`` averaged over valid pixels and channels.

    ``predicted`` is ``y``, ``target`` the noisy sample ``x``. Returns the loss
    and its gradient with respect to ``predicted``. The default gradient is the
    full quotient-rule derivative; ``detach_denominator`` treats ``y + 0.01``
    as a constant, whose fixed point is the plain mean of the targets.
    """
    y = np.asarray(predicted, dtype=np.float64)
    x = np.asarray(target, dtype=np.float64)
    if valid is None:
        mask = np.ones(y.shape[:-1], dtype=bool)
    else:
        mask = np.asarray(valid, dtype=bool)
    k = int(mask.sum()) * y.shape[-1]
    grad = np.zeros_like(y)
    if k == 0:
        return 0.0, grad
    m = mask[..., None]
    r = np.where(m, x - y, 0.0)
    den = y + 0.01
    loss = float(np.sum(r * r / (den * den)) / k)
    if detach_denominator:
        grad = -2.0 * r / (den * den) / k
    else:
        grad = (-2.0 * r * den - 2.0 * r * r) / (den * den * den) / k
    return loss, np.where(m, grad, 0.0)


# --------------------------------------------------------------------------
# schedule


def lr_schedule(eta0: float, t: float) -> float:
    if t < 1:
        raise ValueError("t must be >= 1")
    return eta0 / (1.0 + math.log(t))


@dataclass
class ScheduleState:
    """Residency-based decay shared by all parameter groups.

    ``t`` counts frames spent in the current viewport; a pose change larger
    than ``translation_tol * scene_diagonal`` or ``rotation_tol`` radians
    resets it to 1.
    """

    eta0: dict = dc_field(default_factory=lambda: dict(DEFAULT_LRS))
    t: int = 1
    scene_diagonal: float = 1.0
    translation_tol: float = 1e-4
    rotation_tol: float = 1e-3
    last_camera: Optional[object] = None

    def observe(self, camera) -> int:
        if self.last_camera is None:
            self.t = 1
        else:
            dt, da = self.last_camera.pose_delta(camera)
            if dt > self.translation_tol * self.scene_diagonal or da > self.rotation_tol:
                self.t = 1
            else:
                self.t += 1
        self.last_camera = camera
        return self.t

    def rates(self) -> dict:
        return {g: lr_schedule(self.eta0.get(g, 0.0), self.t) for g in PARAM_GROUPS}


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamMoments:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamMoments":
        return cls({g: np.zeros_like(p) for g, p in params.items()}, {g: np.zeros_like(p) for g, p in params.items()})


@dataclass
class OptimizerState:
    moments: list
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    no_decay: tuple = NO_DECAY
    skipped: int = 0

    @classmethod
    def for_hierarchy(cls, hierarchy, weight_decay: float = 1e-2, **kw) -> "OptimizerState":
        return cls([AdamMoments.zeros_like(l.params()) for l in hierarchy.levels], weight_decay=weight_decay, **kw)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr, level: int = 0) -> dict:
    """In-place decoupled-weight-decay Adam update of ``params``.

    ``lr`` is a float or a per-group dict. Entries with non-finite gradients
    keep their value and moments; each is counted in ``state.skipped``.
    """
    mom = state.moments[level]
    mom.step += 1
    t = mom.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for g, p in params.items():
        if g not in grads:
            continue
        eta = lr[g] if isinstance(lr, dict) else lr
        grad = np.asarray(grads[g], dtype=np.float64)
        ok = np.isfinite(grad)
        n_bad = int(grad.size - ok.sum())
        state.skipped += n_bad
        grad = np.where(ok, grad, 0.0)
        m, v = mom.m[g], mom.v[g]
        m_new = b1 * m + (1.0 - b1) * grad
        v_new = b2 * v + (1.0 - b2) * grad * grad
        np.copyto(m, m_new, where=ok)
        np.copyto(v, v_new, where=ok)
        if eta == 0.0:
            continue
        decay = 0.0 if g in state.no_decay else state.weight_decay
        upd = p * (1.0 - eta * decay) - eta * (m / c1) / (np.sqrt(v / c2) + state.eps)
        np.copyto(p, upd, where=ok)
    return params


# --------------------------------------------------------------------------
# training step


@dataclass
class TrainerConfig:
    enabled: bool = True
    cadence: int = 1
    detach_denominator: bool = True


@dataclass
class TrainStats:
    losses: list
    ot_ms: float
    trained: bool


def train_step(hierarchy, buffers: PathBufferSet, camera, schedule: ScheduleState, opt: OptimizerState, config: Optional[TrainerConfig] = None, frame: Optional[int] = None) -> TrainStats:
    """Fit every level to its buffer for one frame."""
    config = config or TrainerConfig()
    if frame is not None and buffers.frame != frame:
        raise RuntimeError(f"path buffers are tagged for frame {buffers.frame}, expected {frame}")
    if not config.enabled or (frame is not None and frame % max(config.cadence, 1) != 0):
        return TrainStats([0.0] * len(hierarchy.levels), 0.0, False)
    start = time.perf_counter()
    schedule.observe(camera)
    rates = schedule.rates()
    losses = []
    n = min(len(hierarchy.levels), buffers.n_levels)
    for lvl in range(n):
        level = hierarchy.levels[lvl]
        valid = buffers.valid[lvl]
        if level.count == 0 or not valid.any():
            losses.append(0.0)
            continue
        img = rasterize(level, camera)
        loss, grad = hdr_loss(img.rgb, buffers.samples[lvl], valid, config.detach_denominator)
        g = rasterize_backward(level, camera, grad, img.state)
        adamw_step(level.params(), g.as_dict(), opt, rates, lvl)
        losses.append(loss)
    return TrainStats(losses, (time.perf_counter() - start) * 1e3, True)
