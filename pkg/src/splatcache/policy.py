"""Cache-use decisions along a path.

Early termination is a lottery driven by the luminance of the running
boosted throughput. Surviving paths are boosted by ``1 / Tr`` and the
cascade product ``beta`` records every survival probability; cached reads
are divided by the ``beta`` in effect before the terminating vertex.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numba as nb
import numpy as np

from .rng import next_float

LUMA = np.array([0.2126, 0.7152, 0.0722])

STORE_RAW = "store_raw"
STORE_BOOSTED = "store_boosted"
CONVENTIONS = (STORE_RAW, STORE_BOOSTED)

# Chosen by the toy-medium oracle (see splatcache.toymedium.select_convention).
DEFAULT_CONVENTION = STORE_RAW


def luminance(rgb) -> float:
    rgb = np.asarray(rgb, dtype=np.float64)
    return float(0.2126 * rgb[..., 0] + 0.7152 * rgb[..., 1] + 0.0722 * rgb[..., 2])


@nb.njit(cache=True, inline="always")
def luma(r, g, b):
    return 0.2126 * r + 0.7152 * g + 0.0722 * b


@dataclass
class PolicyConfig:
    C: float = 0.5
    activation_threshold: float = 0.9
    epsilon: float = 1e-5
    max_cache_length: int = 3
    beta_convention: str = DEFAULT_CONVENTION
    beta_division: bool = True
    natural_substitution: bool = True

    def __post_init__(self):
        if self.C < 0:
            raise ValueError("C must be non-negative")
        if not 0.0 < self.activation_threshold <= 1.0:
            raise ValueError("activation_threshold must lie in (0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.beta_convention not in CONVENTIONS:
            raise ValueError(f"beta_convention must be one of {CONVENTIONS}")
        if self.max_cache_length < 1:
            raise ValueError("max_cache_length must be >= 1")

    def pack(self) -> np.ndarray:
        return np.array(
            [
                1.0,
                self.C,
                self.activation_threshold,
                self.epsilon,
                1.0 if self.beta_convention == STORE_BOOSTED else 0.0,
                1.0 if self.beta_division else 0.0,
                1.0 if self.natural_substitution else 0.0,
            ]
        )


def pack_policy(policy: Optional[PolicyConfig]) -> np.ndarray:
    return np.zeros(7) if policy is None else policy.pack()


@dataclass
class PathState:
    depth: int = 0
    throughput_raw: np.ndarray = dc_field(default_factory=lambda: np.ones(3))
    throughput_boosted: np.ndarray = dc_field(default_factory=lambda: np.ones(3))
    beta: float = 1.0
    pixel: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.throughput_raw = np.asarray(self.throughput_raw, dtype=np.float64).copy()
        self.throughput_boosted = np.asarray(self.throughput_boosted, dtype=np.float64).copy()

    def scatter(self, albedo) -> "PathState":
        """Advance to the next real collision with vertex albedo ``albedo``."""
        a = np.asarray(albedo, dtype=np.float64)
        return PathState(self.depth + 1, self.throughput_raw * a, self.throughput_boosted * a, self.beta, self.pixel)


@dataclass
class TerminationDecision:
    terminate: bool
    throughput_boosted: np.ndarray
    beta: float
    q: float
    p: float


@nb.njit(cache=True)
def survival_probability(wr, wg, wb, C):
    tr = C * luma(wr, wg, wb)
    return min(max(tr, 0.0), 1.0)


def termination_step(state: PathState, config: PolicyConfig, rng=None, q: Optional[float] = None) -> TerminationDecision:
    """One lottery at the current vertex.

    ``q`` may be given explicitly; otherwise it is drawn from ``rng`` only when
    the heuristic is active.
    """
    w = state.throughput_boosted
    tr = float(survival_probability(w[0], w[1], w[2], config.C))
    if tr >= config.activation_threshold:
        return TerminationDecision(False, w.copy(), state.beta, float("nan"), 0.0)
    if q is None:
        st = rng.state if hasattr(rng, "state") else rng
        q = float(next_float(st))
    p = 1.0 - tr
    if q < p:
        return TerminationDecision(True, w.copy(), state.beta, q, p)
    return TerminationDecision(False, w / (tr + config.epsilon), state.beta * tr, q, p)


def apply_decision(state: PathState, decision: TerminationDecision) -> PathState:
    return PathState(state.depth, state.throughput_raw, decision.throughput_boosted, decision.beta, state.pixel)


def level_index(terminal_depth: int, n_levels: int) -> int:
    """Level for a path of ``terminal_depth`` interactions; deeper paths clamp to the last level."""
    if terminal_depth < 1:
        raise ValueError("terminal_depth must be >= 1")
    return min(terminal_depth, n_levels) - 1


def _check_frame(level_images, frame):
    if frame is not None and getattr(level_images, "frame", frame) != frame:
        raise RuntimeError(f"level images are tagged for frame {level_images.frame}, expected frame {frame}")


def cache_read(level_images, pixel, terminal_depth: int, beta_prev: float, frame: Optional[int] = None) -> np.ndarray:
    """Cached radiance of the level matching ``terminal_depth`` divided by ``beta_prev``.

    Raises if ``frame`` is given and the images carry a different frame tag.
    """
    _check_frame(level_images, frame)
    if not 0.0 < beta_prev <= 1.0:
        raise ValueError("beta_prev must lie in (0, 1]")
    imgs = level_images.images
    px, py = pixel
    lvl = level_index(terminal_depth, imgs.shape[0])
    return imgs[lvl, py, px].astype(np.float64) / beta_prev


def natural_termination_substitute(gathered_radiance, level_images, pixel, depth: int, beta_prev: float, frame: Optional[int] = None) -> np.ndarray:
    """Keep a path's radiance when it carries energy, else fall back to the cache."""
    g = np.asarray(gathered_radiance, dtype=np.float64)
    if luminance(g) > 0.0:
        return g.copy()
    return cache_read(level_images, pixel, depth, beta_prev, frame)
