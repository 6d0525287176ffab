"""Scalar volumes, transfer functions and free-flight sampling.

The grid stores one scalar per lattice point. World position of lattice point
``(i, j, k)`` is ``origin + (i, j, k) * spacing``; the medium between lattice
points is the trilinear interpolant, so the volume bounds are
``[origin, origin + (dims - 1) * spacing]``.

Kernels take a packed tuple (see :func:`pack_medium`) so that compiled code
never touches Python objects.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field as dc_field
from typing import NamedTuple, Optional, Sequence

import numba as nb
import numpy as np

from .rng import next_float

SCALAR_TYPES = {"uint8": np.dtype("<u1"), "uint16": np.dtype("<u2"), "float32": np.dtype("<f4")}


class VolumeSizeError(ValueError):
    """Raw file size does not match the declared dims and scalar type."""

    def __init__(self, path, expected: int, actual: int):
        self.path = str(path)
        self.expected = int(expected)
        self.actual = int(actual)
        super().__init__(f"{self.path}: expected {self.expected} bytes from metadata, found {self.actual}")


class Ray(NamedTuple):
    origin: np.ndarray
    direction: np.ndarray


class Interaction(NamedTuple):
    position: np.ndarray
    albedo: np.ndarray
    depth_t: float


@dataclass
class VolumeField:
    """Scalar lattice normalized to [0, 1], indexed ``data[x, y, z]``."""

    data: np.ndarray
    spacing: np.ndarray = dc_field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    scalar_type_tag: str = "float32"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.data.ndim != 3 or min(self.data.shape) < 2:
            raise ValueError(f"volume dims must be 3 values >= 2, got {self.data.shape}")
        if np.any(self.spacing <= 0):
            raise ValueError("spacing must be positive")
        if np.any(self.data < 0) or np.any(self.data > 1):
            raise ValueError("scalars must lie in [0, 1]")
        self._grid = None

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def lower(self) -> np.ndarray:
        return self.origin.copy()

    @property
    def upper(self) -> np.ndarray:
        return self.origin + (np.asarray(self.dims) - 1) * self.spacing

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def grid(self) -> np.ndarray:
        """C-contiguous ``(nz, ny, nx)`` copy used by the kernels (x fastest)."""
        if self._grid is None:
            self._grid = np.ascontiguousarray(self.data.transpose(2, 1, 0))
        return self._grid


@dataclass
class TransferFunction:
    """Piecewise-linear map from scalar to (rgb albedo, extinction).

    Outside the first/last control point the end values are held.
    """

    scalars: np.ndarray
    albedo: np.ndarray
    extinction: np.ndarray

    def __post_init__(self):
        self.scalars = np.asarray(self.scalars, dtype=np.float64).reshape(-1)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(-1, 3)
        self.extinction = np.asarray(self.extinction, dtype=np.float64).reshape(-1)
        n = self.scalars.size
        if n < 1 or self.albedo.shape[0] != n or self.extinction.size != n:
            raise ValueError("control point arrays must have matching lengths")
        if np.any(np.diff(self.scalars) <= 0):
            raise ValueError("control point scalars must be strictly increasing")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must lie in [0, 1]")
        if np.any(self.extinction < 0):
            raise ValueError("extinction must be non-negative")

    @property
    def max_extinction(self) -> float:
        # Piecewise-linear interpolation never exceeds its largest knot.
        return float(self.extinction.max())

    @classmethod
    def from_points(cls, points: Sequence) -> "TransferFunction":
        """Build from ``[(scalar, (r, g, b), extinction), ...]``."""
        s = [p[0] for p in points]
        a = [p[1] for p in points]
        e = [p[2] for p in points]
        return cls(s, a, e)

    @classmethod
    def constant(cls, extinction: float, albedo=(1.0, 1.0, 1.0)) -> "TransferFunction":
        return cls([0.0, 1.0], [albedo, albedo], [extinction, extinction])

    @classmethod
    def ramp(cls, ext_lo: float, ext_hi: float, albedo=(1.0, 1.0, 1.0)) -> "TransferFunction":
        return cls([0.0, 1.0], [albedo, albedo], [ext_lo, ext_hi])

    def to_dict(self) -> dict:
        return {
            "control_points": [
                [float(s), [float(c) for c in a], float(e)]
                for s, a, e in zip(self.scalars, self.albedo, self.extinction)
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransferFunction":
        return cls.from_points(d["control_points"])

    def evaluate(self, s):
        """Vectorized lookup; returns ``(extinction, albedo)``."""
        s = np.asarray(s, dtype=np.float64)
        ext = np.interp(s, self.scalars, self.extinction)
        alb = np.stack([np.interp(s, self.scalars, self.albedo[:, c]) for c in range(3)], axis=-1)
        return ext, alb


def load_transfer_function(path) -> TransferFunction:
    with open(path) as f:
        return TransferFunction.from_dict(json.load(f))


def save_transfer_function(tf: TransferFunction, path) -> None:
    with open(path, "w") as f:
        json.dump(tf.to_dict(), f, indent=2)


# --------------------------------------------------------------------------
# raw volume I/O


def _read_metadata(metadata) -> dict:
    if isinstance(metadata, (str, os.PathLike)):
        with open(metadata) as f:
            return json.load(f)
    return dict(metadata)


def load_volume(raw_path, metadata) -> VolumeField:
    """Read a little-endian, x-fastest raw volume.

    ``metadata`` is a dict or a path to a JSON sidecar with keys ``dims``,
    ``scalar_type`` (uint8 | uint16 | float32), ``spacing`` and optionally
    ``origin``.
    """
    meta = _read_metadata(metadata)
    tag = meta.get("scalar_type")
    if tag not in SCALAR_TYPES:
        raise ValueError(f"unknown scalar type {tag!r}; expected one of {sorted(SCALAR_TYPES)}")
    dtype = SCALAR_TYPES[tag]
    dims = tuple(int(d) for d in meta["dims"])
    expected = int(np.prod(dims)) * dtype.itemsize
    actual = os.path.getsize(raw_path)
    if actual != expected:
        raise VolumeSizeError(raw_path, expected, actual)
    raw = np.fromfile(raw_path, dtype=dtype).reshape(dims[2], dims[1], dims[0])
    if tag == "float32":
        vals = np.clip(raw.astype(np.float32), 0.0, 1.0)
    else:
        vals = (raw.astype(np.float64) / np.iinfo(dtype).max).astype(np.float32)
    return VolumeField(
        vals.transpose(2, 1, 0),
        spacing=meta.get("spacing", (1.0, 1.0, 1.0)),
        origin=meta.get("origin", (0.0, 0.0, 0.0)),
        scalar_type_tag=tag,
    )


def save_volume(field: VolumeField, raw_path, scalar_type: str = "float32") -> str:
    """Write ``field`` as raw + ``<raw_path>.json`` sidecar; returns the sidecar path."""
    dtype = SCALAR_TYPES[scalar_type]
    vals = field.grid()
    if scalar_type == "float32":
        out = vals.astype(dtype)
    else:
        out = np.round(vals.astype(np.float64) * np.iinfo(dtype).max).astype(dtype)
    out.tofile(raw_path)
    meta = {
        "dims": list(field.dims),
        "scalar_type": scalar_type,
        "spacing": field.spacing.tolist(),
        "origin": field.origin.tolist(),
    }
    sidecar = str(raw_path) + ".json"
    with open(sidecar, "w") as f:
        json.dump(meta, f, indent=2)
    return sidecar


# --------------------------------------------------------------------------
# procedural volumes


def _unit_coords(dims):
    axes = [np.linspace(-1.0, 1.0, d) for d in dims]
    return np.meshgrid(*axes, indexing="ij")


def constant_field(dims=(8, 8, 8), value: float = 1.0, spacing=None, origin=(0.0, 0.0, 0.0)) -> VolumeField:
    dims = tuple(int(d) for d in dims)
    if spacing is None:
        spacing = [1.0 / (d - 1) for d in dims]
    return VolumeField(np.full(dims, value, dtype=np.float32), spacing, origin)


def radial_field(dims=(32, 32, 32), power: float = 1.0, spacing=None, origin=(0.0, 0.0, 0.0)) -> VolumeField:
    """Scalar ``(1 - r)^power`` inside the unit ball of the normalized cube."""
    dims = tuple(int(d) for d in dims)
    x, y, z = _unit_coords(dims)
    r = np.sqrt(x * x + y * y + z * z)
    s = np.clip(1.0 - r, 0.0, 1.0) ** power
    if spacing is None:
        spacing = [1.0 / (d - 1) for d in dims]
    return VolumeField(s.astype(np.float32), spacing, origin)


def fractal_noise_field(
    dims=(64, 64, 64),
    octaves: int = 4,
    base_cells: int = 4,
    persistence: float = 0.5,
    envelope: float = 1.0,
    seed: int = 0,
    spacing=None,
    origin=(0.0, 0.0, 0.0),
) -> VolumeField:
    """Sum of trilinearly upsampled value-noise octaves under a radial envelope."""
    from scipy.ndimage import map_coordinates

    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed)
    grid_pts = np.stack(np.meshgrid(*[np.linspace(0.0, 1.0, d) for d in dims], indexing="ij"))
    total = np.zeros(dims)
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        cells = base_cells * (2**o)
        lattice = rng.random((cells + 1,) * 3)
        coords = grid_pts * cells
        total += amp * map_coordinates(lattice, coords.reshape(3, -1), order=1).reshape(dims)
        norm += amp
        amp *= persistence
    total /= norm
    if envelope > 0:
        x, y, z = _unit_coords(dims)
        r = np.sqrt(x * x + y * y + z * z)
        total *= np.clip(1.0 - r, 0.0, 1.0) ** envelope
    lo, hi = total.min(), total.max()
    s = (total - lo) / (hi - lo) if hi > lo else np.zeros(dims)
    if spacing is None:
        spacing = [1.0 / (d - 1) for d in dims]
    return VolumeField(s.astype(np.float32), spacing, origin)


def two_slab_field(dims=(33, 9, 9), low: float = 0.5, high: float = 1.0) -> VolumeField:
    """Unit cube whose lattice values are ``low`` for x < 0.5 and ``high`` above.

    The lattice midpoint sits on a voxel face, so the interpolated scalar is a
    linear ramp across the single voxel straddling x = 0.5.
    """
    dims = tuple(int(d) for d in dims)
    s = np.full(dims, low, dtype=np.float32)
    xs = np.linspace(0.0, 1.0, dims[0])
    s[xs > 0.5] = high
    return VolumeField(s, [1.0 / (d - 1) for d in dims], (0.0, 0.0, 0.0))


# --------------------------------------------------------------------------
# compiled kernels


def pack_medium(field: VolumeField, tf: TransferFunction, majorant: Optional[float] = None):
    """Tuple consumed by the kernels: grid, lower, upper, inverse spacing, TF, majorant."""
    maj = tf.max_extinction if majorant is None else float(majorant)
    if maj < tf.max_extinction:
        raise ValueError("majorant must bound the transfer function extinction")
    return (
        field.grid(),
        field.lower,
        field.upper,
        1.0 / field.spacing,
        tf.scalars,
        tf.extinction,
        np.ascontiguousarray(tf.albedo),
        float(maj),
    )


@nb.njit(cache=True, inline="always")
def ray_box(ox, oy, oz, dx, dy, dz, lo, hi):
    """Slab intersection; returns (t_enter, t_exit), empty when t_enter > t_exit."""
    t0 = -np.inf
    t1 = np.inf
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        if d[a] != 0.0:
            inv = 1.0 / d[a]
            ta = (lo[a] - o[a]) * inv
            tb = (hi[a] - o[a]) * inv
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
        elif o[a] < lo[a] or o[a] > hi[a]:
            return np.inf, -np.inf
    return t0, t1


@nb.njit(cache=True, inline="always")
def sample_scalar(grid, lo, hi, inv_sp, x, y, z):
    """Trilinear scalar at a world point, or -1 outside the bounds."""
    if x < lo[0] or y < lo[1] or z < lo[2] or x > hi[0] or y > hi[1] or z > hi[2]:
        return -1.0
    nz, ny, nx = grid.shape
    fx = (x - lo[0]) * inv_sp[0]
    fy = (y - lo[1]) * inv_sp[1]
    fz = (z - lo[2]) * inv_sp[2]
    i = min(int(fx), nx - 2)
    j = min(int(fy), ny - 2)
    k = min(int(fz), nz - 2)
    tx = min(max(fx - i, 0.0), 1.0)
    ty = min(max(fy - j, 0.0), 1.0)
    tz = min(max(fz - k, 0.0), 1.0)
    c00 = grid[k, j, i] * (1.0 - tx) + grid[k, j, i + 1] * tx
    c10 = grid[k, j + 1, i] * (1.0 - tx) + grid[k, j + 1, i + 1] * tx
    c01 = grid[k + 1, j, i] * (1.0 - tx) + grid[k + 1, j, i + 1] * tx
    c11 = grid[k + 1, j + 1, i] * (1.0 - tx) + grid[k + 1, j + 1, i + 1] * tx
    c0 = c00 * (1.0 - ty) + c10 * ty
    c1 = c01 * (1.0 - ty) + c11 * ty
    return c0 * (1.0 - tz) + c1 * tz


@nb.njit(cache=True, inline="always")
def tf_lookup(tf_s, tf_ext, tf_alb, s):
    n = tf_s.shape[0]
    if s <= tf_s[0] or n == 1:
        return tf_ext[0], tf_alb[0, 0], tf_alb[0, 1], tf_alb[0, 2]
    if s >= tf_s[n - 1]:
        return tf_ext[n - 1], tf_alb[n - 1, 0], tf_alb[n - 1, 1], tf_alb[n - 1, 2]
    m = 1
    while tf_s[m] < s:
        m += 1
    w = (s - tf_s[m - 1]) / (tf_s[m] - tf_s[m - 1])
    e = tf_ext[m - 1] + w * (tf_ext[m] - tf_ext[m - 1])
    r = tf_alb[m - 1, 0] + w * (tf_alb[m, 0] - tf_alb[m - 1, 0])
    g = tf_alb[m - 1, 1] + w * (tf_alb[m, 1] - tf_alb[m - 1, 1])
    b = tf_alb[m - 1, 2] + w * (tf_alb[m, 2] - tf_alb[m - 1, 2])
    return e, r, g, b


@nb.njit(cache=True, inline="always")
def medium_at(med, x, y, z):
    grid, lo, hi, inv_sp, tf_s, tf_ext, tf_alb, maj = med
    s = sample_scalar(grid, lo, hi, inv_sp, x, y, z)
    if s < 0.0:
        return 0.0, 0.0, 0.0, 0.0
    return tf_lookup(tf_s, tf_ext, tf_alb, s)


@nb.njit(cache=True)
def track(med, ox, oy, oz, dx, dy, dz, tmax, state):
    """Woodcock tracking along a unit direction up to ``tmax``.

    Returns ``(hit, t, r, g, b)``; ``hit`` is False when the flight leaves the
    volume or passes ``tmax`` without a real collision.
    """
    lo = med[1]
    hi = med[2]
    if med[7] <= 0.0:
        return False, 0.0, 0.0, 0.0, 0.0
    t0, t1 = ray_box(ox, oy, oz, dx, dy, dz, lo, hi)
    if t0 < 0.0:
        t0 = 0.0
    if t1 > tmax:
        t1 = tmax
    if t0 >= t1:
        return False, 0.0, 0.0, 0.0, 0.0
    # The medium lookup is written out here: helper calls taking arrays pay
    # refcount traffic on every step.
    grid, lo, hi, inv_sp, tf_s, tf_ext, tf_alb, maj = med
    nz, ny, nx = grid.shape
    n_tf = tf_s.shape[0]
    t = t0
    inv_maj = 1.0 / maj
    while True:
        t -= math.log(1.0 - next_float(state)) * inv_maj
        if t >= t1:
            return False, 0.0, 0.0, 0.0, 0.0
        fx = min(max((ox + t * dx - lo[0]) * inv_sp[0], 0.0), nx - 1.0)
        fy = min(max((oy + t * dy - lo[1]) * inv_sp[1], 0.0), ny - 1.0)
        fz = min(max((oz + t * dz - lo[2]) * inv_sp[2], 0.0), nz - 1.0)
        i = min(int(fx), nx - 2)
        j = min(int(fy), ny - 2)
        k = min(int(fz), nz - 2)
        tx = fx - i
        ty = fy - j
        tz = fz - k
        c00 = grid[k, j, i] * (1.0 - tx) + grid[k, j, i + 1] * tx
        c10 = grid[k, j + 1, i] * (1.0 - tx) + grid[k, j + 1, i + 1] * tx
        c01 = grid[k + 1, j, i] * (1.0 - tx) + grid[k + 1, j, i + 1] * tx
        c11 = grid[k + 1, j + 1, i] * (1.0 - tx) + grid[k + 1, j + 1, i + 1] * tx
        s = (c00 * (1.0 - ty) + c10 * ty) * (1.0 - tz) + (c01 * (1.0 - ty) + c11 * ty) * tz
        if s <= tf_s[0] or n_tf == 1:
            m = 0
            w = 0.0
        elif s >= tf_s[n_tf - 1]:
            m = n_tf - 1
            w = 0.0
        else:
            m = 1
            while tf_s[m] < s:
                m += 1
            m -= 1
            w = (s - tf_s[m]) / (tf_s[m + 1] - tf_s[m])
        if w == 0.0:
            e = tf_ext[m]
        else:
            e = tf_ext[m] + w * (tf_ext[m + 1] - tf_ext[m])
        if next_float(state) * maj < e:
            if w == 0.0:
                return True, t, tf_alb[m, 0], tf_alb[m, 1], tf_alb[m, 2]
            return (
                True,
                t,
                tf_alb[m, 0] + w * (tf_alb[m + 1, 0] - tf_alb[m, 0]),
                tf_alb[m, 1] + w * (tf_alb[m + 1, 1] - tf_alb[m, 1]),
                tf_alb[m, 2] + w * (tf_alb[m + 1, 2] - tf_alb[m, 2]),
            )


@nb.njit(cache=True)
def visibility(med, ax, ay, az, bx, by, bz, state):
    """Binary transmittance estimate between two points (1 = unoccluded)."""
    dx = bx - ax
    dy = by - ay
    dz = bz - az
    dist = math.sqrt(dx * dx + dy * dy + dz * dz)
    if dist <= 0.0:
        return 1.0
    hit, t, r, g, b = track(med, ax, ay, az, dx / dist, dy / dist, dz / dist, dist, state)
    return 0.0 if hit else 1.0


# --------------------------------------------------------------------------
# Python-facing operations


def eval_medium(field: VolumeField, tf: TransferFunction, point) -> tuple[float, np.ndarray]:
    """Extinction and albedo at a world point; vacuum outside the bounds."""
    p = np.asarray(point, dtype=np.float64)
    e, r, g, b = medium_at(pack_medium(field, tf), p[0], p[1], p[2])
    return float(e), np.array([r, g, b])


def _stream_state(rng):
    return rng.state if hasattr(rng, "state") else rng


def delta_track(field: VolumeField, tf: TransferFunction, ray, rng, majorant: Optional[float] = None):
    """Sample the first real collision along ``ray``; ``None`` if the flight exits."""
    o, d = (np.asarray(v, dtype=np.float64) for v in ray)
    med = pack_medium(field, tf, majorant)
    hit, t, r, g, b = track(med, o[0], o[1], o[2], d[0], d[1], d[2], np.inf, _stream_state(rng))
    if not hit:
        return None
    return Interaction(o + t * d, np.array([r, g, b]), float(t))


def transmittance_visibility(field: VolumeField, tf: TransferFunction, segment, rng, majorant: Optional[float] = None) -> int:
    a, b = (np.asarray(v, dtype=np.float64) for v in segment)
    med = pack_medium(field, tf, majorant)
    return int(visibility(med, a[0], a[1], a[2], b[0], b[1], b[2], _stream_state(rng)))
