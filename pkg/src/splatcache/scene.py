"""Pinhole camera, spherical area lights and scene configuration."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field as dc_field, replace
from typing import Optional, Sequence

import numba as nb
import numpy as np

from .rng import next_float
from .volume import (
    Ray,
    TransferFunction,
    VolumeField,
    constant_field,
    fractal_noise_field,
    load_transfer_function,
    load_volume,
    pack_medium,
    radial_field,
)

INV_4PI = 1.0 / (4.0 * math.pi)


def _normalize(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero-length vector")
    return v / n


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = dc_field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    vertical_fov: float = math.radians(40.0)
    resolution: tuple[int, int] = (256, 256)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.look_at = np.asarray(self.look_at, dtype=np.float64).reshape(3)
        self.up = np.asarray(self.up, dtype=np.float64).reshape(3)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        if not 0.0 < self.vertical_fov < math.pi:
            raise ValueError("vertical_fov must lie in (0, pi)")
        if min(self.resolution) <= 0:
            raise ValueError("resolution must be positive")

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    def basis(self):
        """Orthonormal (right, up, forward)."""
        fwd = _normalize(self.look_at - self.position)
        right = _normalize(np.cross(fwd, self.up))
        up = np.cross(right, fwd)
        return right, up, fwd

    @property
    def tan_half(self) -> float:
        return math.tan(0.5 * self.vertical_fov)

    @property
    def focal(self) -> float:
        """Focal length in pixels (square pixels)."""
        return 0.5 * self.height / self.tan_half

    def with_resolution(self, resolution) -> "Camera":
        return replace(self, resolution=tuple(resolution))

    def pack(self) -> np.ndarray:
        r, u, f = self.basis()
        w, h = self.resolution
        return np.concatenate([self.position, r, u, f, [self.tan_half, w / h, w, h]])

    def pose_delta(self, other: "Camera") -> tuple[float, float]:
        """(translation distance, rotation angle in radians) to ``other``."""
        trans = float(np.linalg.norm(self.position - other.position))
        ra = np.stack(self.basis())
        rb = np.stack(other.basis())
        c = (np.trace(ra @ rb.T) - 1.0) * 0.5
        return trans, float(math.acos(min(1.0, max(-1.0, c))))


@nb.njit(cache=True, inline="always")
def camera_ray(cam, px, py):
    """Unit direction through continuous pixel coordinate ``(px, py)``; y grows downward."""
    w = cam[14]
    h = cam[15]
    th = cam[12]
    aspect = cam[13]
    u = (2.0 * px / w - 1.0) * th * aspect
    v = (1.0 - 2.0 * py / h) * th
    dx = cam[9] + u * cam[3] + v * cam[6]
    dy = cam[10] + u * cam[4] + v * cam[7]
    dz = cam[11] + u * cam[5] + v * cam[8]
    n = math.sqrt(dx * dx + dy * dy + dz * dz)
    return dx / n, dy / n, dz / n


def primary_ray(camera: Camera, pixel, jitter=(0.5, 0.5)) -> Ray:
    px, py = pixel
    jx, jy = jitter
    d = camera_ray(camera.pack(), px + jx, py + jy)
    return Ray(camera.position.copy(), np.array(d))


# --------------------------------------------------------------------------
# lights


@dataclass
class SphereLight:
    center: np.ndarray
    radius: float
    emission: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.emission = np.asarray(self.emission, dtype=np.float64).reshape(3)
        self.radius = float(self.radius)
        if self.radius <= 0:
            raise ValueError("light radius must be positive")
        if not np.all(np.isfinite(self.emission)) or np.any(self.emission < 0):
            raise ValueError("emission must be finite and non-negative")

    def pack(self) -> np.ndarray:
        return np.concatenate([self.center, [self.radius], self.emission])


def pack_lights(lights: Sequence[SphereLight]) -> np.ndarray:
    if not lights:
        return np.zeros((0, 7))
    return np.stack([l.pack() for l in lights])


@nb.njit(cache=True, inline="always")
def _cone(lights, j, px, py, pz):
    """Axis, distance and (cos_max, 1 - cos_max) of light ``j`` seen from p."""
    ax = lights[j, 0] - px
    ay = lights[j, 1] - py
    az = lights[j, 2] - pz
    d2 = ax * ax + ay * ay + az * az
    r = lights[j, 3]
    dist = math.sqrt(d2)
    sin2 = r * r / d2
    cos_max = math.sqrt(max(0.0, 1.0 - sin2))
    omc = sin2 / (1.0 + cos_max)
    return ax / dist, ay / dist, az / dist, dist, cos_max, omc


@nb.njit(cache=True, inline="always")
def sphere_hit(lights, j, ox, oy, oz, dx, dy, dz):
    """Nearest positive hit distance of a ray with light ``j`` (inf on miss)."""
    cx = ox - lights[j, 0]
    cy = oy - lights[j, 1]
    cz = oz - lights[j, 2]
    r = lights[j, 3]
    b = cx * dx + cy * dy + cz * dz
    c = cx * cx + cy * cy + cz * cz - r * r
    disc = b * b - c
    if disc < 0.0:
        return np.inf
    sq = math.sqrt(disc)
    t = -b - sq
    if t > 0.0:
        return t
    t = -b + sq
    if t > 0.0:
        return t
    return np.inf


@nb.njit(cache=True)
def nearest_light(lights, ox, oy, oz, dx, dy, dz):
    best = np.inf
    idx = -1
    for j in range(lights.shape[0]):
        t = sphere_hit(lights, j, ox, oy, oz, dx, dy, dz)
        if t < best:
            best = t
            idx = j
    return best, idx


@nb.njit(cache=True)
def cone_sample(lights, j, px, py, pz, u1, u2):
    """Uniform direction in the cone subtended by light ``j``.

    Returns ``(dx, dy, dz, distance, pdf)`` with the pdf in solid angle.
    """
    wx, wy, wz, dist, cos_max, omc = _cone(lights, j, px, py, pz)
    one_minus = u1 * omc
    cos_t = 1.0 - one_minus
    sin_t = math.sqrt(max(0.0, one_minus * (2.0 - one_minus)))
    phi = 2.0 * math.pi * u2
    # orthonormal frame around the axis
    if abs(wx) > 0.9:
        tx, ty, tz = 0.0, 1.0, 0.0
    else:
        tx, ty, tz = 1.0, 0.0, 0.0
    ax = ty * wz - tz * wy
    ay = tz * wx - tx * wz
    az = tx * wy - ty * wx
    n = math.sqrt(ax * ax + ay * ay + az * az)
    ax /= n
    ay /= n
    az /= n
    bx = wy * az - wz * ay
    by = wz * ax - wx * az
    bz = wx * ay - wy * ax
    c = math.cos(phi) * sin_t
    s = math.sin(phi) * sin_t
    dx = cos_t * wx + c * ax + s * bx
    dy = cos_t * wy + c * ay + s * by
    dz = cos_t * wz + c * az + s * bz
    n = math.sqrt(dx * dx + dy * dy + dz * dz)
    dx /= n
    dy /= n
    dz /= n
    t = sphere_hit(lights, j, px, py, pz, dx, dy, dz)
    if not np.isfinite(t):
        # grazing sample lost to rounding: the tangent point distance
        t = dist * cos_max
    return dx, dy, dz, t, 1.0 / (2.0 * math.pi * omc)


@nb.njit(cache=True, inline="always")
def cone_pdf(lights, j, px, py, pz, dx, dy, dz):
    ax = lights[j, 0] - px
    ay = lights[j, 1] - py
    az = lights[j, 2] - pz
    r = lights[j, 3]
    if ax * ax + ay * ay + az * az <= r * r:
        return 0.0
    wx, wy, wz, dist, cos_max, omc = _cone(lights, j, px, py, pz)
    c = wx * dx + wy * dy + wz * dz
    if c >= cos_max - 1e-12:
        return 1.0 / (2.0 * math.pi * omc)
    return 0.0


@nb.njit(cache=True)
def light_mixture_pdf(lights, px, py, pz, dx, dy, dz):
    """Solid-angle pdf of the one-sample light strategy (uniform light choice)."""
    nl = lights.shape[0]
    if nl == 0:
        return 0.0
    s = 0.0
    for j in range(nl):
        s += cone_pdf(lights, j, px, py, pz, dx, dy, dz)
    return s / nl


def _check_outside(light: SphereLight, p):
    if np.sum((np.asarray(p, dtype=np.float64) - light.center) ** 2) <= light.radius**2:
        raise ValueError("shading point lies inside the light sphere")


def sample_light(light: SphereLight, shading_point, rng):
    """Uniform cone sample toward ``light``: (direction, distance, emitted, pdf)."""
    _check_outside(light, shading_point)
    p = np.asarray(shading_point, dtype=np.float64)
    state = rng.state if hasattr(rng, "state") else rng
    u1 = next_float(state)
    u2 = next_float(state)
    dx, dy, dz, t, pdf = cone_sample(light.pack()[None, :], 0, p[0], p[1], p[2], u1, u2)
    return np.array([dx, dy, dz]), float(t), light.emission.copy(), float(pdf)


def light_pdf(light: SphereLight, shading_point, direction) -> float:
    p = np.asarray(shading_point, dtype=np.float64)
    d = _normalize(direction)
    return float(cone_pdf(light.pack()[None, :], 0, p[0], p[1], p[2], d[0], d[1], d[2]))


def mis_weights(pdf_light: float, pdf_phase: float) -> tuple[float, float]:
    """Balance-heuristic weights for the (light, phase) strategy pair."""
    s = pdf_light + pdf_phase
    return pdf_light / s, pdf_phase / s


# --------------------------------------------------------------------------
# scene


@dataclass
class Scene:
    camera: Camera
    lights: list
    field: VolumeField
    tf: TransferFunction
    background: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    max_depth: int = 32
    majorant: Optional[float] = None

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if not self.lights and not np.any(self.background > 0):
            raise ValueError("scene needs at least one light or a nonzero background")
        for l in self.lights:
            if np.all(np.abs(l.center - self.field.center) < 0.5 * (self.field.upper - self.field.lower)):
                raise ValueError("lights must lie outside the volume")

    def with_camera(self, camera: Camera) -> "Scene":
        return replace(self, camera=camera)

    def pack(self):
        return (
            pack_medium(self.field, self.tf, self.majorant),
            pack_lights(self.lights),
            self.background.copy(),
            self.camera.pack(),
        )


# --------------------------------------------------------------------------
# camera paths and configuration files


@dataclass
class CameraPath:
    """Linear interpolation between keyframed poses; frames past the end hold."""

    frames: list
    cameras: list

    def camera_at(self, frame: int) -> Camera:
        if len(self.cameras) == 1 or frame <= self.frames[0]:
            return self.cameras[0]
        if frame >= self.frames[-1]:
            return self.cameras[-1]
        k = int(np.searchsorted(self.frames, frame, side="right")) - 1
        f0, f1 = self.frames[k], self.frames[k + 1]
        w = (frame - f0) / (f1 - f0)
        a, b = self.cameras[k], self.cameras[k + 1]
        return replace(
            a,
            position=(1 - w) * a.position + w * b.position,
            look_at=(1 - w) * a.look_at + w * b.look_at,
            up=(1 - w) * a.up + w * b.up,
        )


def orbit_path(center, radius: float, height: float, n_frames: int, degrees: float, base: Camera) -> CameraPath:
    cams, frames = [], []
    for i in range(max(n_frames, 1)):
        a = math.radians(degrees) * i / max(n_frames - 1, 1)
        pos = np.asarray(center) + np.array([radius * math.sin(a), height, radius * math.cos(a)])
        cams.append(replace(base, position=pos, look_at=np.asarray(center, dtype=np.float64)))
        frames.append(i)
    return CameraPath(frames, cams)


def camera_from_dict(d: dict, resolution=None) -> Camera:
    return Camera(
        position=d["position"],
        look_at=d["look_at"],
        up=d.get("up", (0.0, 1.0, 0.0)),
        vertical_fov=math.radians(d.get("fov_degrees", 40.0)),
        resolution=tuple(resolution or d.get("resolution", (256, 256))),
    )


def _volume_from_dict(d: dict, base_dir: str) -> VolumeField:
    if "raw" in d:
        raw = os.path.join(base_dir, d["raw"])
        meta = d.get("metadata", raw + ".json")
        if isinstance(meta, str):
            meta = os.path.join(base_dir, meta)
        return load_volume(raw, meta)
    kind = d.get("procedural", "fractal")
    dims = tuple(d.get("dims", (128, 128, 128)))
    if kind == "fractal":
        return fractal_noise_field(dims, octaves=d.get("octaves", 4), base_cells=d.get("base_cells", 3), seed=d.get("seed", 0))
    if kind == "radial":
        return radial_field(dims, power=d.get("power", 1.0))
    if kind == "constant":
        return constant_field(dims, value=d.get("value", 1.0))
    raise ValueError(f"unknown procedural volume kind {kind!r}")


def scene_from_dict(d: dict, base_dir: str = ".", resolution=None) -> tuple[Scene, CameraPath]:
    field = _volume_from_dict(d.get("volume", {}), base_dir)
    tfd = d.get("transfer_function")
    if isinstance(tfd, str):
        tf = load_transfer_function(os.path.join(base_dir, tfd))
    elif tfd is None:
        tf = default_transfer_function()
    else:
        tf = TransferFunction.from_dict(tfd)
    keys = d.get("camera_path") or [d["camera"]]
    cams = [camera_from_dict(k, resolution) for k in keys]
    frames = [int(k.get("frame", i)) for i, k in enumerate(keys)]
    lights = [SphereLight(l["center"], l["radius"], l["emission"]) for l in d.get("lights", [])]
    scene = Scene(
        camera=cams[0],
        lights=lights,
        field=field,
        tf=tf,
        background=d.get("background", (0.0, 0.0, 0.0)),
        max_depth=int(d.get("max_depth", 32)),
    )
    return scene, CameraPath(frames, cams)


def load_scene(path, resolution=None) -> tuple[Scene, CameraPath]:
    with open(path) as f:
        d = json.load(f)
    return scene_from_dict(d, os.path.dirname(os.path.abspath(path)), resolution)


def default_transfer_function(density: float = 2.0) -> TransferFunction:
    """Bright, optically thin cloud: empty below 0.25, densest at 1.

    Albedos stay close to one so that at ``C = 1`` the termination lottery
    is rarely active in the first bounces.
    """
    return TransferFunction.from_points(
        [
            (0.0, (0.98, 0.98, 0.98), 0.0),
            (0.25, (0.98, 0.98, 0.98), 0.0),
            (0.5, (0.98, 0.95, 0.91), 0.35 * density),
            (1.0, (0.93, 0.95, 0.98), density),
        ]
    )


DEFAULT_SCENE = {
    "volume": {"procedural": "fractal", "dims": [128, 128, 128], "seed": 0, "base_cells": 3},
    "camera": {"position": [0.5, 0.62, 2.3], "look_at": [0.5, 0.48, 0.5], "fov_degrees": 36.0},
    "lights": [
        {"center": [1.9, 1.5, 1.2], "radius": 0.3, "emission": [180.0, 160.0, 130.0]},
        {"center": [-0.9, 0.4, -0.4], "radius": 0.25, "emission": [50.0, 64.0, 90.0]},
    ],
    "background": [0.02, 0.025, 0.035],
}


def default_scene(resolution=(256, 256), dims=(128, 128, 128), seed: int = 0, density: float = 2.0) -> Scene:
    """Procedural desk-scale scene: fractal cloud lit by two sphere lights."""
    d = json.loads(json.dumps(DEFAULT_SCENE))
    d["volume"]["dims"] = list(dims)
    d["volume"]["seed"] = seed
    d["transfer_function"] = default_transfer_function(density).to_dict()
    scene, _ = scene_from_dict(d, resolution=resolution)
    return scene
