"""Tile-based differentiable Gaussian splatting.

Each splat carries a position, an unnormalized rotation quaternion
``(w, x, y, z)``, per-axis log scales, an opacity logit and an HDR color.
Projection uses the local affine approximation of the perspective map; a
0.3 px^2 low-pass term is added to the 2D covariance. Splats are sorted
front to back per 16x16 tile (depth, then storage index) and alpha
composited with alpha clamped to 0.99; a pixel stops once its transmittance
would drop below 1e-4.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numba as nb
import numpy as np

TILE = 16
LOW_PASS = 0.3
ALPHA_MAX = 0.99
T_MIN = 1e-4
NEAR = 0.01

PARAM_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "colors")
_WIDTHS = {"positions": 3, "rotations": 4, "log_scales": 3, "opacity_logits": 1, "colors": 3}
FLOATS_PER_SPLAT = sum(_WIDTHS.values())


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass
class GaussianLevel:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.positions).shape[0]
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def __len__(self) -> int:
        return self.count

    @classmethod
    def empty(cls) -> "GaussianLevel":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def isotropic(cls, positions, scales, colors, opacity: float = 0.1) -> "GaussianLevel":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = positions.shape[0]
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        ls = np.repeat(np.log(np.asarray(scales, dtype=np.float64).reshape(n, 1)), 3, axis=1)
        return cls(positions, rot, ls, np.full(n, logit(opacity)), np.asarray(colors, dtype=np.float64).reshape(n, 3))

    def params(self) -> dict:
        return {g: getattr(self, g) for g in PARAM_GROUPS}

    def copy(self) -> "GaussianLevel":
        return GaussianLevel(**{g: v.copy() for g, v in self.params().items()})

    def subset(self, idx) -> "GaussianLevel":
        return GaussianLevel(**{g: v[idx].copy() for g, v in self.params().items()})

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def activated_colors(self) -> np.ndarray:
        return np.maximum(self.colors, 0.0)

    def nbytes(self, bytes_per_float: int = 4) -> int:
        return self.count * FLOATS_PER_SPLAT * bytes_per_float


class SplatGradients(NamedTuple):
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def as_dict(self) -> dict:
        return self._asdict()


class Projection(NamedTuple):
    means2d: np.ndarray  # (N, 2) pixel coordinates
    cov2d: np.ndarray  # (N, 3) xx, xy, yy including the low-pass term
    conics: np.ndarray  # (N, 3) inverse covariance entries
    depths: np.ndarray  # (N,)
    radii: np.ndarray  # (N,) 0 when culled
    rects: np.ndarray  # (N, 4) tile range x0, y0, x1, y1 (exclusive)


@dataclass
class RasterState:
    projection: Projection
    opacities: np.ndarray
    colors: np.ndarray
    order: np.ndarray  # splat ids sorted by tile, depth, index
    tile_ranges: np.ndarray  # (n_tiles, 2)
    n_contrib: np.ndarray  # (H, W) list entries processed per pixel
    resolution: tuple


@dataclass
class SplatImage:
    rgb: np.ndarray
    transmittance: np.ndarray
    state: Optional[RasterState] = None


def camera_frame(camera):
    """View rotation (rows: right, down, forward), focal length and principal point."""
    r, u, f = camera.basis()
    view = np.stack([r, -u, f])
    w, h = camera.resolution
    return view, camera.position.copy(), camera.focal, 0.5 * w, 0.5 * h


# --------------------------------------------------------------------------
# projection


@nb.njit(cache=True)
def quat_to_rot(qw, qx, qy, qz):
    n = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    w = qw / n
    x = qx / n
    y = qy / n
    z = qz / n
    R = np.empty((3, 3))
    R[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[0, 1] = 2.0 * (x * y - w * z)
    R[0, 2] = 2.0 * (x * z + w * y)
    R[1, 0] = 2.0 * (x * y + w * z)
    R[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[1, 2] = 2.0 * (y * z - w * x)
    R[2, 0] = 2.0 * (x * z - w * y)
    R[2, 1] = 2.0 * (y * z + w * x)
    R[2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


@nb.njit(cache=True)
def _cov3d(rot, log_scales, i):
    R = quat_to_rot(rot[i, 0], rot[i, 1], rot[i, 2], rot[i, 3])
    M = np.empty((3, 3))
    for a in range(3):
        s = math.exp(log_scales[i, a])
        for r in range(3):
            M[r, a] = R[r, a] * s
    return M @ M.T, R, M


@nb.njit(cache=True)
def _jacobian(tx, ty, tz, f):
    J = np.zeros((2, 3))
    J[0, 0] = f / tz
    J[0, 2] = -f * tx / (tz * tz)
    J[1, 1] = f / tz
    J[1, 2] = -f * ty / (tz * tz)
    return J


@nb.njit(cache=True)
def project_kernel(pos, rot, log_scales, view, cam_pos, f, cx, cy, width, height, near):
    n = pos.shape[0]
    means = np.zeros((n, 2))
    cov = np.zeros((n, 3))
    conic = np.zeros((n, 3))
    depth = np.zeros(n)
    radii = np.zeros(n)
    rects = np.zeros((n, 4), dtype=np.int64)
    tiles_x = (width + 15) // 16
    tiles_y = (height + 15) // 16
    for i in range(n):
        px = pos[i, 0] - cam_pos[0]
        py = pos[i, 1] - cam_pos[1]
        pz = pos[i, 2] - cam_pos[2]
        tx = view[0, 0] * px + view[0, 1] * py + view[0, 2] * pz
        ty = view[1, 0] * px + view[1, 1] * py + view[1, 2] * pz
        tz = view[2, 0] * px + view[2, 1] * py + view[2, 2] * pz
        depth[i] = tz
        if tz <= near:
            continue
        S3, R, M = _cov3d(rot, log_scales, i)
        JW = _jacobian(tx, ty, tz, f) @ view
        S2 = JW @ S3 @ JW.T
        a = S2[0, 0] + 0.3
        b = S2[0, 1]
        c = S2[1, 1] + 0.3
        det = a * c - b * b
        if det <= 0.0:
            continue
        mx = cx + f * tx / tz
        my = cy + f * ty / tz
        means[i, 0] = mx
        means[i, 1] = my
        cov[i, 0] = a
        cov[i, 1] = b
        cov[i, 2] = c
        conic[i, 0] = c / det
        conic[i, 1] = -b / det
        conic[i, 2] = a / det
        mid = 0.5 * (a + c)
        lam = mid + math.sqrt(max(0.1, mid * mid - det))
        r = math.ceil(3.0 * math.sqrt(lam))
        x0 = max(0, min(tiles_x, int(math.floor((mx - r) / 16.0))))
        x1 = max(0, min(tiles_x, int(math.floor((mx + r) / 16.0)) + 1))
        y0 = max(0, min(tiles_y, int(math.floor((my - r) / 16.0))))
        y1 = max(0, min(tiles_y, int(math.floor((my + r) / 16.0)) + 1))
        if x0 >= x1 or y0 >= y1:
            continue
        radii[i] = r
        rects[i, 0] = x0
        rects[i, 1] = y0
        rects[i, 2] = x1
        rects[i, 3] = y1
    return means, cov, conic, depth, radii, rects


def project(level: GaussianLevel, camera) -> Projection:
    view, cam_pos, f, cx, cy = camera_frame(camera)
    w, h = camera.resolution
    out = project_kernel(level.positions, level.rotations, level.log_scales, view, cam_pos, f, cx, cy, w, h, NEAR)
    return Projection(*out)


# --------------------------------------------------------------------------
# tile lists


@nb.njit(cache=True)
def _emit_keys(rects, radii, depth, total):
    tiles = np.empty(total, dtype=np.int64)
    depths = np.empty(total)
    ids = np.empty(total, dtype=np.int64)
    k = 0
    for i in range(rects.shape[0]):
        if radii[i] <= 0:
            continue
        for ty in range(rects[i, 1], rects[i, 3]):
            for tx in range(rects[i, 0], rects[i, 2]):
                tiles[k] = ty * 100000 + tx
                depths[k] = depth[i]
                ids[k] = i
                k += 1
    return tiles, depths, ids


def build_tile_lists(proj: Projection, resolution):
    w, h = resolution
    tiles_x = (w + TILE - 1) // TILE
    tiles_y = (h + TILE - 1) // TILE
    r = proj.rects
    counts = np.where(proj.radii > 0, (r[:, 2] - r[:, 0]) * (r[:, 3] - r[:, 1]), 0)
    total = int(counts.sum())
    tiles, depths, ids = _emit_keys(r, proj.radii, proj.depths, total)
    # tile index in row-major order
    tile_id = (tiles // 100000) * tiles_x + (tiles % 100000)
    order = np.lexsort((ids, depths, tile_id))
    sorted_tiles = tile_id[order]
    sorted_ids = ids[order]
    n_tiles = tiles_x * tiles_y
    starts = np.searchsorted(sorted_tiles, np.arange(n_tiles), side="left")
    ends = np.searchsorted(sorted_tiles, np.arange(n_tiles), side="right")
    return sorted_ids, np.stack([starts, ends], axis=1).astype(np.int64)


# --------------------------------------------------------------------------
# forward


@nb.njit(cache=True)
def render_kernel(order, ranges, means, conic, opac, colors, width, height):
    img = np.zeros((height, width, 3))
    T_out = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    tiles_x = (width + 15) // 16
    for tile in range(ranges.shape[0]):
        s0 = ranges[tile, 0]
        s1 = ranges[tile, 1]
        if s1 <= s0:
            continue
        ty = tile // tiles_x
        tx = tile % tiles_x
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                cxp = px + 0.5
                cyp = py + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                last = s0
                for k in range(s0, s1):
                    i = order[k]
                    dx = cxp - means[i, 0]
                    dy = cyp - means[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    alpha = min(0.99, opac[i] * math.exp(power))
                    t_new = T * (1.0 - alpha)
                    if t_new < 1e-4:
                        break
                    wgt = T * alpha
                    r += wgt * colors[i, 0]
                    g += wgt * colors[i, 1]
                    b += wgt * colors[i, 2]
                    T = t_new
                    last = k + 1
                img[py, px, 0] = r
                img[py, px, 1] = g
                img[py, px, 2] = b
                T_out[py, px] = T
                n_contrib[py, px] = last - s0
    return img, T_out, n_contrib


def rasterize(level: GaussianLevel, camera, resolution=None) -> SplatImage:
    """Composite ``level`` into an HDR image at ``resolution`` (defaults to the camera's)."""
    if resolution is not None and tuple(resolution) != tuple(camera.resolution):
        camera = camera.with_resolution(resolution)
    w, h = camera.resolution
    proj = project(level, camera)
    order, ranges = build_tile_lists(proj, (w, h))
    opac = level.opacities
    cols = level.activated_colors
    img, T, n_contrib = render_kernel(order, ranges, proj.means2d, proj.conics, opac, cols, w, h)
    state = RasterState(proj, opac, cols, order, ranges, n_contrib, (w, h))
    return SplatImage(img, T, state)


# --------------------------------------------------------------------------
# backward


@nb.njit(cache=True)
def backward_pixels(order, ranges, n_contrib, means, conic, opac, colors, dl_dimg, width, height):
    n = means.shape[0]
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_col = np.zeros((n, 3))
    tiles_x = (width + 15) // 16
    max_len = 0
    for tile in range(ranges.shape[0]):
        max_len = max(max_len, ranges[tile, 1] - ranges[tile, 0])
    alphas = np.zeros(max_len)
    gauss = np.zeros(max_len)
    Ts = np.zeros(max_len)
    for tile in range(ranges.shape[0]):
        s0 = ranges[tile, 0]
        s1 = ranges[tile, 1]
        if s1 <= s0:
            continue
        ty = tile // tiles_x
        tx = tile % tiles_x
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                m = n_contrib[py, px]
                if m == 0:
                    continue
                gr = dl_dimg[py, px, 0]
                gg = dl_dimg[py, px, 1]
                gb = dl_dimg[py, px, 2]
                if gr == 0.0 and gg == 0.0 and gb == 0.0:
                    continue
                cxp = px + 0.5
                cyp = py + 0.5
                T = 1.0
                for k in range(m):
                    i = order[s0 + k]
                    dx = cxp - means[i, 0]
                    dy = cyp - means[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    G = math.exp(power)
                    gauss[k] = G
                    alphas[k] = min(0.99, opac[i] * G)
                    Ts[k] = T
                    T = T * (1.0 - alphas[k])
                ar = 0.0
                ag = 0.0
                ab = 0.0
                for k in range(m - 1, -1, -1):
                    i = order[s0 + k]
                    a = alphas[k]
                    Ti = Ts[k]
                    w = Ti * a
                    g_col[i, 0] += w * gr
                    g_col[i, 1] += w * gg
                    g_col[i, 2] += w * gb
                    dl_da = Ti * (gr * (colors[i, 0] - ar) + gg * (colors[i, 1] - ag) + gb * (colors[i, 2] - ab))
                    ar = a * colors[i, 0] + (1.0 - a) * ar
                    ag = a * colors[i, 1] + (1.0 - a) * ag
                    ab = a * colors[i, 2] + (1.0 - a) * ab
                    G = gauss[k]
                    if opac[i] * G > 0.99:
                        continue
                    g_opac[i] += dl_da * G
                    dl_dp = dl_da * a
                    dx = cxp - means[i, 0]
                    dy = cyp - means[i, 1]
                    g_mean[i, 0] += dl_dp * (conic[i, 0] * dx + conic[i, 1] * dy)
                    g_mean[i, 1] += dl_dp * (conic[i, 1] * dx + conic[i, 2] * dy)
                    g_conic[i, 0] += dl_dp * (-0.5 * dx * dx)
                    g_conic[i, 1] += dl_dp * (-dx * dy)
                    g_conic[i, 2] += dl_dp * (-0.5 * dy * dy)
    return g_mean, g_conic, g_opac, g_col


@nb.njit(cache=True)
def backward_splats(pos, rot, log_scales, view, cam_pos, f, radii, conic, g_mean, g_conic):
    n = pos.shape[0]
    g_pos = np.zeros((n, 3))
    g_rot = np.zeros((n, 4))
    g_ls = np.zeros((n, 3))
    for i in range(n):
        if radii[i] <= 0:
            continue
        px = pos[i, 0] - cam_pos[0]
        py = pos[i, 1] - cam_pos[1]
        pz = pos[i, 2] - cam_pos[2]
        tx = view[0, 0] * px + view[0, 1] * py + view[0, 2] * pz
        ty = view[1, 0] * px + view[1, 1] * py + view[1, 2] * pz
        tz = view[2, 0] * px + view[2, 1] * py + view[2, 2] * pz
        S3, R, Mx = _cov3d(rot, log_scales, i)
        J = _jacobian(tx, ty, tz, f)
        M = J @ view
        # conic -> 2D covariance: dL/dS2 = -K G K
        K = np.empty((2, 2))
        K[0, 0] = conic[i, 0]
        K[0, 1] = conic[i, 1]
        K[1, 0] = conic[i, 1]
        K[1, 1] = conic[i, 2]
        Gc = np.empty((2, 2))
        Gc[0, 0] = g_conic[i, 0]
        Gc[0, 1] = 0.5 * g_conic[i, 1]
        Gc[1, 0] = 0.5 * g_conic[i, 1]
        Gc[1, 1] = g_conic[i, 2]
        GS2 = -(K @ Gc @ K)
        GS3 = M.T @ GS2 @ M
        GM = 2.0 * (GS2 @ M @ S3)
        GJ = GM @ view.T
        tz2 = tz * tz
        tz3 = tz2 * tz
        gtx = GJ[0, 2] * (-f / tz2)
        gty = GJ[1, 2] * (-f / tz2)
        gtz = -(GJ[0, 0] + GJ[1, 1]) * f / tz2 + GJ[0, 2] * 2.0 * f * tx / tz3 + GJ[1, 2] * 2.0 * f * ty / tz3
        gtx += g_mean[i, 0] * f / tz
        gty += g_mean[i, 1] * f / tz
        gtz += -(g_mean[i, 0] * tx + g_mean[i, 1] * ty) * f / tz2
        for a in range(3):
            g_pos[i, a] = view[0, a] * gtx + view[1, a] * gty + view[2, a] * gtz
        # 3D covariance -> scales and rotation
        GMx = 2.0 * (GS3 @ Mx)
        GR = np.empty((3, 3))
        for a in range(3):
            s = math.exp(log_scales[i, a])
            acc = 0.0
            for r in range(3):
                acc += GMx[r, a] * R[r, a]
                GR[r, a] = GMx[r, a] * s
            g_ls[i, a] = acc * s
        qn = math.sqrt(rot[i, 0] ** 2 + rot[i, 1] ** 2 + rot[i, 2] ** 2 + rot[i, 3] ** 2)
        w = rot[i, 0] / qn
        x = rot[i, 1] / qn
        y = rot[i, 2] / qn
        z = rot[i, 3] / qn
        gw = 2.0 * (-z * GR[0, 1] + y * GR[0, 2] + z * GR[1, 0] - x * GR[1, 2] - y * GR[2, 0] + x * GR[2, 1])
        gx = 2.0 * (y * GR[0, 1] + z * GR[0, 2] + y * GR[1, 0] - 2.0 * x * GR[1, 1] - w * GR[1, 2] + z * GR[2, 0] + w * GR[2, 1] - 2.0 * x * GR[2, 2])
        gy = 2.0 * (-2.0 * y * GR[0, 0] + x * GR[0, 1] + w * GR[0, 2] + x * GR[1, 0] + z * GR[1, 2] - w * GR[2, 0] + z * GR[2, 1] - 2.0 * y * GR[2, 2])
        gz = 2.0 * (-2.0 * z * GR[0, 0] - w * GR[0, 1] + x * GR[0, 2] + w * GR[1, 0] - 2.0 * z * GR[1, 1] + y * GR[1, 2] + x * GR[2, 0] + y * GR[2, 1])
        dot = w * gw + x * gx + y * gy + z * gz
        g_rot[i, 0] = (gw - w * dot) / qn
        g_rot[i, 1] = (gx - x * dot) / qn
        g_rot[i, 2] = (gy - y * dot) / qn
        g_rot[i, 3] = (gz - z * dot) / qn
    return g_pos, g_rot, g_ls


def rasterize_backward(level: GaussianLevel, camera, loss_gradient_image, state: Optional[RasterState] = None) -> SplatGradients:
    """Gradients of ``sum(loss_gradient_image * image)`` for every parameter group.

    ``state`` is the forward state of :func:`rasterize` for the same level and
    camera; it is recomputed when omitted.
    """
    if state is None:
        state = rasterize(level, camera).state
    elif tuple(state.resolution) != tuple(camera.resolution):
        camera = camera.with_resolution(state.resolution)
    w, h = state.resolution
    g_img = np.ascontiguousarray(loss_gradient_image, dtype=np.float64).reshape(h, w, 3)
    proj = state.projection
    g_mean, g_conic, g_opac, g_col = backward_pixels(
        state.order, state.tile_ranges, state.n_contrib, proj.means2d, proj.conics, state.opacities, state.colors, g_img, w, h
    )
    view, cam_pos, f, _, _ = camera_frame(camera)
    g_pos, g_rot, g_ls = backward_splats(level.positions, level.rotations, level.log_scales, view, cam_pos, f, proj.radii, proj.conics, g_mean, g_conic)
    o = state.opacities
    g_logit = g_opac * o * (1.0 - o)
    g_colors = np.where(level.colors > 0.0, g_col, 0.0)
    return SplatGradients(g_pos, g_rot, g_ls, g_logit, g_colors)


# --------------------------------------------------------------------------
# binary blob

_MAGIC = b"GSLV"
_VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def dump_level(level: GaussianLevel, bytes_per_float: int = 4) -> bytes:
    """Flat blob: header (magic, version, count, float width, field table) then columns."""
    dtype = _DTYPES[bytes_per_float]
    n = level.count
    header_size = 4 + 4 + 8 + 4 + 4 + len(PARAM_GROUPS) * (16 + 8 + 4)
    table = b""
    body = b""
    offset = header_size
    for g in PARAM_GROUPS:
        arr = np.ascontiguousarray(getattr(level, g), dtype=dtype).reshape(n, _WIDTHS[g])
        table += struct.pack("<16sQI", g.encode(), offset, _WIDTHS[g])
        body += arr.tobytes()
        offset += arr.nbytes
    head = struct.pack("<4sIQII", _MAGIC, _VERSION, n, bytes_per_float, len(PARAM_GROUPS))
    return head + table + body


def load_level(blob: bytes) -> GaussianLevel:
    magic, version, n, bpf, nfields = struct.unpack_from("<4sIQII", blob, 0)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError("not a splat level blob")
    dtype = _DTYPES[bpf]
    pos = struct.calcsize("<4sIQII")
    arrays = {}
    for _ in range(nfields):
        name, offset, width = struct.unpack_from("<16sQI", blob, pos)
        pos += struct.calcsize("<16sQI")
        key = name.rstrip(b"\0").decode()
        arrays[key] = np.frombuffer(blob, dtype=dtype, count=n * width, offset=offset).astype(np.float64).reshape(n, width)
    arrays["opacity_logits"] = arrays["opacity_logits"].reshape(n)
    return GaussianLevel(**{g: arrays[g] for g in PARAM_GROUPS})
