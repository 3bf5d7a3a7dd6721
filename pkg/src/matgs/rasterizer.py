"""Surfel rasterization: ray-splat intersection and front-to-back blending.

Two renderers share one contract. :func:`render_oracle` walks every pixel and
every gaussian in plain numpy; :func:`render_fast` bins splats into 16x16
tiles by their projected 3-sigma footprint and runs a compiled kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .core import Camera, Ray, Scene, quat_to_rotmat

SCREEN_SIGMA = math.sqrt(2.0) / 2.0
T_MIN = K.T_MIN
ALPHA_EPS = K.ALPHA_EPS
NEAR = K.NEAR


@dataclass(frozen=True)
class SplatSample:
    gaussian_index: int
    uv: tuple[float, float]
    g_value: float
    g_filtered: float
    depth: float
    weight: float
    transmittance: float = 1.0
    normal: Optional[tuple[float, float, float]] = None


@dataclass(eq=False)
class GBuffer:
    albedo: np.ndarray  # (H, W, 3)
    roughness: np.ndarray  # (H, W, 1)
    metallic: np.ndarray  # (H, W, 1)
    depth: np.ndarray  # (H, W, 1)
    normal: np.ndarray  # (H, W, 3) world space
    alpha: np.ndarray  # (H, W, 1)
    per_ray_samples: Optional[list[list[list[SplatSample]]]] = None
    # blending statistics used by the objectives
    normal_sum: Optional[np.ndarray] = None  # (H, W, 3) unnormalized sum of w_i n_i
    distortion: Optional[np.ndarray] = None  # (H, W) sum_ij w_i w_j |z_i - z_j|
    sample_count: Optional[np.ndarray] = None
    branch_state: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape[:2]

    @property
    def material(self) -> np.ndarray:
        return np.concatenate([self.albedo, self.roughness, self.metallic], axis=-1)

    def channels(self) -> dict[str, np.ndarray]:
        return {"albedo": self.albedo, "roughness": self.roughness, "metallic": self.metallic,
                "depth": self.depth, "normal": self.normal, "alpha": self.alpha}

    @classmethod
    def zeros(cls, height: int, width: int) -> "GBuffer":
        z = lambda c: np.zeros((height, width, c))
        return cls(z(3), z(1), z(1), z(1), z(3), z(1), normal_sum=z(3),
                   distortion=np.zeros((height, width)))


def intersect(gaussian, ray: Ray, camera: Optional[Camera] = None):
    """Hit of ``ray`` with the surfel plane as ``(uv, depth)``, or None.

    ``depth`` is the view-space z of the hit when ``camera`` is given, else the
    ray parameter (equal to distance along a unit direction).
    """
    rot = quat_to_rotmat(np.asarray(gaussian.rotation, dtype=np.float64))
    tu, tv, n = rot[:, 0], rot[:, 1], rot[:, 2]
    x = np.asarray(gaussian.position, dtype=np.float64)
    o = np.asarray(ray.origin, dtype=np.float64)
    d = np.asarray(ray.direction, dtype=np.float64)
    denom = float(d @ n)
    if abs(denom) < K.PARALLEL_EPS:
        return None
    t = float((x - o) @ n) / denom
    if t <= 0:
        return None
    p = o + t * d
    su, sv = gaussian.scale
    uv = (float((p - x) @ tu) / su, float((p - x) @ tv) / sv)
    depth = t if camera is None else float(camera.rotation[2] @ p + camera.translation[2])
    return uv, depth


def eval_gaussian(uv) -> float:
    u, v = uv
    return math.exp(-(u * u + v * v) / 2.0)


def low_pass(g_object: float, screen_dist_px: float) -> float:
    return max(g_object, math.exp(-screen_dist_px ** 2 / (2 * SCREEN_SIGMA ** 2)))


def _fade(r2):
    """Smooth cutoff between 2.5 and 3 standard deviations (r2 in sigma^2 units)."""
    r2 = np.asarray(r2, dtype=np.float64)
    s = np.clip((K.FADE_END - r2) / (K.FADE_END - K.FADE_START), 0.0, 1.0)
    return s ** 3 * (s * (6.0 * s - 15.0) + 10.0)


def splat_falloff(uv) -> float:
    """Object-space falloff used by the renderers: G(u) faded to 0 at 3 sigma."""
    u, v = uv
    r2 = u * u + v * v
    return eval_gaussian(uv) * float(_fade(r2)) if r2 < K.FADE_END else 0.0


def screen_falloff(screen_dist_px: float) -> float:
    r2 = screen_dist_px ** 2 / SCREEN_SIGMA ** 2
    return math.exp(-0.5 * r2) * float(_fade(r2)) if r2 < K.FADE_END else 0.0


@dataclass
class BlendResult:
    channels: np.ndarray
    alpha: float
    depth: float
    normal: np.ndarray
    samples: list[SplatSample] = field(default_factory=list)
    normal_sum: np.ndarray = field(default_factory=lambda: np.zeros(3))


def blend_ray(samples: Sequence, opacities, channels, normals=None, sort_keys=None) -> BlendResult:
    """Front-to-back compositing of one ray.

    ``samples`` holds ``(gaussian_index, g_filtered, depth)`` tuples (an
    optional fourth item carries ``uv``) sorted by ``sort_keys[index]`` when
    given, else by depth. Stops once transmittance drops below ``T_MIN``.
    """
    keys = [sort_keys[s[0]] if sort_keys is not None else s[2] for s in samples]
    if any(b < a for a, b in zip(keys, keys[1:])):
        raise ValueError("blend_ray samples must be sorted front to back")
    opacities = np.asarray(opacities, dtype=np.float64)
    channels = np.asarray(channels, dtype=np.float64)
    n_ch = channels.shape[1] if channels.ndim == 2 else 5
    out = np.zeros(n_ch)
    nsum = np.zeros(3)
    alpha = 0.0
    dsum = 0.0
    T = 1.0
    kept = []
    for s in samples:
        idx, gh, z = int(s[0]), float(s[1]), float(s[2])
        uv = tuple(s[3]) if len(s) > 3 else (math.nan, math.nan)
        if gh <= 0.0:
            continue
        a = opacities[idx] * gh
        w = a * T
        out += w * channels[idx]
        if normals is not None:
            nsum += w * np.asarray(normals[idx], dtype=np.float64)
        alpha += w
        dsum += w * z
        g_value = eval_gaussian(uv) if len(s) > 3 else gh
        nrm = tuple(float(c) for c in normals[idx]) if normals is not None else None
        kept.append(SplatSample(idx, uv, g_value, gh, z, w, T, nrm))
        T *= 1.0 - a
        if T < T_MIN:
            break
    depth = dsum / alpha if alpha > ALPHA_EPS else 0.0
    nn = np.linalg.norm(nsum)
    normal = nsum / nn if alpha > ALPHA_EPS and nn > 0 else np.zeros(3)
    return BlendResult(out, alpha, depth, normal, kept, nsum)


def _depth_order(depths: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Candidates sorted by (center depth, index)."""
    return candidates[np.lexsort((candidates, depths[candidates]))]


def render_oracle(scene: Scene, camera: Camera, keep_samples: bool = True) -> GBuffer:
    """Reference renderer: every pixel against every gaussian, no culling."""
    H, W = camera.height, camera.width
    gb = GBuffer.zeros(H, W)
    gb.sample_count = np.zeros((H, W), dtype=np.int64)
    rows = [[[] for _ in range(W)] for _ in range(H)] if keep_samples else None
    n = len(scene)
    if n:
        R, tr = camera.rotation, camera.translation
        rot = quat_to_rotmat(scene.rotations)
        tu, tv, nrm = rot[:, :, 0], rot[:, :, 1], rot[:, :, 2]
        center_cam = scene.positions @ R.T + tr
        center_depth = center_cam[:, 2]
        live = np.flatnonzero(center_depth > NEAR)
        order = _depth_order(center_depth, live)
        proj = np.zeros((n, 2))
        proj[live, 0] = camera.fx * center_cam[live, 0] / center_depth[live] + camera.cx
        proj[live, 1] = camera.fy * center_cam[live, 1] / center_depth[live] + camera.cy
        mats = scene.materials
        origin = camera.position
        for py in range(H):
            for px in range(W):
                d = R.T @ np.array([(px + 0.5 - camera.cx) / camera.fx,
                                    (py + 0.5 - camera.cy) / camera.fy, 1.0])
                d /= np.linalg.norm(d)
                denom = nrm[order] @ d
                hit = np.abs(denom) >= K.PARALLEL_EPS
                t = np.where(hit, np.einsum("ij,ij->i", scene.positions[order] - origin, nrm[order])
                             / np.where(hit, denom, 1.0), -1.0)
                hit &= t > 0
                g_hit = order[hit]
                t = t[hit]
                p = origin + t[:, None] * d
                rel = p - scene.positions[g_hit]
                us = np.einsum("ij,ij->i", rel, tu[g_hit]) / scene.scales[g_hit, 0]
                vs = np.einsum("ij,ij->i", rel, tv[g_hit]) / scene.scales[g_hit, 1]
                dists = np.hypot(px + 0.5 - proj[g_hit, 0], py + 0.5 - proj[g_hit, 1])
                zs = p @ R[2] + tr[2]
                samples = [(g, max(splat_falloff((u, v)), screen_falloff(dist)), z, (u, v))
                           for g, u, v, dist, z in zip(g_hit.tolist(), us, vs, dists, zs)]
                flip = np.where(denom[hit] > 0, -1.0, 1.0)
                normals = np.zeros((n, 3))
                normals[g_hit] = flip[:, None] * nrm[g_hit]
                res = blend_ray(samples, scene.opacities, mats, normals=normals,
                                sort_keys=center_depth)
                gb.albedo[py, px] = res.channels[:3]
                gb.roughness[py, px, 0] = res.channels[3]
                gb.metallic[py, px, 0] = res.channels[4]
                gb.alpha[py, px, 0] = res.alpha
                gb.depth[py, px, 0] = res.depth
                gb.normal[py, px] = res.normal
                gb.normal_sum[py, px] = res.normal_sum
                gb.sample_count[py, px] = len(res.samples)
                ws = np.array([s.weight for s in res.samples])
                zs = np.array([s.depth for s in res.samples])
                gb.distortion[py, px] = float(np.sum(ws[:, None] * ws[None, :] * np.abs(zs[:, None] - zs[None, :]))) if len(ws) else 0.0
                if keep_samples:
                    rows[py][px] = res.samples
    gb.per_ray_samples = rows
    return gb


@dataclass(eq=False)
class ViewSetup:
    """Per-view camera-space splat data and tile bins shared by the kernels."""

    camera: Camera
    rot: np.ndarray  # (N, 3, 3) world-space frames
    xc: np.ndarray
    tuc: np.ndarray
    tvc: np.ndarray
    nc: np.ndarray
    nw: np.ndarray
    scales: np.ndarray
    opac: np.ndarray
    mat: np.ndarray
    mxy: np.ndarray
    rect: np.ndarray
    tile_offsets: np.ndarray
    tile_ids: np.ndarray

    def kernel_args(self):
        c = self.camera
        return (c.height, c.width, c.fx, c.fy, c.cx, c.cy, self.xc, self.tuc, self.tvc, self.nc,
                self.nw, self.scales, self.opac, self.mat, self.mxy, self.rect,
                self.tile_offsets, self.tile_ids)


def _footprint(xc, tuc, tvc, scales, camera: Camera) -> np.ndarray:
    """Inclusive pixel rectangles (x0, x1, y0, y1) covering each 3-sigma footprint."""
    n = len(xc)
    W, H = camera.width, camera.height
    ext_u = 3.0 * scales[:, 0:1] * tuc
    ext_v = 3.0 * scales[:, 1:2] * tvc
    corners = np.stack([xc + su * ext_u + sv * ext_v for su in (-1, 1) for sv in (-1, 1)], axis=1)
    cz = corners[..., 2]
    behind = np.any(cz <= NEAR, axis=1)
    safe_z = np.where(cz > NEAR, cz, 1.0)
    cx_ = camera.fx * corners[..., 0] / safe_z + camera.cx
    cy_ = camera.fy * corners[..., 1] / safe_z + camera.cy
    mx = camera.fx * xc[:, 0] / xc[:, 2] + camera.cx
    my = camera.fy * xc[:, 1] / xc[:, 2] + camera.cy
    kr = 3.0 * SCREEN_SIGMA
    pad = 1e-6
    xmin = np.minimum(cx_.min(axis=1), mx - kr) - pad
    xmax = np.maximum(cx_.max(axis=1), mx + kr) + pad
    ymin = np.minimum(cy_.min(axis=1), my - kr) - pad
    ymax = np.maximum(cy_.max(axis=1), my + kr) + pad
    xmin[behind], ymin[behind] = -np.inf, -np.inf
    xmax[behind], ymax[behind] = np.inf, np.inf
    rect = np.empty((n, 4), dtype=np.int64)
    with np.errstate(invalid="ignore"):
        rect[:, 0] = np.clip(np.ceil(xmin - 0.5), 0, W)
        rect[:, 1] = np.clip(np.floor(xmax - 0.5), -1, W - 1)
        rect[:, 2] = np.clip(np.ceil(ymin - 0.5), 0, H)
        rect[:, 3] = np.clip(np.floor(ymax - 0.5), -1, H - 1)
    return rect


def setup_view(scene: Scene, camera: Camera) -> ViewSetup:
    R, tr = camera.rotation, camera.translation
    n = len(scene)
    rot = quat_to_rotmat(scene.rotations) if n else np.zeros((0, 3, 3))
    xc = scene.positions @ R.T + tr
    tuc = rot[:, :, 0] @ R.T
    tvc = rot[:, :, 1] @ R.T
    nc = rot[:, :, 2] @ R.T
    live = np.flatnonzero(xc[:, 2] > NEAR)
    mxy = np.zeros((n, 2))
    rect = np.zeros((n, 4), dtype=np.int64)
    rect[:, 1] = rect[:, 3] = -1
    if len(live):
        sub = xc[live]
        mxy[live, 0] = camera.fx * sub[:, 0] / sub[:, 2] + camera.cx
        mxy[live, 1] = camera.fy * sub[:, 1] / sub[:, 2] + camera.cy
        rect[live] = _footprint(sub, tuc[live], tvc[live], scene.scales[live], camera)
    order = _depth_order(xc[:, 2], live)
    T = K.TILE
    tiles_x = -(-camera.width // T)
    tiles_y = -(-camera.height // T)
    r = rect[order]
    ok = (r[:, 1] >= r[:, 0]) & (r[:, 3] >= r[:, 2])
    order, r = order[ok], r[ok]
    tx0, tx1 = r[:, 0] // T, r[:, 1] // T
    ty0, ty1 = r[:, 2] // T, r[:, 3] // T
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = nx * ny
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(order)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tile = (ty0[owner] + local // nx[owner]) * tiles_x + tx0[owner] + local % nx[owner]
    perm = np.argsort(tile, kind="stable")
    tile_ids = order[owner[perm]].astype(np.int64)
    tile_offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile, minlength=tiles_x * tiles_y), out=tile_offsets[1:])
    return ViewSetup(camera, rot, np.ascontiguousarray(xc), np.ascontiguousarray(tuc),
                     np.ascontiguousarray(tvc), np.ascontiguousarray(nc),
                     np.ascontiguousarray(rot[:, :, 2]), np.ascontiguousarray(scene.scales),
                     np.ascontiguousarray(scene.opacities), np.ascontiguousarray(scene.materials),
                     mxy, rect, tile_offsets, tile_ids)


def forward_view(view: ViewSetup) -> GBuffer:
    c = view.camera
    H, W = c.height, c.width
    mat = np.zeros((H, W, 5))
    alpha = np.zeros((H, W))
    dsum = np.zeros((H, W))
    nsum = np.zeros((H, W, 3))
    dist = np.zeros((H, W))
    count = np.zeros((H, W), dtype=np.int64)
    state = np.zeros((H, W), dtype=np.int64)
    if len(view.tile_ids):
        K.render_forward(*view.kernel_args(), mat, alpha, dsum, nsum, dist, count, state)
    covered = alpha > ALPHA_EPS
    depth = np.where(covered, dsum / np.where(covered, alpha, 1.0), 0.0)
    nn = np.linalg.norm(nsum, axis=-1)
    ok = covered & (nn > 0)
    normal = np.where(ok[..., None], nsum / np.where(ok, nn, 1.0)[..., None], 0.0)
    return GBuffer(mat[..., :3], mat[..., 3:4], mat[..., 4:5], depth[..., None], normal,
                   alpha[..., None], None, nsum, dist, count, state)


def render_fast(scene: Scene, camera: Camera) -> GBuffer:
    """Tiled renderer; matches :func:`render_oracle` to float rounding."""
    return forward_view(setup_view(scene, camera))


render = render_fast
