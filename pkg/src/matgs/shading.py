"""Deferred relighting of material G-buffers under equirectangular environment
maps: Cook-Torrance microfacet BRDF integrated by deterministic texel quadrature."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numba as nb
import numpy as np
from scipy import ndimage

from .core import Camera, ValidationError, camera_ray_dirs
from .rasterizer import GBuffer

UNIT_TOL = 1e-5
SPEC_DENOM_MIN = 1e-4
FOREGROUND_ALPHA = 0.5


@dataclass(frozen=True, eq=False)
class EnvironmentMap:
    """Latitude-longitude radiance; row 0 looks up (+y), column 0 starts at +z."""
    radiance: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.radiance, dtype=np.float64)
        if r.ndim != 3 or r.shape[2] != 3:
            raise ValidationError(f"environment radiance must be HxWx3, got {r.shape}")
        if r.shape[1] != 2 * r.shape[0]:
            raise ValidationError(f"environment width {r.shape[1]} must be twice its height {r.shape[0]}")
        if not np.all(np.isfinite(r)):
            raise ValidationError("environment has non-finite texels")
        if np.any(r < 0):
            raise ValidationError("environment has negative radiance")
        r = r.copy()
        r.flags.writeable = False
        object.__setattr__(self, "radiance", r)

    @classmethod
    def uniform(cls, height: int, value=1.0) -> "EnvironmentMap":
        return cls(np.broadcast_to(np.asarray(value, dtype=np.float64), (height, 2 * height, 3)).copy())

    @property
    def height(self) -> int:
        return self.radiance.shape[0]

    @property
    def width(self) -> int:
        return self.radiance.shape[1]

    def scaled(self, s: float) -> "EnvironmentMap":
        return EnvironmentMap(self.radiance * s)

    @cached_property
    def _nodes(self) -> tuple[np.ndarray, np.ndarray]:
        h, w = self.height, self.width
        theta = np.pi * (np.arange(h) + 0.5) / h
        phi = 2 * np.pi * (np.arange(w) + 0.5) / w
        st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
        dirs = np.stack(np.broadcast_arrays(st * np.sin(phi), ct, st * np.cos(phi)), axis=-1)
        domega = np.broadcast_to(((2 * np.pi / w) * (np.pi / h) * np.sin(theta))[:, None], (h, w))
        return dirs, domega

    def directions(self) -> np.ndarray:
        return self._nodes[0]

    def solid_angles(self) -> np.ndarray:
        return self._nodes[1]

    def lookup(self, dirs: np.ndarray) -> np.ndarray:
        """Nearest-texel radiance along unit directions (..., 3)."""
        d = np.asarray(dirs, dtype=np.float64)
        theta = np.arccos(np.clip(d[..., 1], -1.0, 1.0))
        phi = np.mod(np.arctan2(d[..., 0], d[..., 2]), 2 * np.pi)
        ty = np.clip((theta / np.pi * self.height).astype(np.int64), 0, self.height - 1)
        tx = np.mod((phi / (2 * np.pi) * self.width).astype(np.int64), self.width)
        return self.radiance[ty, tx]

    def resampled(self, height: int) -> "EnvironmentMap":
        """Area-average (or interpolate) to a new quadrature resolution."""
        if height == self.height:
            return self
        if height <= 0:
            raise ValidationError("environment resolution must be positive")
        if self.height % height == 0:
            f = self.height // height
            r = self.radiance.reshape(height, f, 2 * height, f, 3).mean(axis=(1, 3))
        else:
            zoom = height / self.height
            r = np.maximum(ndimage.zoom(self.radiance, (zoom, zoom, 1), order=1, mode="nearest", grid_mode=True), 0)
        return EnvironmentMap(r)


def texel_direction_and_solid_angle(env: EnvironmentMap, tx: int, ty: int) -> tuple[np.ndarray, float]:
    if not (0 <= tx < env.width and 0 <= ty < env.height):
        raise IndexError(f"texel ({tx}, {ty}) outside {env.width}x{env.height} map")
    return env.directions()[ty, tx].copy(), float(env.solid_angles()[ty, tx])


@dataclass(frozen=True)
class BRDFConfig:
    f0_dielectric: float = 0.04
    min_roughness_clamp: float = 0.03
    diffuse_only: bool = False

    def __post_init__(self):
        for name in ("f0_dielectric", "min_roughness_clamp"):
            if not 0 < getattr(self, name) < 1:
                raise ValidationError(f"{name} must lie in (0, 1)")


@dataclass(frozen=True)
class MaterialSample:
    albedo: tuple[float, float, float]
    roughness: float
    metallic: float
    normal: tuple[float, float, float]
    view: tuple[float, float, float]

    def __post_init__(self):
        a = np.asarray(self.albedo, dtype=np.float64)
        if a.shape != (3,) or np.any((a < 0) | (a > 1)):
            raise ValidationError("albedo must be a 3-vector in [0, 1]")
        for name in ("roughness", "metallic"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValidationError(f"{name} must lie in [0, 1]")
        for name in ("normal", "view"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (3,) or abs(np.linalg.norm(v) - 1) > UNIT_TOL:
                raise ValidationError(f"{name} must be a unit 3-vector")


def ggx_d(n_dot_h, roughness, cfg: BRDFConfig = BRDFConfig()):
    rho = np.maximum(roughness, cfg.min_roughness_clamp)
    a2 = rho ** 4
    return a2 / (np.pi * (n_dot_h * n_dot_h * (a2 - 1) + 1) ** 2)


def fresnel_schlick(h_dot_v, f0):
    f0 = np.asarray(f0, dtype=np.float64)
    return f0 + (1 - f0) * (1 - h_dot_v) ** 5


def smith_g(n_dot_l, n_dot_v, roughness):
    k = roughness * roughness / 2

    def g1(x):
        return x / (x * (1 - k) + k)

    return g1(n_dot_l) * g1(n_dot_v)


def base_reflectance(albedo, metallic, cfg: BRDFConfig = BRDFConfig()):
    return cfg.f0_dielectric * (1 - metallic) + np.asarray(albedo) * metallic


def brdf_eval(sample: MaterialSample, l, cfg: BRDFConfig = BRDFConfig()) -> np.ndarray:
    n = np.asarray(sample.normal, dtype=np.float64)
    v = np.asarray(sample.view, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    a = np.asarray(sample.albedo, dtype=np.float64)
    nl, nv = float(n @ l), float(n @ v)
    if nl <= 0 or nv <= 0:
        return np.zeros(3)
    diffuse = (1 - sample.metallic) * a / np.pi
    if cfg.diffuse_only:
        return diffuse
    h = l + v
    h /= np.linalg.norm(h)
    rho = max(sample.roughness, cfg.min_roughness_clamp)
    D = ggx_d(max(float(n @ h), 0.0), rho, cfg)
    F = fresnel_schlick(max(float(h @ v), 0.0), base_reflectance(a, sample.metallic, cfg))
    G = smith_g(nl, nv, rho)
    return diffuse + D * F * G / max(4 * nl * nv, SPEC_DENOM_MIN)


@nb.njit(cache=True, parallel=True)
def _integrate(albedo, rough, metal, normals, views, dirs, rad, domega, f0d, rmin, diffuse_only, out):
    for p in nb.prange(albedo.shape[0]):
        n = normals[p]
        v = views[p]
        nv = n[0] * v[0] + n[1] * v[1] + n[2] * v[2]
        if nv <= 0.0:
            continue
        rho = max(rough[p], rmin)
        a2 = rho ** 4
        k = rho * rho / 2
        g1v = nv / (nv * (1 - k) + k)
        m = metal[p]
        kd = (1 - m) / math.pi
        f0 = np.empty(3)
        for c in range(3):
            f0[c] = f0d * (1 - m) + albedo[p, c] * m
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        for t in range(dirs.shape[0]):
            l = dirs[t]
            nl = n[0] * l[0] + n[1] * l[1] + n[2] * l[2]
            if nl <= 0.0:
                continue
            w = nl * domega[t]
            f = np.empty(3)
            for c in range(3):
                f[c] = kd * albedo[p, c]
            if not diffuse_only:
                hx = l[0] + v[0]
                hy = l[1] + v[1]
                hz = l[2] + v[2]
                hn = math.sqrt(hx * hx + hy * hy + hz * hz)
                nh = max((n[0] * hx + n[1] * hy + n[2] * hz) / hn, 0.0)
                hv = max((hx * v[0] + hy * v[1] + hz * v[2]) / hn, 0.0)
                q = nh * nh * (a2 - 1) + 1
                D = a2 / (math.pi * q * q)
                G = g1v * nl / (nl * (1 - k) + k)
                s = D * G / max(4 * nl * nv, SPEC_DENOM_MIN)
                fr = (1 - hv) ** 5
                for c in range(3):
                    f[c] += s * (f0[c] + (1 - f0[c]) * fr)
            acc0 += rad[t, 0] * f[0] * w
            acc1 += rad[t, 1] * f[1] * w
            acc2 += rad[t, 2] * f[2] * w
        out[p, 0] = acc0
        out[p, 1] = acc1
        out[p, 2] = acc2


def integrate_many(albedo, roughness, metallic, normals, views, env: EnvironmentMap,
                   cfg: BRDFConfig = BRDFConfig()) -> np.ndarray:
    """Outgoing radiance for P shading points (arrays with leading axis P)."""
    P = len(albedo)
    out = np.zeros((P, 3))
    if P == 0:
        return out
    _integrate(np.ascontiguousarray(albedo, dtype=np.float64).reshape(P, 3),
               np.ascontiguousarray(roughness, dtype=np.float64).reshape(P),
               np.ascontiguousarray(metallic, dtype=np.float64).reshape(P),
               np.ascontiguousarray(normals, dtype=np.float64).reshape(P, 3),
               np.ascontiguousarray(views, dtype=np.float64).reshape(P, 3),
               np.ascontiguousarray(env.directions().reshape(-1, 3)),
               np.ascontiguousarray(env.radiance.reshape(-1, 3)),
               np.ascontiguousarray(env.solid_angles().reshape(-1)),
               cfg.f0_dielectric, cfg.min_roughness_clamp, cfg.diffuse_only, out)
    return out


def integrate_pixel(sample: MaterialSample, env: EnvironmentMap, cfg: BRDFConfig = BRDFConfig()) -> np.ndarray:
    return integrate_many(np.asarray(sample.albedo)[None], [sample.roughness], [sample.metallic],
                          np.asarray(sample.normal)[None], np.asarray(sample.view)[None], env, cfg)[0]


@dataclass
class RelightResult:
    linear: np.ndarray      # (H, W, 3) composite over the environment
    display: np.ndarray     # (H, W, 3) uint8
    foreground: np.ndarray  # (H, W, 3) shaded radiance, zero outside the mask
    mask: np.ndarray        # (H, W) alpha > 0.5


def relight(gbuffer: GBuffer, camera: Camera, env: EnvironmentMap, cfg: BRDFConfig = BRDFConfig(),
            env_res: Optional[int] = None) -> RelightResult:
    """Shade every covered pixel and composite over the environment seen along each view ray."""
    H, W = gbuffer.shape
    if (H, W) != (camera.height, camera.width):
        raise ValidationError(f"G-buffer is {W}x{H} but camera is {camera.width}x{camera.height}")
    quad = env.resampled(env_res) if env_res else env
    alpha = np.asarray(gbuffer.alpha).reshape(H, W)
    mask = alpha > FOREGROUND_ALPHA
    rays = camera_ray_dirs(camera) @ camera.rotation  # camera to world
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    fg = np.zeros((H, W, 3))
    if mask.any():
        n = np.asarray(gbuffer.normal)[mask]
        n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
        v = -rays[mask]
        n = np.where(np.sum(n * v, axis=-1, keepdims=True) < 0, -n, n)
        fg[mask] = integrate_many(np.asarray(gbuffer.albedo)[mask],
                                  np.asarray(gbuffer.roughness).reshape(H, W)[mask],
                                  np.asarray(gbuffer.metallic).reshape(H, W)[mask], n, v, quad, cfg)
    linear = alpha[..., None] * fg + (1 - alpha[..., None]) * env.lookup(rays)
    return RelightResult(linear, tonemap(linear), fg, mask)


def tonemap(linear) -> np.ndarray:
    x = np.asarray(linear, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("tonemap input must be non-negative")
    return np.floor(255 * np.clip(x, 0, 1) ** (1 / 2.2) + 0.5).astype(np.uint8)
