"""Independent reference formulas used by the shading tests."""
import numpy as np


def brdf_reference(albedo, rho, metal, n, v, ls, f0_dielectric=0.04, rho_min=0.03, diffuse_only=False):
    """Metallic-roughness Cook-Torrance, vectorized over light directions ``ls`` (K, 3)."""
    albedo = np.asarray(albedo, dtype=float)
    n, v, ls = np.asarray(n, float), np.asarray(v, float), np.atleast_2d(np.asarray(ls, float))
    nl = ls @ n
    nv = float(n @ v)
    out = np.zeros((len(ls), 3))
    ok = (nl > 0) & (nv > 0)
    out[ok] = (1 - metal) * albedo / np.pi
    if diffuse_only or not ok.any():
        return out
    r = max(rho, rho_min)
    alpha = r * r
    h = ls[ok] + v
    h /= np.linalg.norm(h, axis=1, keepdims=True)
    nh = np.maximum(h @ n, 0)
    hv = np.maximum(h @ v, 0)
    D = alpha ** 2 / (np.pi * (nh ** 2 * (alpha ** 2 - 1) + 1) ** 2)
    f0 = f0_dielectric * (1 - metal) + albedo * metal
    F = f0[None] + (1 - f0[None]) * ((1 - hv) ** 5)[:, None]
    k = r * r / 2
    G = (nl[ok] / (nl[ok] * (1 - k) + k)) * (nv / (nv * (1 - k) + k))
    out[ok] += (D * G / np.maximum(4 * nl[ok] * nv, 1e-4))[:, None] * F
    return out


def sphere_nodes(H):
    """Equirect texel centres and solid angles; theta from +y, phi from +z toward +x."""
    W = 2 * H
    theta = np.pi * (np.arange(H) + 0.5) / H
    phi = 2 * np.pi * (np.arange(W) + 0.5) / W
    T, P = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(T) * np.sin(P), np.cos(T), np.sin(T) * np.cos(P)], -1).reshape(-1, 3)
    dw = ((2 * np.pi / W) * (np.pi / H) * np.sin(T)).reshape(-1)
    return dirs, dw


def radiance_reference(albedo, rho, metal, n, v, H, radiance=None, **kw):
    """Outgoing radiance by direct texel summation; ``radiance`` is (H, 2H, 3) or uniform 1."""
    dirs, dw = sphere_nodes(H)
    L = np.ones((len(dirs), 3)) if radiance is None else np.asarray(radiance, float).reshape(-1, 3)
    f = brdf_reference(albedo, rho, metal, n, v, dirs, **kw)
    cos = np.maximum(dirs @ np.asarray(n, float), 0)
    return (L * f * (cos * dw)[:, None]).sum(0)
