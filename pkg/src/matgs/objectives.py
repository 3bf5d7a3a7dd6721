"""Training objectives with analytic gradients.

The total loss combines image reconstruction (MSE + SSIM on albedo,
roughness and metallic), masked depth/normal supervision, depth distortion
and normal consistency:

    l_total = l_image + gamma_d * l_distortion + gamma_n * l_normal + l_geometry

Gradients flow through blending weights, ray-splat intersections and the
depth-derived normals; the depth sort is treated as locally constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from . import _kernels as K
from .core import Camera, Scene, camera_ray_dirs, quat_to_rotmat
from .rasterizer import ALPHA_EPS, GBuffer, SplatSample, forward_view, setup_view

PARAM_CLASSES = ("position", "scale", "rotation", "opacity", "albedo", "roughness", "metallic")


@dataclass(frozen=True)
class LossConfig:
    gamma_d: float = 1000.0
    gamma_n: float = 0.2
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    dynamic_range: float = 1.0
    mask_threshold: float = 0.5

    def __post_init__(self):
        if self.gamma_d < 0 or self.gamma_n < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ssim_window % 2 != 1 or self.ssim_window < 1:
            raise ValueError("ssim_window must be a positive odd integer")


@dataclass(eq=False)
class ViewTarget:
    """Supervision for one view; geometry fields only for input views."""

    camera: Camera
    albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray
    depth: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    name: str = ""

    @property
    def has_geometry(self) -> bool:
        return self.depth is not None and self.normal is not None and self.alpha is not None

    @classmethod
    def from_gbuffer(cls, gb: GBuffer, camera: Camera, geometry: bool = True, name: str = "") -> "ViewTarget":
        if geometry:
            return cls(camera, gb.albedo, gb.roughness, gb.metallic, gb.depth, gb.normal, gb.alpha, name)
        return cls(camera, gb.albedo, gb.roughness, gb.metallic, name=name)


@dataclass(eq=False)
class SceneGradients:
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: np.ndarray
    albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SceneGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 2)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros((n, 3)), np.zeros(n), np.zeros(n))

    def __getitem__(self, name: str) -> np.ndarray:
        return getattr(self, name)


@dataclass(eq=False)
class LossReport:
    l_image: float
    l_geometry: float
    l_distortion: float
    l_normal: float
    l_total: float
    gamma_d: float
    gamma_n: float
    gradients: Optional[SceneGradients] = None
    renders: list[GBuffer] = field(default_factory=list)

    def composition_error(self) -> float:
        recon = self.l_image + self.gamma_d * self.l_distortion + self.gamma_n * self.l_normal + self.l_geometry
        return abs(self.l_total - recon)


# ---------------------------------------------------------------- image terms

def _check_shapes(pred, gt):
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"shape mismatch: {np.shape(pred)} vs {np.shape(gt)}")


def mse(pred, gt) -> float:
    _check_shapes(pred, gt)
    return float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)) ** 2))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    out = correlate1d(img, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _ssim_terms(pred, gt, cfg: LossConfig, want_grad: bool):
    x, y = _as_hwc(pred), _as_hwc(gt)
    win = gaussian_window(cfg.ssim_window, cfg.ssim_sigma)
    c1 = (cfg.ssim_k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.ssim_k2 * cfg.dynamic_range) ** 2
    mx, my = _blur(x, win), _blur(y, win)
    exx, eyy, exy = _blur(x * x, win), _blur(y * y, win), _blur(x * y, win)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    n1, n2 = 2 * mx * my + c1, 2 * cxy + c2
    d1, d2 = mx * mx + my * my + c1, vx + vy + c2
    smap = n1 * n2 / (d1 * d2)
    value = float(smap.mean())
    if not want_grad:
        return value, None
    scale = 1.0 / smap.size
    f_m = (2 * my * n2 / (d1 * d2) - smap * 2 * mx / d1) * scale
    f_v = -smap / d2 * scale
    f_c = 2 * n1 / (d1 * d2) * scale
    # fold the variance/covariance dependence on the means into the mean partial
    a = f_m - 2 * mx * f_v - my * f_c
    grad = _blur(a, win) + 2 * x * _blur(f_v, win) + y * _blur(f_c, win)
    return value, grad.reshape(np.shape(pred))


def ssim(pred, gt, cfg: LossConfig = LossConfig()) -> float:
    """Mean SSIM over pixels and channels (zero-padded Gaussian window)."""
    _check_shapes(pred, gt)
    return _ssim_terms(pred, gt, cfg, False)[0]


def ssim_loss(pred, gt, cfg: LossConfig = LossConfig()) -> float:
    return 1.0 - ssim(pred, gt, cfg)


MATERIAL_CHANNELS = (("albedo", slice(0, 3)), ("roughness", slice(3, 4)), ("metallic", slice(4, 5)))


def _image_terms(pred_mat: np.ndarray, target, cfg: LossConfig, weights=(1.0, 1.0, 1.0)):
    """Sum over material images of mse + ssim_loss, with gradient w.r.t. the (H, W, 5) stack."""
    total = 0.0
    grad = np.zeros_like(pred_mat)
    for (name, sl), w in zip(MATERIAL_CHANNELS, weights):
        if w == 0.0:
            continue
        p = pred_mat[..., sl]
        g = np.asarray(getattr(target, name), dtype=np.float64).reshape(p.shape)
        diff = p - g
        s_val, s_grad = _ssim_terms(p, g, cfg, True)
        total += w * (float(np.mean(diff ** 2)) + 1.0 - s_val)
        grad[..., sl] += w * (2.0 * diff / diff.size - s_grad)
    return total, grad


def image_loss(pred: GBuffer, gt, cfg: LossConfig = LossConfig()) -> float:
    """Sum of (mse + ssim_loss) over albedo, roughness and metallic images."""
    total = 0.0
    for name, _ in MATERIAL_CHANNELS:
        p, g = getattr(pred, name), getattr(gt, name)
        _check_shapes(p, g)
        total += mse(p, g) + ssim_loss(p, g, cfg)
    return total


def _geometry_terms(depth, normal, gt_depth, gt_normal, gt_alpha, cfg: LossConfig):
    depth = np.asarray(depth, dtype=np.float64).reshape(np.shape(depth)[:2])
    gt_depth = np.asarray(gt_depth, dtype=np.float64).reshape(depth.shape)
    gt_alpha = np.asarray(gt_alpha, dtype=np.float64).reshape(depth.shape)
    gt_normal = np.asarray(gt_normal, dtype=np.float64)
    mask = gt_alpha > cfg.mask_threshold
    m = int(mask.sum())
    g_depth = np.zeros_like(depth)
    g_normal = np.zeros_like(normal)
    if m == 0:
        return 0.0, g_depth, g_normal
    dd = np.where(mask, depth - gt_depth, 0.0)
    dn = np.where(mask[..., None], normal - gt_normal, 0.0)
    value = float(np.sum(dd ** 2) / m + np.sum(dn ** 2) / (3 * m))
    return value, 2.0 * dd / m, 2.0 * dn / (3 * m)


def geometry_loss(pred: GBuffer, gt_depth, gt_normal, gt_alpha, cfg: LossConfig = LossConfig()) -> float:
    """Depth and normal MSE over ground-truth foreground pixels (0 for an empty mask)."""
    _check_shapes(np.asarray(pred.depth).reshape(pred.shape), np.asarray(gt_depth).reshape(np.shape(gt_depth)[:2]))
    _check_shapes(pred.normal, gt_normal)
    return _geometry_terms(pred.depth, pred.normal, gt_depth, gt_normal, gt_alpha, cfg)[0]


# ------------------------------------------------------------ ray regularizers

def _weights_depths(samples):
    w = np.array([s.weight for s in samples], dtype=np.float64)
    z = np.array([s.depth for s in samples], dtype=np.float64)
    return w, z


def distortion_oracle(samples: Sequence[SplatSample]) -> float:
    """Sum over ordered pairs of w_i w_j |z_i - z_j| by a double loop."""
    total = 0.0
    for a in samples:
        for b in samples:
            total += a.weight * b.weight * abs(a.depth - b.depth)
    return total


def distortion_incremental(samples: Sequence[SplatSample], counter: Optional[dict] = None) -> float:
    """Single pass over depth-sorted samples using running sums of w and w*z."""
    acc_w = 0.0
    acc_wz = 0.0
    total = 0.0
    prev = -math.inf
    for s in samples:
        if s.depth < prev:
            raise ValueError("distortion_incremental requires depth-sorted samples")
        prev = s.depth
        total += s.weight * (s.depth * acc_w - acc_wz)
        acc_w += s.weight
        acc_wz += s.weight * s.depth
        if counter is not None:
            counter["steps"] = counter.get("steps", 0) + 1
    return 2.0 * total


def normal_consistency(samples: Sequence[SplatSample], N) -> float:
    """Sum of w_i (1 - n_i . N) over samples carrying a normal."""
    N = np.asarray(N, dtype=np.float64)
    total = 0.0
    for s in samples:
        if s.weight == 0.0:
            continue
        total += s.weight * (1.0 - float(np.dot(s.normal, N)))
    return total


def _backproject(depth: np.ndarray, camera: Camera) -> np.ndarray:
    return camera_ray_dirs(camera) * depth[..., None]


def _depth_normal_parts(depth, alpha, camera: Camera):
    depth = np.asarray(depth, dtype=np.float64).reshape(camera.height, camera.width)
    alpha = np.asarray(alpha, dtype=np.float64).reshape(depth.shape)
    H, W = depth.shape
    pts = _backproject(depth, camera)
    fg = (depth > 0) & (alpha > ALPHA_EPS)
    valid = np.zeros((H, W), dtype=bool)
    cross = np.zeros((H, W, 3))
    if H >= 3 and W >= 3:
        c = fg[1:-1, 1:-1] & fg[1:-1, 2:] & fg[1:-1, :-2] & fg[2:, 1:-1] & fg[:-2, 1:-1]
        dx = pts[1:-1, 2:] - pts[1:-1, :-2]
        dy = pts[2:, 1:-1] - pts[:-2, 1:-1]
        cr = np.cross(dx, dy)
        c &= np.linalg.norm(cr, axis=-1) > 1e-30
        valid[1:-1, 1:-1] = c
        cross[1:-1, 1:-1] = cr
    norm = np.linalg.norm(cross, axis=-1)
    N = np.where(valid[..., None], -cross / np.where(valid, norm, 1.0)[..., None], 0.0)
    return N, valid, cross, norm, pts


def normal_from_depth(depth, alpha, camera: Camera) -> np.ndarray:
    """Camera-space normals from central differences of back-projected depth.

    Normals face the camera (negative z for a fronto-parallel plane). Border
    pixels and pixels lacking a foreground 4-neighbourhood get a zero normal.
    """
    return _depth_normal_parts(depth, alpha, camera)[0]


def _normal_from_depth_backward(g_N, valid, cross, norm, pts, camera: Camera) -> np.ndarray:
    """Gradient of a loss w.r.t. the depth image given dL/dN (camera space)."""
    H, W = valid.shape
    g_depth = np.zeros((H, W))
    if not valid.any():
        return g_depth
    safe = np.where(valid, norm, 1.0)[..., None]
    c_hat = cross / safe
    g_ch = -np.where(valid[..., None], g_N, 0.0)
    g_c = (g_ch - c_hat * np.sum(c_hat * g_ch, axis=-1, keepdims=True)) / safe
    g_c[~valid] = 0.0
    g_pts = np.zeros((H, W, 3))
    gc = g_c[1:-1, 1:-1]
    dx = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy = pts[2:, 1:-1] - pts[:-2, 1:-1]
    g_dx = np.cross(dy, gc)
    g_dy = np.cross(gc, dx)
    g_pts[1:-1, 2:] += g_dx
    g_pts[1:-1, :-2] -= g_dx
    g_pts[2:, 1:-1] += g_dy
    g_pts[:-2, 1:-1] -= g_dy
    return np.sum(g_pts * camera_ray_dirs(camera), axis=-1)


# ------------------------------------------------------------------ assembly

def _quat_backward(q: np.ndarray, g_rot: np.ndarray) -> np.ndarray:
    """dL/dq for R(q/|q|) given dL/dR, both batched."""
    nq = np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = (q / nq).T
    G = g_rot
    gw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2]
              - y * G[:, 2, 0] + x * G[:, 2, 1])
    gx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1]
              - w * G[:, 1, 2] + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    gy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0]
              + z * G[:, 1, 2] - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    gz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0]
              - 2 * z * G[:, 1, 1] + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    gq = np.stack([gw, gx, gy, gz], axis=1)
    qh = q / nq
    return (gq - qh * np.sum(qh * gq, axis=1, keepdims=True)) / nq


@dataclass
class _ViewEval:
    gbuffer: GBuffer
    l_image: float
    l_geometry: float
    l_distortion: float
    l_normal: float


def _evaluate_view(scene: Scene, target: ViewTarget, cfg: LossConfig, n_views: int, n_geo: int,
                   weights, grads: Optional[SceneGradients]) -> _ViewEval:
    cam = target.camera
    view = setup_view(scene, cam)
    gb = forward_view(view)
    H, W = cam.height, cam.width
    npx = H * W
    alpha = gb.alpha[..., 0]
    depth = gb.depth[..., 0]
    want = grads is not None

    l_img, g_mat = _image_terms(gb.material, target, cfg, weights)
    l_img /= n_views
    g_mat /= n_views
    g_alpha = np.zeros((H, W))
    g_depth = np.zeros((H, W))
    g_nout = np.zeros((H, W, 3))

    l_geo = 0.0
    if target.has_geometry and n_geo:
        l_geo, gd, gn = _geometry_terms(depth, gb.normal, target.depth, target.normal, target.alpha, cfg)
        l_geo /= n_geo
        g_depth += gd / n_geo
        g_nout += gn / n_geo

    l_dist = float(gb.distortion.sum()) / (npx * n_views)

    N_cam, valid, cross, norm, pts = _depth_normal_parts(depth, alpha, cam)
    R = cam.rotation
    N_w = N_cam @ R
    nsum = gb.normal_sum
    l_norm = float(np.sum(np.where(valid, alpha - np.sum(nsum * N_w, axis=-1), 0.0))) / (npx * n_views)

    if not want:
        return _ViewEval(gb, l_img, l_geo, l_dist, l_norm)

    cn = cfg.gamma_n / (npx * n_views)
    g_alpha += np.where(valid, cn, 0.0)
    g_nsum = -np.where(valid[..., None], N_w, 0.0) * cn
    g_Nw = -np.where(valid[..., None], nsum, 0.0) * cn
    g_depth += _normal_from_depth_backward(g_Nw @ R.T, valid, cross, norm, pts, cam)

    covered = alpha > ALPHA_EPS
    safe_a = np.where(covered, alpha, 1.0)
    g_dsum = np.where(covered, g_depth / safe_a, 0.0)
    g_alpha -= np.where(covered, g_depth * depth / safe_a, 0.0)
    nn = np.linalg.norm(nsum, axis=-1)
    okn = covered & (nn > 0)
    n_out = gb.normal
    proj = g_nout - n_out * np.sum(n_out * g_nout, axis=-1, keepdims=True)
    g_nsum += np.where(okn[..., None], proj / np.where(okn, nn, 1.0)[..., None], 0.0)

    w_dist = np.full((H, W), cfg.gamma_d / (npx * n_views))
    n = len(scene)
    B = -(-H // K.TILE)
    acc = [np.zeros((B, n, 3)) for _ in range(5)]
    acc_s = np.zeros((B, n, 2))
    acc_op = np.zeros((B, n))
    acc_mat = np.zeros((B, n, 5))
    if len(view.tile_ids):
        K.render_backward(*view.kernel_args(), np.ascontiguousarray(g_mat), g_alpha, g_dsum,
                          np.ascontiguousarray(g_nsum), w_dist, *acc, acc_s, acc_op, acc_mat)
    g_xc, g_tu, g_tv, g_nc, g_nw = (a.sum(axis=0) for a in acc)
    grads.position += g_xc @ R
    g_rot = np.stack([g_tu @ R, g_tv @ R, g_nc @ R + g_nw], axis=2)
    grads.rotation += _quat_backward(np.asarray(scene.rotations), g_rot)
    grads.scale += acc_s.sum(axis=0)
    grads.opacity += acc_op.sum(axis=0)
    gm = acc_mat.sum(axis=0)
    grads.albedo += gm[:, :3]
    grads.roughness += gm[:, 3]
    grads.metallic += gm[:, 4]
    return _ViewEval(gb, l_img, l_geo, l_dist, l_norm)


def total_loss(scene: Scene, supervision: Sequence[ViewTarget], cfg: LossConfig = LossConfig(), *,
               with_gradients: bool = True, channel_weights=(1.0, 1.0, 1.0),
               keep_renders: bool = False) -> LossReport:
    """Render every supervised view and evaluate the full objective.

    Image terms average over all views; geometry terms average over views
    that carry depth/normal/alpha targets. ``channel_weights`` scales the
    albedo, roughness and metallic image terms.
    """
    views = list(supervision)
    if not views:
        raise ValueError("supervision is empty")
    for v in views:
        for name in ("albedo", "roughness", "metallic"):
            if getattr(v, name) is None:
                raise ValueError(f"view {v.name or '?'} is missing the {name} channel")
    n_geo = sum(v.has_geometry for v in views)
    grads = SceneGradients.zeros(len(scene)) if with_gradients else None
    parts = [_evaluate_view(scene, v, cfg, len(views), n_geo, channel_weights, grads) for v in views]
    l_image = sum(p.l_image for p in parts)
    l_geometry = sum(p.l_geometry for p in parts)
    l_d = sum(p.l_distortion for p in parts)
    l_n = sum(p.l_normal for p in parts)
    total = l_image + cfg.gamma_d * l_d + cfg.gamma_n * l_n + l_geometry
    report = LossReport(l_image, l_geometry, l_d, l_n, total, cfg.gamma_d, cfg.gamma_n, grads,
                        [p.gbuffer for p in parts] if keep_renders else [])
    assert report.composition_error() <= 1e-9 * max(1.0, abs(total))
    return report


# -------------------------------------------------------------- grad check

@dataclass
class GradCheckResult:
    max_error: float
    per_class: dict[str, float]
    crossings: int
    analytic: SceneGradients
    numeric: SceneGradients

    def __float__(self) -> float:
        return self.max_error


def _state_signature(scene: Scene, supervision, cfg: LossConfig):
    """Discrete configuration of the objective: sort orders, branch choices and masks."""
    sig = []
    for v in supervision:
        view = setup_view(scene, v.camera)
        gb = forward_view(view)
        alpha = gb.alpha[..., 0]
        _, valid, *_ = _depth_normal_parts(gb.depth, alpha, v.camera)
        sig.append((view.tile_ids.tobytes(), gb.branch_state.tobytes(), (alpha > ALPHA_EPS).tobytes(),
                    valid.tobytes()))
    return sig


def _with_param(scene: Scene, cls: str, i: int, j: int, value: float) -> Scene:
    attr = {"position": "positions", "scale": "scales", "rotation": "rotations",
            "opacity": "opacities", "albedo": "albedo", "roughness": "roughness",
            "metallic": "metallic"}[cls]
    arr = np.array(getattr(scene, attr))
    if arr.ndim == 1:
        arr[i] = value
    else:
        arr[i, j] = value
    return scene.replace(**{attr: arr})


def _param_value(scene: Scene, cls: str, i: int, j: int) -> float:
    attr = {"position": "positions", "scale": "scales", "rotation": "rotations",
            "opacity": "opacities", "albedo": "albedo", "roughness": "roughness",
            "metallic": "metallic"}[cls]
    arr = getattr(scene, attr)
    return float(arr[i] if arr.ndim == 1 else arr[i, j])


def grad_check(scene: Scene, supervision: Sequence[ViewTarget], cfg: LossConfig = LossConfig(),
               epsilon: float = 1e-4) -> GradCheckResult:
    """Compare analytic gradients with central differences on every parameter.

    Relative error per entry is |g_a - g_fd| / max(1e-6, |g_a| + |g_fd|).
    ``crossings`` counts entries whose +/- epsilon probes changed the
    discrete configuration (depth order, blending branch, masks); their
    finite differences straddle a discontinuity and are excluded.
    """
    analytic = total_loss(scene, supervision, cfg).gradients
    numeric = SceneGradients.zeros(len(scene))
    base_sig = _state_signature(scene, supervision, cfg)
    per_class = {c: 0.0 for c in PARAM_CLASSES}
    crossings = 0
    for cls in PARAM_CLASSES:
        ga, gn = analytic[cls], numeric[cls]
        for i in range(len(scene)):
            for j in range(1 if ga.ndim == 1 else ga.shape[1]):
                x0 = _param_value(scene, cls, i, j)
                plus = _with_param(scene, cls, i, j, x0 + epsilon)
                minus = _with_param(scene, cls, i, j, x0 - epsilon)
                if (_state_signature(plus, supervision, cfg) != base_sig
                        or _state_signature(minus, supervision, cfg) != base_sig):
                    crossings += 1
                    continue
                lp = total_loss(plus, supervision, cfg, with_gradients=False).l_total
                lm = total_loss(minus, supervision, cfg, with_gradients=False).l_total
                fd = (lp - lm) / (2 * epsilon)
                a = float(ga[i] if ga.ndim == 1 else ga[i, j])
                if ga.ndim == 1:
                    gn[i] = fd
                else:
                    gn[i, j] = fd
                err = abs(a - fd) / max(1e-6, abs(a) + abs(fd))
                per_class[cls] = max(per_class[cls], err)
    return GradCheckResult(max(per_class.values()), per_class, crossings, analytic, numeric)


# ------------------------------------------------------------------ metrics

def psnr(pred, gt, mask=None) -> float:
    """PSNR with peak 1.0; ``inf`` when the MSE is below 1e-12."""
    _check_shapes(pred, gt)
    diff = (np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)) ** 2
    err = float(diff.mean()) if mask is None else float(diff[mask].mean())
    return math.inf if err < 1e-12 else 10.0 * math.log10(1.0 / err)
