"""Procedural ground truth: a shell of surfels with spatially varying materials,
rendered from a ring of input views, novel views and held-out views."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, Scene, orbit_camera
from .objectives import ViewTarget
from .rasterizer import render_fast

INPUT_AZIMUTHS = (0.0, 90.0, 180.0, 270.0)
NOVEL_VIEWS = ((45.0, 30.0), (135.0, -30.0), (225.0, 30.0), (315.0, -30.0))
HOLDOUT_VIEWS = ((20.0, 15.0), (110.0, -15.0), (200.0, 15.0), (290.0, -15.0))
SHELL_RADIUS = 0.3


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    y = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - y * y)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)


def _quat_from_z(normals: np.ndarray, spin: np.ndarray) -> np.ndarray:
    """Quaternions rotating +z onto each normal, preceded by a spin about z."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, normals)
    s = np.linalg.norm(axis, axis=1)
    c = normals @ z
    half = np.arctan2(s, c) / 2
    safe = np.where(s[:, None] > 1e-12, axis / np.maximum(s, 1e-12)[:, None], [1.0, 0.0, 0.0])
    align = np.concatenate([np.cos(half)[:, None], safe * np.sin(half)[:, None]], axis=1)
    twist = np.stack([np.cos(spin / 2), np.zeros_like(spin), np.zeros_like(spin), np.sin(spin / 2)], axis=1)
    w1, x1, y1, z1 = align.T
    w2, x2, y2, z2 = twist.T
    q = np.stack([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                  w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                  w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                  w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2], axis=1)
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def synthetic_scene(seed: int = 0, n: int = 32) -> Scene:
    rng = np.random.default_rng(seed)
    dirs = _fibonacci_sphere(n)
    jitter = rng.normal(scale=0.05, size=(n, 3))
    dirs = dirs + jitter
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pos = dirs * SHELL_RADIUS
    x, y, z = dirs.T
    albedo = np.stack([0.5 + 0.4 * x, 0.5 + 0.4 * y, 0.5 - 0.3 * z], axis=1)
    roughness = 0.2 + 0.6 * (y + 1) / 2
    metallic = np.where(x > 0.2, 0.8, 0.1) + 0.05 * z
    return Scene(
        positions=pos,
        scales=rng.uniform(0.08, 0.11, size=(n, 2)),
        rotations=_quat_from_z(dirs, rng.uniform(0, np.pi, n)),
        opacities=np.full(n, 0.9),
        albedo=np.clip(albedo, 0, 1),
        roughness=np.clip(roughness, 0, 1),
        metallic=np.clip(metallic, 0, 1),
    )


@dataclass
class SynthData:
    scene: Scene
    supervision: list[ViewTarget]
    holdout: list[ViewTarget]

    @property
    def cameras(self) -> list[Camera]:
        return [v.camera for v in self.supervision]


def synth_cameras(size: int) -> tuple[list[tuple[str, Camera]], list[tuple[str, Camera]]]:
    kw = dict(width=size, height=size)
    sup = [(f"input_{int(a):03d}", orbit_camera(a, 0.0, **kw)) for a in INPUT_AZIMUTHS]
    sup += [(f"novel_{int(a):03d}", orbit_camera(a, e, **kw)) for a, e in NOVEL_VIEWS]
    hold = [(f"holdout_{int(a):03d}", orbit_camera(a, e, **kw)) for a, e in HOLDOUT_VIEWS]
    return sup, hold


def make_synth(seed: int = 0, size: int = 128) -> SynthData:
    """Ground-truth scene plus renders; only the input ring carries depth/normal/alpha."""
    scene = synthetic_scene(seed)
    sup_cams, hold_cams = synth_cameras(size)
    sup = [ViewTarget.from_gbuffer(render_fast(scene, c), c, geometry=name.startswith("input"), name=name)
           for name, c in sup_cams]
    hold = [ViewTarget.from_gbuffer(render_fast(scene, c), c, geometry=False, name=name)
            for name, c in hold_cams]
    return SynthData(scene, sup, hold)
