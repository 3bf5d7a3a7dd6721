import warnings

import numpy as np
import pytest

from matgs.core import Scene, orbit_camera

warnings.filterwarnings("ignore", category=DeprecationWarning)


def quat_mul(a, b):
    w1, x1, y1, z1 = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    w2, x2, y2, z2 = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                     w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                     w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                     w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2], axis=-1)


def facing_quats(rng, n, max_tilt_deg=40.0):
    """Normals tilted at most ``max_tilt_deg`` away from +z, with random spin."""
    tilt = np.radians(rng.uniform(0, max_tilt_deg, n))
    phi = rng.uniform(0, 2 * np.pi, n)
    spin = rng.uniform(0, 2 * np.pi, n)
    axis = np.stack([np.cos(phi), np.sin(phi), np.zeros(n)], 1)
    q1 = np.concatenate([np.cos(tilt / 2)[:, None], np.sin(tilt / 2)[:, None] * axis], 1)
    q2 = np.stack([np.cos(spin / 2), np.zeros(n), np.zeros(n), np.sin(spin / 2)], 1)
    return quat_mul(q1, q2)


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_scene(rng, n, spread=0.3, scale=(0.04, 0.15)):
    """Unstructured scene: arbitrary orientations, materials and opacities."""
    return Scene(rng.uniform(-spread, spread, (n, 3)), rng.uniform(*scale, (n, 2)), random_quats(rng, n),
                 rng.uniform(0.05, 1.0, n), rng.uniform(0, 1, (n, 3)), rng.uniform(0, 1, n),
                 rng.uniform(0, 1, n))


def layered_scene(rng, n):
    """Surfels stacked in distinct depth layers facing +z; used for gradient checks."""
    layers = np.linspace(-0.35, 0.35, n)
    rng.shuffle(layers)
    pos = np.stack([rng.uniform(-0.2, 0.2, n), rng.uniform(-0.2, 0.2, n), layers], 1)
    return Scene(pos, rng.uniform(0.05, 0.10, (n, 2)), facing_quats(rng, n, 6), rng.uniform(0.2, 0.8, n),
                 rng.uniform(0.1, 0.9, (n, 3)), rng.uniform(0.1, 0.9, n), rng.uniform(0.1, 0.9, n))


def gradcheck_problem(seed, n=8, size=24):
    from matgs.objectives import ViewTarget
    from matgs.rasterizer import render_fast

    rng = np.random.default_rng(seed)
    gt = layered_scene(rng, n)
    scene = layered_scene(rng, n)
    cams = [orbit_camera(a, 10, width=size, height=size) for a in (-20, 20)]
    sup = [ViewTarget.from_gbuffer(render_fast(gt, c), c, geometry=(i == 0)) for i, c in enumerate(cams)]
    return scene, sup


def single_splat(position=(0.0, 0.0, 0.0), scale=(1.0, 1.0), rotation=(1.0, 0.0, 0.0, 0.0), opacity=1.0,
                 albedo=(0.5, 0.5, 0.5), roughness=0.5, metallic=0.5, bbox=None):
    kw = {} if bbox is None else {"bbox": np.asarray(bbox)}
    return Scene([position], [scale], [rotation], [opacity], [albedo], [roughness], [metallic], **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
