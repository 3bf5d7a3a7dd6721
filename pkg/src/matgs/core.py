"""Domain types, scene container and camera math."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

QUAT_TOL = 1e-4
ROT_TOL = 1e-5
DEFAULT_BBOX = ((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))


class ValidationError(ValueError):
    """Raised when a domain object violates its invariants."""


@dataclass(frozen=True)
class MaterialGaussian2D:
    """A single surfel with five view-independent material channels."""

    position: tuple[float, float, float]
    scale: tuple[float, float]
    rotation: tuple[float, float, float, float]  # (w, x, y, z)
    opacity: float
    albedo: tuple[float, float, float]
    roughness: float
    metallic: float


@dataclass(frozen=True)
class Violation:
    index: int
    field: str
    message: str

    def __str__(self) -> str:
        return f"gaussians[{self.index}].{self.field}: {self.message}"


def _readonly(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Scene:
    """Ordered set of material gaussians stored column-wise.

    Indexing yields :class:`MaterialGaussian2D` values; the arrays are
    read-only so a Scene can be shared between workers.
    """

    positions: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N, 2)
    rotations: np.ndarray  # (N, 4) unit quaternions (w, x, y, z)
    opacities: np.ndarray  # (N,)
    albedo: np.ndarray  # (N, 3)
    roughness: np.ndarray  # (N,)
    metallic: np.ndarray  # (N,)
    bbox: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_BBOX))

    def __post_init__(self):
        n = len(self.positions)
        shapes = {
            "positions": (n, 3),
            "scales": (n, 2),
            "rotations": (n, 4),
            "opacities": (n,),
            "albedo": (n, 3),
            "roughness": (n,),
            "metallic": (n,),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.size == 0:
                arr = arr.reshape(shape)
            if arr.shape != shape:
                raise ValidationError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, _readonly(arr))
        bbox = np.asarray(self.bbox, dtype=np.float64)
        if bbox.shape != (2, 3):
            raise ValidationError(f"bbox has shape {bbox.shape}, expected (2, 3)")
        object.__setattr__(self, "bbox", _readonly(bbox))

    @classmethod
    def empty(cls, bbox=DEFAULT_BBOX) -> "Scene":
        return cls(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, 3)), np.zeros(0), np.zeros(0), bbox=np.asarray(bbox))

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[MaterialGaussian2D], bbox=DEFAULT_BBOX) -> "Scene":
        if not gaussians:
            return cls.empty(bbox)
        return cls(
            positions=[g.position for g in gaussians],
            scales=[g.scale for g in gaussians],
            rotations=[g.rotation for g in gaussians],
            opacities=[g.opacity for g in gaussians],
            albedo=[g.albedo for g in gaussians],
            roughness=[g.roughness for g in gaussians],
            metallic=[g.metallic for g in gaussians],
            bbox=np.asarray(bbox),
        )

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> MaterialGaussian2D:
        return MaterialGaussian2D(
            position=tuple(float(v) for v in self.positions[i]),
            scale=tuple(float(v) for v in self.scales[i]),
            rotation=tuple(float(v) for v in self.rotations[i]),
            opacity=float(self.opacities[i]),
            albedo=tuple(float(v) for v in self.albedo[i]),
            roughness=float(self.roughness[i]),
            metallic=float(self.metallic[i]),
        )

    def __iter__(self) -> Iterator[MaterialGaussian2D]:
        return (self[i] for i in range(len(self)))

    @property
    def gaussians(self) -> list[MaterialGaussian2D]:
        return list(self)

    @property
    def materials(self) -> np.ndarray:
        """(N, 5) array: albedo rgb, roughness, metallic."""
        return np.concatenate([self.albedo, self.roughness[:, None], self.metallic[:, None]], axis=1)

    @property
    def bbox_extent(self) -> float:
        return float(np.max(self.bbox[1] - self.bbox[0]))

    def replace(self, **changes) -> "Scene":
        fields = dict(positions=self.positions, scales=self.scales, rotations=self.rotations,
                      opacities=self.opacities, albedo=self.albedo, roughness=self.roughness,
                      metallic=self.metallic, bbox=self.bbox)
        fields.update(changes)
        return Scene(**fields)

    def take(self, index) -> "Scene":
        index = np.asarray(index)
        return Scene(self.positions[index], self.scales[index], self.rotations[index],
                     self.opacities[index], self.albedo[index], self.roughness[index],
                     self.metallic[index], bbox=self.bbox)


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera with an OpenCV-style frame (x right, y down, z forward)."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.world_to_camera, dtype=np.float64)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise ValidationError(f"world_to_camera has shape {m.shape}, expected (4, 4)")
        object.__setattr__(self, "world_to_camera", _readonly(m))
        problems = camera_violations(self)
        if problems:
            raise ValidationError("; ".join(problems))

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2]

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def with_size(self, width: int, height: int) -> "Camera":
        """Same frustum at a new resolution."""
        sx, sy = width / self.width, height / self.height
        return Camera(width, height, self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                      self.world_to_camera)

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), *, width: int = 512,
                height: int = 512, fov_deg: float = 49.1) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        m = np.eye(4)
        m[:3, :3] = rot
        m[:3, 3] = -rot @ eye
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(width, height, f, f, width / 2, height / 2, m)


def orbit_camera(azimuth_deg: float, elevation_deg: float = 0.0, distance: float = 1.5, **kw) -> Camera:
    """Camera on a sphere around the origin; azimuth 0 sits on +z, y is up."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    eye = distance * np.array([math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)])
    return Camera.look_at(eye, **kw)


def camera_violations(cam: Camera, tol: float = ROT_TOL) -> list[str]:
    out = []
    rot = np.asarray(cam.world_to_camera)[:3, :3]
    if not np.all(np.isfinite(cam.world_to_camera)):
        out.append("world_to_camera: non-finite entries")
        return out
    if np.max(np.abs(rot @ rot.T - np.eye(3))) > tol:
        out.append("world_to_camera: rotation block not orthonormal")
    elif np.linalg.det(rot) < 0:
        out.append("world_to_camera: rotation determinant is -1")
    if not np.allclose(cam.world_to_camera[3], [0, 0, 0, 1]):
        out.append("world_to_camera: last row must be (0, 0, 0, 1)")
    if not (cam.fx > 0 and cam.fy > 0):
        out.append("intrinsics: fx, fy must be positive")
    if not (0 <= cam.cx < cam.width and 0 <= cam.cy < cam.height):
        out.append("intrinsics: principal point outside image")
    if cam.width <= 0 or cam.height <= 0:
        out.append("size: width and height must be positive")
    return out


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True, eq=False)
class PluckerEmbedding:
    direction: np.ndarray
    moment: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.direction, self.moment])


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions (w, x, y, z), normalizing first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_to_frame(rotation, scale) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unscaled tangent frame (t_u, t_v, normal) of a surfel."""
    q = np.asarray(rotation, dtype=np.float64)
    s = np.asarray(scale, dtype=np.float64)
    if q.shape != (4,) or not np.all(np.isfinite(q)):
        raise ValidationError("rotation must be a finite 4-vector")
    if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
        raise ValidationError(f"rotation is not a unit quaternion (|q|={np.linalg.norm(q):.6f})")
    if s.shape != (2,) or not np.all(s > 0):
        raise ValidationError("scale components must be positive")
    r = quat_to_rotmat(q)
    return r[:, 0], r[:, 1], r[:, 2]


def _check_pixel(camera: Camera, px: int, py: int) -> None:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise IndexError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")


def camera_ray_dirs(camera: Camera) -> np.ndarray:
    """(H, W, 3) camera-space directions with unit z through pixel centers."""
    xs = (np.arange(camera.width) + 0.5 - camera.cx) / camera.fx
    ys = (np.arange(camera.height) + 0.5 - camera.cy) / camera.fy
    d = np.empty((camera.height, camera.width, 3))
    d[..., 0] = xs[None, :]
    d[..., 1] = ys[:, None]
    d[..., 2] = 1.0
    return d


def pixel_ray(camera: Camera, px: int, py: int) -> Ray:
    _check_pixel(camera, px, py)
    d_cam = np.array([(px + 0.5 - camera.cx) / camera.fx, (py + 0.5 - camera.cy) / camera.fy, 1.0])
    d = camera.rotation.T @ d_cam
    return Ray(origin=camera.position, direction=d / np.linalg.norm(d))


def plucker_embed(camera: Camera, px: int, py: int) -> PluckerEmbedding:
    ray = pixel_ray(camera, px, py)
    return PluckerEmbedding(ray.direction, np.cross(ray.origin, ray.direction))


def plucker_image(camera: Camera) -> np.ndarray:
    """(H, W, 6) Plücker embedding for every pixel."""
    d = camera_ray_dirs(camera) @ camera.rotation
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.position, d.shape)
    return np.concatenate([d, np.cross(o, d)], axis=-1)


def validate_scene(scene: Scene) -> list[Violation]:
    """Report every invariant violation; never raises."""
    out: list[Violation] = []
    bbox = np.asarray(scene.bbox)
    if not np.all(bbox[1] > bbox[0]):
        out.append(Violation(-1, "bbox", "upper corner must exceed lower corner"))

    def flag(mask, name, msg):
        for i in np.flatnonzero(mask):
            out.append(Violation(int(i), name, msg))

    pos = scene.positions
    flag(~np.all(np.isfinite(pos), axis=1) | np.any(pos < bbox[0], axis=1) | np.any(pos > bbox[1], axis=1),
         "position", "outside scene bounding box")
    flag(~np.all(scene.scales > 0, axis=1) | ~np.all(np.isfinite(scene.scales), axis=1),
         "scale", "components must be positive")
    with np.errstate(invalid="ignore"):
        norms = np.linalg.norm(scene.rotations, axis=1)
    flag(~(np.abs(norms - 1.0) <= 1e-6), "rotation", "not a unit quaternion")

    def unit_interval(a):
        a = a.reshape(len(a), -1) if a.size else a.reshape(len(a), 1)
        return ~np.all((a >= 0) & (a <= 1), axis=1)

    flag(unit_interval(scene.opacities), "opacity", "outside [0, 1]")
    flag(unit_interval(scene.albedo), "albedo", "outside [0, 1]")
    flag(unit_interval(scene.roughness), "roughness", "outside [0, 1]")
    flag(unit_interval(scene.metallic), "metallic", "outside [0, 1]")
    out.sort(key=lambda v: v.index)
    return out
