"""Scene and camera documents (JSON), portable float maps and PNG previews."""
from __future__ import annotations

import json
import os
import re
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

from .core import ROT_TOL, Camera, Scene, ValidationError, validate_scene

SCENE_VERSION = 1
CAMERA_VERSION = 1
CAMERA_ROT_TOL = 1e-4


class FormatError(ValidationError):
    """Malformed or invalid file; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


# ------------------------------------------------------------------ scenes

def scene_to_document(scene: Scene) -> dict:
    return {
        "version": SCENE_VERSION,
        "bbox": np.asarray(scene.bbox).tolist(),
        "gaussians": [
            {"position": scene.positions[i].tolist(), "scale": scene.scales[i].tolist(),
             "rotation": scene.rotations[i].tolist(), "opacity": float(scene.opacities[i]),
             "albedo": scene.albedo[i].tolist(), "roughness": float(scene.roughness[i]),
             "metallic": float(scene.metallic[i])}
            for i in range(len(scene))
        ],
    }


def _dump(doc: Any, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def _load(path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError("", f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None


def write_scene(scene: Scene, path) -> None:
    _dump(scene_to_document(scene), path)


_GAUSSIAN_FIELDS = {"position": 3, "scale": 2, "rotation": 4, "opacity": None, "albedo": 3,
                    "roughness": None, "metallic": None}


def _numbers(value, path: str, length) -> Any:
    if length is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise FormatError(path, "expected a number")
        return float(value)
    if (not isinstance(value, list) or len(value) != length
            or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in value)):
        raise FormatError(path, f"expected a list of {length} numbers")
    return [float(x) for x in value]


def scene_from_document(doc: Any) -> Scene:
    if not isinstance(doc, dict):
        raise FormatError("", "scene document must be an object")
    if "version" not in doc:
        raise FormatError("version", "missing")
    if doc["version"] != SCENE_VERSION:
        raise FormatError("version", f"unsupported version {doc['version']!r}")
    bbox = doc.get("bbox")
    if not isinstance(bbox, list) or len(bbox) != 2:
        raise FormatError("bbox", "expected two corners")
    bbox = [_numbers(c, f"bbox[{k}]", 3) for k, c in enumerate(bbox)]
    gs = doc.get("gaussians")
    if not isinstance(gs, list):
        raise FormatError("gaussians", "expected a list")
    cols: dict[str, list] = {k: [] for k in _GAUSSIAN_FIELDS}
    for i, g in enumerate(gs):
        if not isinstance(g, dict):
            raise FormatError(f"gaussians[{i}]", "expected an object")
        unknown = sorted(set(g) - set(_GAUSSIAN_FIELDS))
        if unknown:
            raise FormatError(f"gaussians[{i}].{unknown[0]}", "unknown field")
        for name, length in _GAUSSIAN_FIELDS.items():
            if name not in g:
                raise FormatError(f"gaussians[{i}].{name}", "missing")
            cols[name].append(_numbers(g[name], f"gaussians[{i}].{name}", length))
    arr = {}
    for k, n in _GAUSSIAN_FIELDS.items():
        arr[k] = np.array(cols[k], dtype=np.float64).reshape((len(gs), n) if n else (len(gs),))
    scene = Scene(arr["position"], arr["scale"], arr["rotation"], arr["opacity"], arr["albedo"],
                  arr["roughness"], arr["metallic"], bbox=np.array(bbox))
    problems = validate_scene(scene)
    if problems:
        p = problems[0]
        raise FormatError("bbox" if p.index < 0 else f"gaussians[{p.index}].{p.field}", p.message)
    return scene


def read_scene(path) -> Scene:
    return scene_from_document(_load(path))


# ----------------------------------------------------------------- cameras

def camera_to_document(camera: Camera, name: str = "") -> dict:
    doc = {"width": camera.width, "height": camera.height, "fx": camera.fx, "fy": camera.fy,
           "cx": camera.cx, "cy": camera.cy,
           "world_to_camera": np.asarray(camera.world_to_camera).reshape(-1).tolist()}
    if name:
        doc = {"name": name, **doc}
    return doc


def write_cameras(cameras: Sequence[Camera], path, names: Sequence[str] = ()) -> None:
    names = list(names) or [""] * len(cameras)
    _dump({"version": CAMERA_VERSION,
           "cameras": [camera_to_document(c, n) for c, n in zip(cameras, names)]}, path)


def _orthonormalize(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m[:3, :3])
    out = m.copy()
    out[:3, :3] = u @ vt
    return out


def read_cameras_named(path) -> list[tuple[str, Camera]]:
    doc = _load(path)
    if not isinstance(doc, dict) or doc.get("version") != CAMERA_VERSION:
        raise FormatError("version", "missing or unsupported camera file version")
    cams = doc.get("cameras")
    if not isinstance(cams, list) or not cams:
        raise FormatError("cameras", "expected a non-empty list")
    out = []
    for i, c in enumerate(cams):
        where = f"cameras[{i}]"
        if not isinstance(c, dict):
            raise FormatError(where, "expected an object")
        try:
            w, h = int(c["width"]), int(c["height"])
            intr = [_numbers(c[k], f"{where}.{k}", None) for k in ("fx", "fy", "cx", "cy")]
            m = np.array(_numbers(c["world_to_camera"], f"{where}.world_to_camera", 16)).reshape(4, 4)
        except KeyError as exc:
            raise FormatError(f"{where}.{exc.args[0]}", "missing") from None
        if w <= 0 or h <= 0 or min(intr[:2]) <= 0:
            raise FormatError(where, "resolution and focal lengths must be positive")
        rot = m[:3, :3]
        if not np.all(np.isfinite(m)) or np.max(np.abs(rot @ rot.T - np.eye(3))) > CAMERA_ROT_TOL:
            raise FormatError(f"{where}.world_to_camera", "rotation is not orthonormal within 1e-4")
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > ROT_TOL:
            m = _orthonormalize(m)  # tolerated drift, snapped so Camera accepts it
        try:
            out.append((str(c.get("name", f"view{i}")), Camera(w, h, *intr, m)))
        except ValidationError as exc:
            raise FormatError(f"{where}.world_to_camera", str(exc)) from None
    return out


def read_cameras(path) -> list[Camera]:
    return [c for _, c in read_cameras_named(path)]


# -------------------------------------------------------------- float maps

_PFM_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s")


def write_floatmap(path, image) -> None:
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        magic = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"float maps hold 1 or 3 channels, got shape {img.shape}")
    data = np.asarray(img, dtype="<f4")
    if not np.all(np.isfinite(data)):
        raise ValueError("float map pixels must be finite")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_floatmap(path) -> np.ndarray:
    """Float32 image, (H, W, 3) for color maps and (H, W) for single-channel maps."""
    raw = Path(path).read_bytes()
    m = _PFM_HEADER.match(raw[:64])
    if not m:
        raise FormatError("", f"{path}: not a portable float map")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError:
        raise FormatError("", f"{path}: bad scale line") from None
    if scale == 0:
        raise FormatError("", f"{path}: bad scale line")
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * channels * 4
    payload = raw[m.end():]
    if len(payload) < need:
        raise FormatError("", f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    data = np.frombuffer(payload[:need], dtype=dtype).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.ascontiguousarray(data.reshape(shape)[::-1])


# --------------------------------------------------------------- previews

def write_png(path, image) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError("PNG previews take uint8 images")
    Image.fromarray(img[..., 0] if img.ndim == 3 and img.shape[2] == 1 else img).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def write_json(path, doc) -> None:
    _dump(doc, path)


def read_json(path) -> Any:
    return _load(path)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
