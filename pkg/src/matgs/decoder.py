"""Untrained forward pass of the group-attention volume transformer and the
coarse-to-fine surfel decoder.

Only shapes and structural invariants are meaningful here: weights are seeded
random (or zero) and the image encoder is a fixed random projection.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import DEFAULT_BBOX, Camera, Scene, ValidationError, orbit_camera, plucker_image
from .rasterizer import GBuffer, render_fast

N_RAW = 15  # offset 3, log-scale 2, quaternion 4, opacity 1, albedo 3, roughness 1, metallic 1


@dataclass(frozen=True)
class DecoderConfig:
    image_size: int = 512
    feature_dim: int = 768
    feature_res: int = 32
    volume_res: int = 32
    channels: int = 256
    layers: int = 12
    groups: int = 16
    heads: int = 8
    mlp_ratio: int = 4
    gaussian_channels: int = 80
    primitives_per_voxel: int = 2
    decoder_width: int = 128
    offset_radius: float = 1.0 / 32
    render_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.volume_res % self.groups:
            raise ValidationError(f"volume resolution {self.volume_res} not divisible by {self.groups} groups")
        if self.image_size % self.feature_res:
            raise ValidationError("image size must be a multiple of the feature resolution")
        if self.channels % self.heads:
            raise ValidationError("channels must be divisible by the head count")
        if self.primitives_per_voxel < 1:
            raise ValidationError("need at least one primitive per voxel")


# ------------------------------------------------------------ volume grouping

def group_partition(volume: torch.Tensor, groups: int) -> torch.Tensor:
    """(D, D, D, C) -> (G^3, (D/G)^3, C); groups ordered x-major, tokens likewise."""
    D = volume.shape[0]
    if volume.shape[:3] != (D, D, D):
        raise ValidationError(f"expected a cubic volume, got {tuple(volume.shape)}")
    if groups <= 0 or D % groups:
        raise ValidationError(f"volume size {D} is not divisible by {groups} groups")
    s = D // groups
    C = volume.shape[3]
    v = volume.reshape(groups, s, groups, s, groups, s, C).permute(0, 2, 4, 1, 3, 5, 6)
    return v.reshape(groups ** 3, s ** 3, C)


def group_reassemble(tokens: torch.Tensor, groups: int) -> torch.Tensor:
    n_groups, n_tok, C = tokens.shape
    s = round(n_tok ** (1 / 3))
    if n_groups != groups ** 3 or s ** 3 != n_tok:
        raise ValidationError(f"token layout {tuple(tokens.shape)} does not match {groups} groups")
    v = tokens.reshape(groups, groups, groups, s, s, s, C).permute(0, 3, 1, 4, 2, 5, 6)
    return v.reshape(groups * s, groups * s, groups * s, C)


# ------------------------------------------------------------------ modules

class GroupAttentionLayer(nn.Module):
    """Group cross-attention, MLP and 3D convolution, each pre-normed and residual."""

    def __init__(self, channels: int, heads: int, mlp_ratio: int, groups: int):
        super().__init__()
        self.groups = groups
        self.norm_attn = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm_mlp = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(nn.Linear(channels, mlp_ratio * channels), nn.GELU(),
                                 nn.Linear(mlp_ratio * channels, channels))
        self.norm_conv = nn.LayerNorm(channels)
        self.conv = nn.Conv3d(channels, channels, 3, padding=1)

    def attend(self, embed_groups: torch.Tensor, feat_groups: torch.Tensor) -> torch.Tensor:
        q = self.norm_attn(embed_groups)
        out, _ = self.attn(q, feat_groups, feat_groups, need_weights=False)
        return out + embed_groups

    def forward(self, embed: torch.Tensor, feat: torch.Tensor) -> torch.Tensor:
        if embed.shape != feat.shape:
            raise ValidationError(f"embedding {tuple(embed.shape)} and feature {tuple(feat.shape)} volumes differ")
        e = self.attend(group_partition(embed, self.groups), group_partition(feat, self.groups))
        e = self.mlp(self.norm_mlp(e)) + e
        e = group_reassemble(e, self.groups)
        c = self.conv(self.norm_conv(e).permute(3, 0, 1, 2).unsqueeze(0))
        return c[0].permute(1, 2, 3, 0) + e

    def zero_residuals(self) -> None:
        for m in (self.attn.out_proj, self.mlp[2], self.conv):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)


class StubImageFeatures(nn.Module):
    """Fixed random projection of (image, Plücker) patches to a feature map."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.patch = cfg.image_size // cfg.feature_res
        g = torch.Generator().manual_seed(cfg.seed + 7)
        fan_in = self.patch * self.patch * 9
        self.register_buffer("projection", torch.randn(fan_in, cfg.feature_dim, generator=g) / math.sqrt(fan_in))

    def forward(self, image: np.ndarray, camera: Camera) -> torch.Tensor:
        """(H, W, 3) image -> (feature_dim, H/p, W/p)."""
        x = np.concatenate([np.asarray(image, dtype=np.float64), plucker_image(camera)], axis=-1)
        H, W, C = x.shape
        p = self.patch
        if H % p or W % p:
            raise ValidationError(f"image {W}x{H} is not a multiple of the patch size {p}")
        t = torch.from_numpy(x).float().reshape(H // p, p, W // p, p, C).permute(0, 2, 1, 3, 4)
        t = t.reshape(H // p, W // p, p * p * C) @ self.projection
        return t.permute(2, 0, 1).contiguous()


def voxel_centers(res: int, bbox=DEFAULT_BBOX) -> np.ndarray:
    """(res, res, res, 3) centers, indexed [ix, iy, iz]."""
    lo, hi = np.asarray(bbox, dtype=np.float64)
    axes = [lo[k] + (np.arange(res) + 0.5) * (hi[k] - lo[k]) / res for k in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def project_points(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Continuous pixel coordinates (pixel i spans [i, i+1)) and camera depth."""
    pc = points @ camera.rotation.T + camera.translation
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([camera.fx * pc[..., 0] / z + camera.cx, camera.fy * pc[..., 1] / z + camera.cy], axis=-1)
    return uv, z


def bilinear_sample(image: torch.Tensor, uv: np.ndarray) -> torch.Tensor:
    """Sample a (C, H, W) map at continuous pixel coordinates (N, 2); zeros outside."""
    C, H, W = image.shape
    gx = torch.from_numpy(uv[:, 0] / W * 2 - 1).float()
    gy = torch.from_numpy(uv[:, 1] / H * 2 - 1).float()
    grid = torch.stack([gx, gy], -1).reshape(1, 1, -1, 2)
    out = F.grid_sample(image[None].float(), grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out[0, :, 0].T


def lift_features(features: Sequence[torch.Tensor], cameras: Sequence[Camera], res: int,
                  bbox=DEFAULT_BBOX) -> torch.Tensor:
    """Average bilinear samples of each view's feature map at projected voxel centers."""
    centers = voxel_centers(res, bbox).reshape(-1, 3)
    acc = None
    for feat, cam in zip(features, cameras):
        scale = np.array([feat.shape[2] / cam.width, feat.shape[1] / cam.height])
        uv, _ = project_points(cam, centers)
        s = bilinear_sample(feat, uv * scale)
        acc = s if acc is None else acc + s
    return (acc / len(features)).reshape(res, res, res, -1)


class CoarseHead(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.K = cfg.primitives_per_voxel
        self.net = nn.Sequential(nn.Linear(cfg.gaussian_channels, cfg.decoder_width), nn.GELU(),
                                 nn.Linear(cfg.decoder_width, self.K * N_RAW))

    def forward(self, vg: torch.Tensor) -> torch.Tensor:
        return self.net(vg.reshape(-1, vg.shape[-1])).reshape(-1, self.K, N_RAW)


class FineHead(nn.Module):
    """Point features from coarse renders attend to their voxel's feature; emits material residuals."""

    def __init__(self, cfg: DecoderConfig, point_channels: int = 8):
        super().__init__()
        w = cfg.decoder_width
        self.query = nn.Linear(cfg.gaussian_channels, w)
        self.key = nn.Linear(point_channels, w)
        self.value = nn.Linear(point_channels, w)
        self.out = nn.Sequential(nn.Linear(w, w), nn.GELU(), nn.Linear(w, 5))

    def forward(self, voxel_feat: torch.Tensor, point_feat: torch.Tensor) -> torch.Tensor:
        """voxel_feat (N, Cg), point_feat (N, views, 8) -> residuals (N, 5)."""
        q = self.query(voxel_feat)[:, None]
        k, v = self.key(point_feat), self.value(point_feat)
        att = torch.softmax((q * k).sum(-1) / math.sqrt(q.shape[-1]), dim=-1)
        return self.out((att[..., None] * v).sum(1))

    def zero_residuals(self) -> None:
        nn.init.zeros_(self.out[2].weight)
        nn.init.zeros_(self.out[2].bias)


class DecoderToy(nn.Module):
    def __init__(self, cfg: DecoderConfig = DecoderConfig()):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.encoder = StubImageFeatures(cfg)
            self.lift = nn.Linear(cfg.feature_dim, cfg.channels)
            self.embedding = nn.Parameter(0.02 * torch.randn(cfg.volume_res, cfg.volume_res, cfg.volume_res,
                                                             cfg.channels))
            self.layers = nn.ModuleList(GroupAttentionLayer(cfg.channels, cfg.heads, cfg.mlp_ratio, cfg.groups)
                                        for _ in range(cfg.layers))
            self.upscale = nn.ConvTranspose3d(cfg.channels, cfg.gaussian_channels, 2, stride=2)
            self.coarse = CoarseHead(cfg)
            self.fine = FineHead(cfg)

    def zero_residuals(self) -> None:
        for layer in self.layers:
            layer.zero_residuals()
        self.fine.zero_residuals()

    # stages ---------------------------------------------------------------
    def features(self, images: Sequence[np.ndarray], cameras: Sequence[Camera]) -> list[torch.Tensor]:
        if len(images) != len(cameras) or not images:
            raise ValidationError("need one camera per input image")
        return [self.encoder(im, cam) for im, cam in zip(images, cameras)]

    def feature_volume(self, features, cameras) -> torch.Tensor:
        return self.lift(lift_features(features, cameras, self.cfg.volume_res))

    def transform(self, feat_volume: torch.Tensor) -> torch.Tensor:
        e = self.embedding
        for layer in self.layers:
            e = layer(e, feat_volume)
        return e

    def upscale_volume(self, embed: torch.Tensor) -> torch.Tensor:
        c = self.cfg
        want = (c.volume_res,) * 3 + (c.channels,)
        if tuple(embed.shape) != want:
            raise ValidationError(f"embedding volume has shape {tuple(embed.shape)}, expected {want}")
        out = self.upscale(embed.permute(3, 0, 1, 2).unsqueeze(0))
        return out[0].permute(1, 2, 3, 0)

    def coarse_decode(self, vg: torch.Tensor, bbox=DEFAULT_BBOX) -> Scene:
        raw = self.coarse(vg).double().numpy()
        return decode_raw(raw, vg.shape[0], self.cfg.offset_radius, bbox)

    def fine_refine(self, scene: Scene, vg: torch.Tensor, images, coarse: Sequence[GBuffer],
                    cameras: Sequence[Camera]) -> Scene:
        if not (len(images) == len(coarse) == len(cameras)):
            raise ValidationError("fine refinement needs one image and one coarse render per camera")
        K = self.cfg.primitives_per_voxel
        per_view = []
        for im, gb, cam in zip(images, coarse, cameras):
            if gb.shape != (cam.height, cam.width):
                raise ValidationError(f"coarse render {gb.shape} does not match camera {cam.height}x{cam.width}")
            inp = np.asarray(im, dtype=np.float64)
            if inp.shape[:2] != gb.shape:
                inp = F.interpolate(torch.from_numpy(inp).permute(2, 0, 1)[None], size=gb.shape,
                                    mode="area")[0].permute(1, 2, 0).numpy()
            stack = np.concatenate([inp, gb.albedo, np.asarray(gb.depth).reshape(*gb.shape, 1),
                                    np.asarray(gb.alpha).reshape(*gb.shape, 1)], axis=-1)
            uv, _ = project_points(cam, scene.positions)
            per_view.append(bilinear_sample(torch.from_numpy(stack).permute(2, 0, 1), uv))
        points = torch.stack(per_view, dim=1)
        voxel = vg.reshape(-1, vg.shape[-1]).repeat_interleave(K, dim=0)
        res = self.fine(voxel, points).double().numpy()
        mat = np.clip(scene.materials + res, 0.0, 1.0)
        return scene.replace(albedo=mat[:, :3], roughness=mat[:, 3], metallic=mat[:, 4])

    @torch.no_grad()
    def forward(self, images: Sequence[np.ndarray], cameras: Sequence[Camera]) -> "DecoderOutput":
        feats = self.features(images, cameras)
        vf = self.feature_volume(feats, cameras)
        ve = self.transform(vf)
        vg = self.upscale_volume(ve)
        coarse = self.coarse_decode(vg)
        small = [c.with_size(self.cfg.render_size, self.cfg.render_size) for c in cameras]
        renders = [render_fast(coarse, c) for c in small]
        fine = self.fine_refine(coarse, vg, images, renders, small)
        return DecoderOutput(torch.stack(feats), vf, ve, vg, coarse, fine)


@dataclass
class DecoderOutput:
    features: torch.Tensor        # (views, 768, 32, 32)
    feature_volume: torch.Tensor  # (32, 32, 32, 256)
    embedding: torch.Tensor       # (32, 32, 32, 256)
    gaussian_volume: torch.Tensor  # (64, 64, 64, 80)
    coarse: Scene
    fine: Scene

    def shapes(self) -> dict[str, list[int]]:
        return {"features": list(self.features.shape), "feature_volume": list(self.feature_volume.shape),
                "embedding": list(self.embedding.shape), "gaussian_volume": list(self.gaussian_volume.shape),
                "gaussians": [len(self.fine)]}


def decode_raw(raw: np.ndarray, res: int, offset_radius: float, bbox=DEFAULT_BBOX) -> Scene:
    """Activate per-voxel raw parameter sets (voxels x K x 15) into a scene."""
    bbox = np.asarray(bbox, dtype=np.float64)
    length = float(np.max(bbox[1] - bbox[0]))
    voxel = length / res
    K = raw.shape[1]
    r = raw.reshape(-1, N_RAW)
    centers = np.repeat(voxel_centers(res, bbox).reshape(-1, 3), K, axis=0)
    o = r[:, 0:3]
    norm = np.linalg.norm(o, axis=1, keepdims=True)
    direction = np.divide(o, norm, out=np.zeros_like(o), where=norm > 0)
    pos = centers + offset_radius * length * np.tanh(norm) * direction
    q = r[:, 5:9]
    q = np.where(np.linalg.norm(q, axis=1, keepdims=True) > 1e-12, q, [1.0, 0.0, 0.0, 0.0])
    sig = lambda x: 1.0 / (1.0 + np.exp(-np.clip(x, -30, 30)))
    return Scene(
        positions=np.clip(pos, bbox[0], bbox[1]),
        scales=voxel * np.exp(np.clip(r[:, 3:5], -20, 5)),
        rotations=q / np.linalg.norm(q, axis=1, keepdims=True),
        opacities=sig(r[:, 9]),
        albedo=sig(r[:, 10:13]),
        roughness=sig(r[:, 13]),
        metallic=sig(r[:, 14]),
        bbox=bbox,
    )


# ------------------------------------------------------------- weight files

def save_weights(model: nn.Module, path) -> None:
    """Flat little-endian float32 payload plus a JSON manifest (name, shape, offset)."""
    path = Path(path)
    entries, offset = [], 0
    with open(path, "wb") as fh:
        for name, t in model.state_dict().items():
            a = t.detach().cpu().numpy().astype("<f4")
            fh.write(a.tobytes())
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.nbytes
    manifest = {"format": "float32-le", "bytes": offset, "tensors": entries}
    if isinstance(model, DecoderToy):
        manifest["config"] = asdict(model.cfg)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_weights(model: nn.Module, path) -> None:
    path = Path(path)
    manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    blob = path.read_bytes()
    if len(blob) != manifest["bytes"]:
        raise ValidationError(f"weight file has {len(blob)} bytes, manifest says {manifest['bytes']}")
    state = model.state_dict()
    for e in manifest["tensors"]:
        if e["name"] not in state:
            raise ValidationError(f"unknown tensor {e['name']}")
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        if tuple(state[e["name"]].shape) != tuple(a.shape):
            raise ValidationError(f"tensor {e['name']} has shape {a.shape}, model expects "
                                  f"{tuple(state[e['name']].shape)}")
        state[e["name"]] = torch.from_numpy(a.copy())
    model.load_state_dict(state)


def ring_cameras(size: int = 512) -> list[Camera]:
    """Four input views at azimuths 0/90/180/270 degrees."""
    return [orbit_camera(a, 0.0, width=size, height=size) for a in (0.0, 90.0, 180.0, 270.0)]
