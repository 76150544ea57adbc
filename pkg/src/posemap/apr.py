"""Convolutional absolute-pose regressor, feature extractor, and losses.

The regressor shares one convolutional backbone between two outputs: a flat
3x4 pose estimate and a fused multi-block feature map. Feature maps from
every block live at half input resolution and are projected, summed, and
per-pixel L2-normalized; because all blocks run at that same resolution the
extractor is shift-equivariant (2 input pixels = 1 feature cell) away from
image borders.

Loss conventions:
  * pose loss          - squared L2 over all 12 pose entries
  * image feature loss - margin triplet on per-pixel mean feature distance,
                         anchor = real image features, positive = rendered
  * pose-map loss      - mean per-pixel cosine distance (1 - cos)
  * synthesized-view loss - plain (unsquared) L2 norms on both the pose
                            vector and the feature-map difference
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .field import PoseMapImage
from .se3 import Pose

APR_MAGIC = b"APRN1\n"

_IDENTITY_POSE_FLAT = (1.0, 0, 0, 0, 0, 1.0, 0, 0, 0, 0, 1.0, 0)


@dataclass(frozen=True)
class LossToggles:
    pose: bool = True
    image: bool = True
    rvs: bool = True
    posemap: bool = True

    def any_enabled(self) -> bool:
        return self.pose or self.image or self.rvs or self.posemap


@dataclass(frozen=True)
class AprConfig:
    height: int = 64
    width: int = 64
    backbone_blocks: int = 3
    backbone_channels: tuple[int, ...] = (24, 32, 48)
    fusion_channels: int = 128
    feature_scale: int = 2
    triplet_margin: float = 1.0
    toggles: LossToggles = field(default_factory=LossToggles)

    def __post_init__(self):
        if self.fusion_channels <= 0:
            raise ValueError("fusion_channels must be positive")
        if self.triplet_margin <= 0:
            raise ValueError("triplet_margin must be positive")
        if len(self.backbone_channels) != self.backbone_blocks:
            raise ValueError("backbone_channels must list one width per block")
        if self.height % self.feature_scale or self.width % self.feature_scale:
            raise ValueError("feature_scale must divide the input resolution")
        object.__setattr__(self, "backbone_channels", tuple(self.backbone_channels))
        if isinstance(self.toggles, dict):
            object.__setattr__(self, "toggles", LossToggles(**self.toggles))


@dataclass
class ImageFeatureMap:
    """A (h, w, C) grid of unit-norm per-pixel feature vectors."""

    grid: torch.Tensor
    source: str  # "real" | "rendered"

    def __post_init__(self):
        if self.source not in ("real", "rendered"):
            raise ValueError(f"unknown feature source {self.source!r}")
        if not torch.isfinite(self.grid.detach()).all():
            raise ValueError("feature map contains non-finite entries")


class ChannelNorm(nn.Module):
    """Per-pixel layer norm over channels.

    Unlike batch/group norm this uses no spatial statistics, so the backbone
    stays exactly shift-equivariant away from image borders.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


def _block(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
        ChannelNorm(out_ch),
        nn.ReLU(),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        ChannelNorm(out_ch),
        nn.ReLU(),
    )


class PoseRegressor(nn.Module):
    """Backbone + pose head + feature-fusion head.

    The first block downsamples to half resolution; later blocks keep that
    resolution so every block map aligns cell-for-cell with the fused output.
    """

    def __init__(self, config: AprConfig):
        super().__init__()
        self.config = config
        chans = config.backbone_channels
        blocks = [_block(3, chans[0], stride=config.feature_scale)]
        for a, b in zip(chans[:-1], chans[1:]):
            blocks.append(_block(a, b, stride=1))
        self.blocks = nn.ModuleList(blocks)
        self.projections = nn.ModuleList(
            [nn.Conv2d(c, config.fusion_channels, 1) for c in chans]
        )
        head_in = chans[-1] * 16
        self.pose_head = nn.Sequential(
            nn.Linear(head_in, 256), nn.ReLU(), nn.Linear(256, 12)
        )
        # Start at the identity pose (scene-centered) so early estimates stay
        # inside the mapped volume.
        final = self.pose_head[-1]
        nn.init.zeros_(final.weight)
        with torch.no_grad():
            final.bias.copy_(torch.tensor(_IDENTITY_POSE_FLAT, dtype=torch.float32))

    def _check_input(self, images: torch.Tensor) -> None:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError("expected images of shape (B, 3, H, W)")
        if images.shape[2] != self.config.height or images.shape[3] != self.config.width:
            raise ValueError(
                f"image resolution {tuple(images.shape[2:])} does not match "
                f"configured {(self.config.height, self.config.width)}"
            )

    def backbone_maps(self, images: torch.Tensor) -> list[torch.Tensor]:
        self._check_input(images)
        maps = []
        h = images
        for block in self.blocks:
            h = block(h)
            maps.append(h)
        return maps

    def regress_pose(self, images: torch.Tensor, maps=None) -> torch.Tensor:
        """Flat 3x4 pose estimates, shape (B, 12)."""
        if maps is None:
            maps = self.backbone_maps(images)
        pooled = F.adaptive_avg_pool2d(maps[-1], (4, 4)).flatten(start_dim=1)
        return self.pose_head(pooled)

    def extract_features(self, images: torch.Tensor, maps=None) -> torch.Tensor:
        """Fused per-pixel unit-norm features, shape (B, H/2, W/2, C)."""
        if maps is None:
            maps = self.backbone_maps(images)
        fused = None
        for proj, m in zip(self.projections, maps):
            p = proj(m)
            fused = p if fused is None else fused + p
        fused = fused.permute(0, 2, 3, 1)
        return F.normalize(fused, dim=-1, eps=1e-12)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        maps = self.backbone_maps(images)
        return self.regress_pose(images, maps), self.extract_features(images, maps)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for key, tensor in sorted(self.state_dict().items()):
            digest.update(key.encode())
            digest.update(tensor.detach().cpu().numpy().tobytes())
        return digest.hexdigest()


def image_to_input(image, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) array in [0, 1] -> network input batch (1, 3, H, W)."""
    tensor = torch.as_tensor(np.asarray(image), dtype=dtype)
    if tensor.dim() != 3 or tensor.shape[-1] != 3:
        raise ValueError("expected an (H, W, 3) image")
    return tensor.permute(2, 0, 1)[None]


def regress_pose(model: PoseRegressor, image) -> np.ndarray:
    """Single-image pose regression in inference mode; returns a flat 12-vector."""
    model.eval()
    with torch.no_grad():
        out = model.regress_pose(image_to_input(image))
    return out[0].numpy().astype(np.float64)


def extract_features(model: PoseRegressor, image, source: str = "real") -> ImageFeatureMap:
    """Single-image feature extraction in inference mode."""
    model.eval()
    with torch.no_grad():
        grid = model.extract_features(image_to_input(image))[0]
    return ImageFeatureMap(grid=grid, source=source)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _flatten_pose(target) -> torch.Tensor:
    if isinstance(target, Pose):
        return torch.as_tensor(target.flat, dtype=torch.float32)
    if isinstance(target, torch.Tensor):
        return target
    return torch.as_tensor(
        np.asarray(target, dtype=np.float64).reshape(-1), dtype=torch.float32
    )


def loss_pose(predicted: torch.Tensor, target) -> torch.Tensor:
    """Squared L2 over all 12 pose entries (mean over a leading batch axis)."""
    target_flat = _flatten_pose(target).to(predicted.dtype)
    diff = predicted - target_flat
    if diff.dim() == 1:
        return (diff**2).sum()
    return (diff**2).sum(dim=-1).mean()


def feature_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of the per-pixel Euclidean feature distance.

    Accepts (h, w, C) or batched (B, h, w, C); returns a scalar or (B,).
    """
    if a.shape != b.shape:
        raise ValueError("feature maps must have identical shapes")
    return (a - b).norm(dim=-1).mean(dim=(-2, -1))


def loss_image(
    real: torch.Tensor,
    rendered: torch.Tensor,
    negatives,
    margin: float = 1.0,
) -> torch.Tensor:
    """Margin triplet on feature maps: anchor = real, positive = rendered.

    ``negatives`` is a non-empty sequence of feature maps; the hardest
    (closest to the anchor) negative is used.
    """
    negatives = list(negatives)
    if not negatives:
        raise ValueError("triplet loss needs at least one negative")
    d_pos = feature_distance(real, rendered)
    d_neg = torch.stack([feature_distance(real, n) for n in negatives]).min()
    return F.relu(d_pos - d_neg + margin)


def loss_image_batch(
    real: torch.Tensor, rendered: torch.Tensor, margin: float = 1.0
) -> torch.Tensor:
    """In-batch triplet: negatives for anchor i are rendered maps j != i."""
    b = real.shape[0]
    if b < 2:
        raise ValueError("in-batch triplet needs batch size >= 2")
    d = torch.stack(
        [feature_distance(real[i : i + 1].expand_as(rendered), rendered) for i in range(b)]
    )  # (B anchors, B candidates)
    d_pos = d.diagonal()
    off_diag = d.masked_fill(torch.eye(b, dtype=torch.bool), torch.inf)
    d_neg = off_diag.min(dim=1).values
    return F.relu(d_pos - d_neg + margin).mean()


def _grid_of(m) -> torch.Tensor:
    if isinstance(m, (PoseMapImage, ImageFeatureMap)):
        return m.grid
    return m


def loss_posemap(predicted, target) -> torch.Tensor:
    """Mean per-pixel cosine distance between two feature images, in [0, 2].

    Pixels where either vector has exactly zero norm contribute 1 (treated
    as orthogonal).
    """
    a = _grid_of(predicted)
    b = _grid_of(target)
    if a.shape != b.shape:
        raise ValueError("pose maps must have identical shapes")
    dot = (a * b).sum(dim=-1)
    denom = a.norm(dim=-1) * b.norm(dim=-1)
    cos = torch.where(denom > 0, dot / denom.clamp(min=1e-30), torch.zeros_like(dot))
    return (1.0 - cos).mean()


def loss_rvs(
    predicted_pose: torch.Tensor,
    target_pose,
    predicted_map,
    target_map,
) -> torch.Tensor:
    """Synthesized-view loss: ||dp||_2 + ||dF||_2 (unsquared norms)."""
    target_flat = _flatten_pose(target_pose).to(predicted_pose.dtype)
    pose_term = (predicted_pose - target_flat).reshape(-1).norm()
    map_term = (_grid_of(predicted_map) - _grid_of(target_map)).reshape(-1).norm()
    return pose_term + map_term


@dataclass
class LossComponents:
    """Scalar loss terms of one optimization step (None = not computed)."""

    pose: torch.Tensor | None = None
    image: torch.Tensor | None = None
    posemap: torch.Tensor | None = None
    rvs: torch.Tensor | None = None


def loss_total(components: LossComponents, toggles: LossToggles) -> torch.Tensor:
    """Unit-weight sum of the enabled loss terms."""
    if not toggles.any_enabled():
        raise ValueError("no objective: every loss term is disabled")
    total = None
    for name in ("pose", "image", "posemap", "rvs"):
        if not getattr(toggles, name):
            continue
        term = getattr(components, name)
        if term is None:
            raise ValueError(f"loss term {name!r} is enabled but was not computed")
        total = term if total is None else total + term
    return total


def loss_align(
    real_features: torch.Tensor,
    rendered_features: torch.Tensor,
    negatives,
    predicted_map,
    target_map,
    margin: float = 1.0,
) -> torch.Tensor:
    """Alignment objective for unlabelled images: image + pose-map terms only."""
    return loss_image(real_features, rendered_features, negatives, margin) + loss_posemap(
        predicted_map, target_map
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_apr_checkpoint(
    path, model: PoseRegressor, stage: str, parent: str | None = None
) -> str:
    payload = {
        "config": asdict(model.config),
        "stage": stage,
        "parent": parent,
        "state": model.state_dict(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = APR_MAGIC + buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_apr_checkpoint(path) -> tuple[PoseRegressor, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(APR_MAGIC):
        raise ValueError(f"{path}: not a pose-regressor checkpoint (bad magic header)")
    payload = torch.load(io.BytesIO(data[len(APR_MAGIC) :]), weights_only=True)
    cfg = dict(payload["config"])
    cfg["backbone_channels"] = tuple(cfg["backbone_channels"])
    cfg["toggles"] = LossToggles(**cfg["toggles"])
    model = PoseRegressor(AprConfig(**cfg))
    model.load_state_dict(payload["state"])
    meta = {
        "stage": payload["stage"],
        "parent": payload["parent"],
        "checksum": hashlib.sha256(data).hexdigest(),
    }
    return model, meta
