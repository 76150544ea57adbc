"""The pose-feature radiance field and its differentiable volumetric renderer.

A single positionally-encoded MLP trunk predicts density; a view-conditioned
head predicts color; a separate branch maps the trunk latent to a per-point
feature vector. Accumulating those per-point features along camera rays with
the standard volume-rendering weights

    w_i = T_i * (1 - exp(-sigma_i * delta_i)),   T_i = exp(-sum_{j<i} sigma_j delta_j)

yields a feature image (a "pose map") that is a smooth, differentiable
function of the camera pose. A small MLP decoder maps a pooled pose map back
to a flat 3x4 pose, which is how the feature branch is supervised.

Rendering is differentiable with respect to the camera pose: passing a 3x4
torch tensor (instead of a :class:`~posemap.se3.Pose`) threads gradients
through ray origins, directions, and sample positions.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .scene import Camera
from .se3 import Pose

FIELD_MAGIC = b"NERFP1\n"

STAGE_RENDER = "render-trained"
STAGE_POSE = "pose-trained"


@dataclass(frozen=True)
class FieldConfig:
    """Field architecture and sampling settings.

    Defaults are desk-scale; the full-scale operating point (C=256, widths
    (1536, 256, 128, 12), x16 downsample) is reachable by configuration.
    """

    pe_frequencies_position: int = 6
    pe_frequencies_direction: int = 2
    trunk_width: int = 64
    trunk_depth: int = 4
    feature_channels: int = 64
    samples_per_ray: int = 24
    near: float = 0.5
    far: float = 7.0
    posemap_downsample: int = 16
    decoder_widths: tuple[int, ...] = (1536, 256, 128, 12)

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.decoder_widths[-1] != 12:
            raise ValueError("decoder_widths must end in 12 (a flat 3x4 pose)")
        if self.decoder_widths[0] % self.feature_channels:
            raise ValueError(
                "decoder_widths[0] must be a multiple of feature_channels"
            )
        if self.posemap_downsample < 1:
            raise ValueError("posemap_downsample must be >= 1")
        object.__setattr__(self, "decoder_widths", tuple(self.decoder_widths))


def positional_encoding(x: torch.Tensor, n_frequencies: int) -> torch.Tensor:
    """Fourier features: the input plus sin/cos at octave frequencies."""
    parts = [x]
    for k in range(n_frequencies):
        scaled = x * (2.0**k)
        parts.append(torch.sin(scaled))
        parts.append(torch.cos(scaled))
    return torch.cat(parts, dim=-1)


def _encoded_dim(n_frequencies: int) -> int:
    return 3 * (1 + 2 * n_frequencies)


@dataclass
class RaySamples:
    """A batch of rays with their quadrature points.

    ``origins``/``directions``: (P, 3); ``distances``: (P, N) strictly
    increasing in [near, far]; ``deltas``: (P, N) inter-sample spacings with
    the last entry closing the interval to the far plane.
    """

    origins: torch.Tensor
    directions: torch.Tensor
    distances: torch.Tensor
    deltas: torch.Tensor

    @property
    def positions(self) -> torch.Tensor:
        return (
            self.origins[:, None, :]
            + self.directions[:, None, :] * self.distances[..., None]
        )


@dataclass
class RayRenderBundle:
    """Everything the renderer knows about a ray batch, for probing/tests."""

    origins: torch.Tensor
    directions: torch.Tensor
    distances: torch.Tensor
    deltas: torch.Tensor
    densities: torch.Tensor
    colors: torch.Tensor
    pose_features: torch.Tensor


@dataclass
class PoseMapImage:
    """A rendered (h, w, C) grid of volumetrically accumulated features.

    ``full_resolution`` records whether the grid was rendered on the full
    camera pixel grid (and therefore still needs the decoder's downsample
    step) rather than on the reduced default grid.
    """

    grid: torch.Tensor
    source_pose: np.ndarray
    channels: int
    full_resolution: bool = False

    def __post_init__(self):
        if self.grid.shape[-1] != self.channels:
            raise ValueError("grid channel count disagrees with channels")
        if not torch.isfinite(self.grid.detach()).all():
            raise ValueError("pose map contains non-finite entries")

    def numpy(self) -> np.ndarray:
        return self.grid.detach().cpu().numpy()


def pose_matrix_tensor(pose, dtype=torch.float32) -> torch.Tensor:
    """A pose as a (3, 4) tensor; tensors pass through with autograd intact."""
    if isinstance(pose, torch.Tensor):
        if pose.shape == (12,):
            pose = pose.reshape(3, 4)
        if pose.shape != (3, 4):
            raise ValueError(f"pose tensor must be (3, 4) or (12,), got {tuple(pose.shape)}")
        return pose.to(dtype)
    if isinstance(pose, Pose):
        return torch.as_tensor(pose.matrix, dtype=dtype)
    arr = np.asarray(pose, dtype=np.float64)
    if arr.shape == (12,):
        arr = arr.reshape(3, 4)
    if arr.shape != (3, 4):
        raise ValueError(f"pose must be (3, 4) or flat 12, got {arr.shape}")
    return torch.as_tensor(arr, dtype=dtype)


def sample_rays(
    config: FieldConfig,
    camera: Camera,
    pose,
    resolution: tuple[int, int] | None = None,
    stratified: bool = False,
    generator: torch.Generator | None = None,
    dtype=torch.float32,
) -> RaySamples:
    """Cast one ray per cell of ``resolution`` (default: full camera grid).

    Sample distances are the N bin midpoints of [near, far], or uniform
    within each bin when ``stratified``. Reduced resolutions must divide the
    camera resolution and sample pixel-block centers.
    """
    matrix = pose_matrix_tensor(pose, dtype=dtype)
    dtype = matrix.dtype
    cam_dirs = torch.as_tensor(
        camera.pixel_directions(resolution).reshape(-1, 3), dtype=dtype
    )
    directions = cam_dirs @ matrix[:, :3].T
    directions = directions / directions.norm(dim=-1, keepdim=True)
    origins = matrix[:, 3].expand_as(directions)

    n = config.samples_per_ray
    bin_width = (config.far - config.near) / n
    edges = config.near + bin_width * torch.arange(n, dtype=dtype)
    if stratified:
        jitter = torch.rand(
            (directions.shape[0], n), generator=generator, dtype=dtype
        )
    else:
        jitter = torch.full((1, n), 0.5, dtype=dtype)
    distances = (edges[None, :] + jitter * bin_width).expand(directions.shape[0], n)
    deltas = torch.cat(
        [distances[:, 1:] - distances[:, :-1], config.far - distances[:, -1:]], dim=-1
    )
    return RaySamples(origins, directions, distances, deltas)


def transmittance(sigma: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """T_1..T_{N+1} per ray: the fraction of light surviving to each sample
    (and, in the last slot, past the far plane). Shape (..., N+1)."""
    optical_depth = torch.cumsum(sigma * delta, dim=-1)
    ones = torch.ones_like(optical_depth[..., :1])
    return torch.cat([ones, torch.exp(-optical_depth)], dim=-1)


def render_weights(sigma: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """Per-sample rendering weights w_i = T_i * (1 - exp(-sigma_i delta_i))."""
    if sigma.shape != delta.shape:
        raise ValueError("sigma and delta must have matching shapes")
    if torch.any(sigma < 0):
        raise ValueError("densities must be non-negative")
    if torch.any(delta <= 0):
        raise ValueError("sample spacings must be positive")
    trans = transmittance(sigma, delta)
    return trans[..., :-1] * (1.0 - torch.exp(-sigma * delta))


def render_features(weights: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Accumulate per-sample vectors: sum_i w_i v_i along the sample axis."""
    if weights.shape != values.shape[:-1]:
        raise ValueError("weights must match values minus the channel axis")
    return (weights[..., None] * values).sum(dim=-2)


def render_rgb(weights: torch.Tensor, colors: torch.Tensor) -> torch.Tensor:
    """Composite per-sample colors into pixel RGB (no background term)."""
    if colors.shape[-1] != 3:
        raise ValueError("colors must have 3 channels")
    return render_features(weights, colors)


class PoseMapDecoder(nn.Module):
    """Pools a feature map to a fixed cell count and regresses a flat pose.

    Full-resolution maps are first average-pooled by the configured
    downsample factor; every map is then adaptively average-pooled to
    G = widths[0] / C cells, flattened channels-last, and passed through
    the MLP stack.
    """

    def __init__(self, widths: tuple[int, ...], channels: int, downsample: int):
        super().__init__()
        if widths[0] % channels:
            raise ValueError("first decoder width must be a multiple of channels")
        self.channels = channels
        self.downsample = downsample
        cells = widths[0] // channels
        gh = max(d for d in range(1, int(cells**0.5) + 1) if cells % d == 0)
        self.pool_grid = (gh, cells // gh)
        layers: list[nn.Module] = []
        for a, b in zip(widths[:-1], widths[1:]):
            layers.append(nn.Linear(a, b))
            layers.append(nn.ReLU())
        layers.pop()  # final layer is linear
        self.mlp = nn.Sequential(*layers)

    def forward(self, grid: torch.Tensor, full_resolution: bool = False) -> torch.Tensor:
        batched = grid.dim() == 4
        if not batched:
            grid = grid[None]
        if grid.shape[-1] != self.channels:
            raise ValueError(
                f"pose map has {grid.shape[-1]} channels, decoder expects {self.channels}"
            )
        x = grid.permute(0, 3, 1, 2)  # (B, C, h, w)
        if full_resolution:
            s = self.downsample
            if x.shape[-2] % s or x.shape[-1] % s:
                raise ValueError(
                    "full-resolution map is not divisible by the downsample factor"
                )
            x = F.avg_pool2d(x, s)
        x = F.adaptive_avg_pool2d(x, self.pool_grid)
        x = x.permute(0, 2, 3, 1).flatten(start_dim=1)
        out = self.mlp(x)
        return out if batched else out[0]


class PoseFeatureField(nn.Module):
    """Density/color field plus the per-point feature branch and decoder.

    The rendering branch (trunk, density head, color head) and the pose
    branch (feature encoder, decoder) are deliberately separable so the
    former can be trained first and frozen.
    """

    TRUNK_SKIP = 2  # re-inject the encoded position after this many layers

    def __init__(self, config: FieldConfig):
        super().__init__()
        self.config = config
        in_dim = _encoded_dim(config.pe_frequencies_position)
        dir_dim = _encoded_dim(config.pe_frequencies_direction)
        width = config.trunk_width

        self._skip_after = (
            self.TRUNK_SKIP if config.trunk_depth > self.TRUNK_SKIP else None
        )
        layers = []
        last = in_dim
        for i in range(config.trunk_depth):
            layers.append(nn.Linear(last, width))
            last = width + in_dim if i + 1 == self._skip_after else width
        self.trunk = nn.ModuleList(layers)
        self.sigma_head = nn.Linear(width, 1)
        self.color_head = nn.Sequential(
            nn.Linear(width + dir_dim, width // 2),
            nn.ReLU(),
            nn.Linear(width // 2, 3),
        )
        self.pose_branch = nn.Sequential(
            nn.Linear(width, width),
            nn.ReLU(),
            nn.Linear(width, config.feature_channels),
        )
        self.decoder = PoseMapDecoder(
            config.decoder_widths, config.feature_channels, config.posemap_downsample
        )
        self.pose_branch_trained = False

    # -- raw field evaluation ------------------------------------------------

    def point_latent(self, positions: torch.Tensor) -> torch.Tensor:
        x = positional_encoding(positions, self.config.pe_frequencies_position)
        h = x
        for i, layer in enumerate(self.trunk):
            h = F.relu(layer(h))
            if i + 1 == self._skip_after:
                h = torch.cat([h, x], dim=-1)
        return h

    def density(self, latent: torch.Tensor) -> torch.Tensor:
        # Shifted softplus keeps sigma >= 0 with stable gradients.
        return F.softplus(self.sigma_head(latent).squeeze(-1) - 1.0)

    def color(self, latent: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
        d = positional_encoding(directions, self.config.pe_frequencies_direction)
        return torch.sigmoid(self.color_head(torch.cat([latent, d], dim=-1)))

    def pose_features(self, latent: torch.Tensor, detach_trunk: bool = False) -> torch.Tensor:
        if detach_trunk:
            latent = latent.detach()
        return self.pose_branch(latent)

    def field_eval(self, position, direction=None, branch: str = "render"):
        """Evaluate the field at points.

        ``branch='render'`` returns ``(sigma, rgb)``; ``branch='pose'``
        returns per-point feature vectors (valid, but untrained, before the
        pose branch has been fit; checkpoints carry that flag).
        """
        pos = torch.as_tensor(position, dtype=self._dtype())
        single = pos.dim() == 1
        if single:
            pos = pos[None]
        latent = self.point_latent(pos)
        if branch == "render":
            if direction is None:
                raise ValueError("render branch needs a view direction")
            d = torch.as_tensor(direction, dtype=pos.dtype)
            if single:
                d = d[None]
            sigma = self.density(latent)
            rgb = self.color(latent, d)
            return (sigma[0], rgb[0]) if single else (sigma, rgb)
        if branch == "pose":
            feats = self.pose_features(latent)
            return feats[0] if single else feats
        raise ValueError(f"unknown branch {branch!r}")

    # -- parameter groups ----------------------------------------------------

    def rendering_parameters(self):
        for module in (self.trunk, self.sigma_head, self.color_head):
            yield from module.parameters()

    def pose_parameters(self):
        for module in (self.pose_branch, self.decoder):
            yield from module.parameters()

    def freeze_rendering_branch(self):
        for p in self.rendering_parameters():
            p.requires_grad_(False)

    def freeze_all(self):
        for p in self.parameters():
            p.requires_grad_(False)

    def rendering_checksum(self) -> str:
        return _params_checksum(
            [("trunk", self.trunk), ("sigma", self.sigma_head), ("color", self.color_head)]
        )

    def full_checksum(self) -> str:
        return _params_checksum([("field", self)])

    def _dtype(self):
        return next(self.parameters()).dtype


def _params_checksum(named_modules) -> str:
    digest = hashlib.sha256()
    for name, module in named_modules:
        for key, tensor in sorted(module.state_dict().items()):
            digest.update(name.encode())
            digest.update(key.encode())
            digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Whole-image rendering
# ---------------------------------------------------------------------------


def _ray_chunks(n_rays: int, chunk: int):
    for start in range(0, n_rays, chunk):
        yield slice(start, min(start + chunk, n_rays))


def render_bundle(model: PoseFeatureField, rays: RaySamples) -> RayRenderBundle:
    """Evaluate every branch on a ray batch; for probing and oracle tests."""
    positions = rays.positions
    directions = rays.directions[:, None, :].expand_as(positions)
    latent = model.point_latent(positions)
    return RayRenderBundle(
        origins=rays.origins,
        directions=rays.directions,
        distances=rays.distances,
        deltas=rays.deltas,
        densities=model.density(latent),
        colors=model.color(latent, directions),
        pose_features=model.pose_features(latent),
    )


def render_image(
    model: PoseFeatureField,
    camera: Camera,
    pose,
    resolution: tuple[int, int] | None = None,
    stratified: bool = False,
    generator: torch.Generator | None = None,
    chunk: int = 8192,
) -> torch.Tensor:
    """Render an RGB image (h, w, 3) by volumetric compositing."""
    h, w = resolution if resolution is not None else (camera.height, camera.width)
    rays = sample_rays(
        model.config, camera, pose, (h, w), stratified, generator, model._dtype()
    )
    out = []
    for sl in _ray_chunks(h * w, chunk):
        sub = RaySamples(
            rays.origins[sl], rays.directions[sl], rays.distances[sl], rays.deltas[sl]
        )
        positions = sub.positions
        latent = model.point_latent(positions)
        sigma = model.density(latent)
        colors = model.color(latent, sub.directions[:, None, :].expand_as(positions))
        weights = render_weights(sigma, sub.deltas)
        out.append(render_rgb(weights, colors))
    return torch.cat(out, dim=0).reshape(h, w, 3)


def _render_feature_map(
    model: PoseFeatureField,
    camera: Camera,
    pose,
    feature_source: str,
    resolution: tuple[int, int] | None,
    stratified: bool,
    generator: torch.Generator | None,
    detach_trunk: bool,
) -> PoseMapImage:
    cfg = model.config
    if resolution is None:
        s = cfg.posemap_downsample
        if camera.height % s or camera.width % s:
            raise ValueError("posemap downsample must divide the camera resolution")
        resolution = (camera.height // s, camera.width // s)
    h, w = resolution
    rays = sample_rays(cfg, camera, pose, (h, w), stratified, generator, model._dtype())
    positions = rays.positions
    latent = model.point_latent(positions)
    sigma = model.density(latent)
    if feature_source == "pose":
        feats = model.pose_features(latent, detach_trunk=detach_trunk)
        channels = cfg.feature_channels
    else:
        # Shared-trunk features, truncated to the configured channel count.
        if cfg.trunk_width < cfg.feature_channels:
            raise ValueError(
                "trunk width must be >= feature_channels to render trunk features"
            )
        feats = latent[..., : cfg.feature_channels]
        channels = cfg.feature_channels
    weights = render_weights(sigma, rays.deltas)
    grid = render_features(weights, feats).reshape(h, w, channels)
    source = pose_matrix_tensor(pose, dtype=torch.float64).detach().cpu().numpy()
    return PoseMapImage(
        grid=grid,
        source_pose=source,
        channels=channels,
        full_resolution=(h, w) == (camera.height, camera.width),
    )


def render_posemap(
    model: PoseFeatureField,
    camera: Camera,
    pose,
    resolution: tuple[int, int] | None = None,
    stratified: bool = False,
    generator: torch.Generator | None = None,
    allow_untrained: bool = False,
    detach_trunk: bool = False,
) -> PoseMapImage:
    """Volumetrically accumulate pose-branch features into a feature image.

    Default resolution is the camera grid reduced by the configured
    downsample factor. Differentiable with respect to a tensor pose.
    """
    if not model.pose_branch_trained and not allow_untrained:
        raise RuntimeError(
            "pose branch is untrained; pass allow_untrained=True to render anyway"
        )
    return _render_feature_map(
        model, camera, pose, "pose", resolution, stratified, generator, detach_trunk
    )


def render_nerfmap(
    model: PoseFeatureField,
    camera: Camera,
    pose,
    resolution: tuple[int, int] | None = None,
    stratified: bool = False,
    generator: torch.Generator | None = None,
) -> PoseMapImage:
    """Baseline feature image taken from the last shared trunk layer."""
    return _render_feature_map(
        model, camera, pose, "trunk", resolution, stratified, generator, False
    )


def decode_pose(model: PoseFeatureField, posemap: PoseMapImage) -> torch.Tensor:
    """Map a pose map to a flat 12-value pose estimate."""
    return model.decoder(posemap.grid, full_resolution=posemap.full_resolution)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_field_checkpoint(
    path, model: PoseFeatureField, stage: str, parent: str | None = None
) -> str:
    """Write a versioned field checkpoint; returns its content hash."""
    if stage not in (STAGE_RENDER, STAGE_POSE):
        raise ValueError(f"unknown stage tag {stage!r}")
    payload = {
        "config": asdict(model.config),
        "stage": stage,
        "pose_branch_trained": model.pose_branch_trained,
        "parent": parent,
        "state": model.state_dict(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = FIELD_MAGIC + buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_field_checkpoint(path) -> tuple[PoseFeatureField, dict]:
    """Load a field checkpoint; returns the model and its metadata."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(FIELD_MAGIC):
        raise ValueError(f"{path}: not a field checkpoint (bad magic header)")
    payload = torch.load(io.BytesIO(data[len(FIELD_MAGIC) :]), weights_only=True)
    cfg_dict = dict(payload["config"])
    cfg_dict["decoder_widths"] = tuple(cfg_dict["decoder_widths"])
    model = PoseFeatureField(FieldConfig(**cfg_dict))
    model.load_state_dict(payload["state"])
    model.pose_branch_trained = payload["pose_branch_trained"]
    meta = {
        "stage": payload["stage"],
        "parent": payload["parent"],
        "pose_branch_trained": payload["pose_branch_trained"],
        "checksum": hashlib.sha256(data).hexdigest(),
    }
    return model, meta
