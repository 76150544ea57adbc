"""Multi-stage training orchestration.

Stage 1 fits the field's rendering branch photometrically. Stage 2 freezes
it and fits the feature branch + decoder so rendered pose maps regress back
to their camera pose. Stage 3 trains the pose regressor against the frozen
field with rendered-view augmentation. Stage 4 adapts the regressor on
unlabelled images by re-rendering at estimated poses and aligning image and
pose-map features; ground-truth poses of unlabelled images are never read.

Each stage writes a loss log (`iter loss_total loss_pose loss_image
loss_posemap loss_rvs`) and a checkpoint that records the checkpoint it was
trained from. Runs are deterministic given the schedule seed.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from . import apr as apr_mod
from . import field as fd
from . import se3
from .apr import AprConfig, LossComponents, PoseRegressor
from .field import FieldConfig, PoseFeatureField
from .scene import Camera, DatasetManifest
from .se3 import PerturbationBounds, Pose

STAGE3_TAG = "stage3"
STAGE4_TAG = "stage4"


class MissingPrerequisiteError(RuntimeError):
    """A stage was started without the checkpoint of the previous stage."""


@dataclass
class TrainSchedule:
    """Settings for one training stage."""

    stage: int
    iterations: int = 1000
    epochs: int = 10  # stage 4: passes over the unlabelled set
    learning_rate: float = 1e-4
    batch_size: int = 4
    ray_batch: int = 1024
    stratified: bool = True  # stage-1 sample jitter
    rvs_bounds: PerturbationBounds = dc_field(
        default_factory=lambda: PerturbationBounds((0.2, 0.2, 0.2), (10.0, 10.0, 10.0))
    )
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2, 3, 4):
            raise ValueError("stage must be 1..4")
        if self.stage < 4 and self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.stage == 4:
            if self.epochs < 1:
                raise ValueError("epochs must be >= 1")
            self.batch_size = 1  # alignment runs one image at a time


class LossLog:
    """Per-iteration loss log with a fixed 6-column schema."""

    COLUMNS = ("iter", "loss_total", "loss_pose", "loss_image", "loss_posemap", "loss_rvs")

    def __init__(self, path: Path):
        self.path = Path(path)
        self.rows: list[tuple] = []

    def append(self, iteration, total, pose=0.0, image=0.0, posemap=0.0, rvs=0.0):
        self.rows.append(
            (iteration, float(total), float(pose), float(image), float(posemap), float(rvs))
        )

    def write(self):
        lines = [
            f"{it} {tot:.6f} {po:.6f} {im:.6f} {pm:.6f} {rv:.6f}"
            for it, tot, po, im, pm, rv in self.rows
        ]
        self.path.write_text("\n".join(lines) + "\n")

    def totals(self) -> list[float]:
        return [row[1] for row in self.rows]


def _train_records(manifest: DatasetManifest):
    records = manifest.split_records("train")
    if not records:
        raise ValueError("manifest has no train records")
    return records


def _load_images(manifest, records) -> torch.Tensor:
    """All record images as one (V, H, W, 3) float32 tensor."""
    return torch.stack(
        [torch.as_tensor(manifest.load_image(r), dtype=torch.float32) for r in records]
    )


def _require_stage(meta: dict, expected: str, what: str):
    if meta["stage"] != expected:
        raise MissingPrerequisiteError(
            f"{what} requires a {expected!r} checkpoint, got {meta['stage']!r}"
        )


# ---------------------------------------------------------------------------
# Stage 1: photometric training of the rendering branch
# ---------------------------------------------------------------------------


def train_stage1_render(
    manifest: DatasetManifest,
    config: FieldConfig,
    schedule: TrainSchedule,
    run_dir: Path,
    ckpt_name: str = "field_stage1.ckpt",
) -> Path:
    """Fit density and color to the training images with an L2 pixel loss."""
    records = _train_records(manifest)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    camera = manifest.camera

    torch.manual_seed(schedule.seed)
    model = PoseFeatureField(config)
    optimizer = torch.optim.Adam(model.rendering_parameters(), lr=schedule.learning_rate)
    generator = torch.Generator().manual_seed(schedule.seed)

    # Rays are pose-fixed here, so flatten every (view, pixel) pair up front.
    pixels = _load_images(manifest, records).reshape(-1, 3)
    dirs, origins = [], []
    for rec in records:
        rays = fd.sample_rays(config, camera, rec.pose)
        dirs.append(rays.directions)
        origins.append(rays.origins)
    dirs = torch.cat(dirs)
    origins = torch.cat(origins)

    n_rays = dirs.shape[0]
    n = config.samples_per_ray
    bin_width = (config.far - config.near) / n
    edges = config.near + bin_width * torch.arange(n)

    log = LossLog(run_dir / "stage1_loss.log")
    for step in range(schedule.iterations):
        idx = torch.randint(0, n_rays, (schedule.ray_batch,), generator=generator)
        d = dirs[idx]
        o = origins[idx]
        target = pixels[idx]
        if schedule.stratified:
            jitter = torch.rand((schedule.ray_batch, n), generator=generator)
        else:
            jitter = torch.full((schedule.ray_batch, n), 0.5)
        distances = edges[None, :] + jitter * bin_width
        deltas = torch.cat(
            [distances[:, 1:] - distances[:, :-1], config.far - distances[:, -1:]],
            dim=-1,
        )
        positions = o[:, None, :] + d[:, None, :] * distances[..., None]
        latent = model.point_latent(positions)
        sigma = model.density(latent)
        colors = model.color(latent, d[:, None, :].expand_as(positions))
        weights = fd.render_weights(sigma, deltas)
        rendered = fd.render_rgb(weights, colors)
        loss = ((rendered - target) ** 2).mean()

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        log.append(step, loss.item())

    log.write()
    ckpt_path = run_dir / ckpt_name
    fd.save_field_checkpoint(ckpt_path, model, fd.STAGE_RENDER)
    return ckpt_path


# ---------------------------------------------------------------------------
# Stage 2: feature branch + decoder on a frozen rendering branch
# ---------------------------------------------------------------------------


def train_stage2_pose_branch(
    field_ckpt: Path,
    manifest: DatasetManifest,
    schedule: TrainSchedule,
    run_dir: Path,
    ckpt_name: str = "field_stage2.ckpt",
) -> Path:
    """Train the feature branch and decoder to invert rendered pose maps.

    The rendering branch is frozen; its weights are verified bit-identical
    before and after. Per-view trunk latents and rendering weights are
    precomputed once since nothing upstream of the branch changes.
    """
    if not Path(field_ckpt).exists():
        raise MissingPrerequisiteError(f"stage 1 checkpoint required: {field_ckpt}")
    model, meta = fd.load_field_checkpoint(field_ckpt)
    _require_stage(meta, fd.STAGE_RENDER, "stage 2")
    records = _train_records(manifest)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    camera = manifest.camera
    config = model.config

    model.freeze_rendering_branch()
    checksum_before = model.rendering_checksum()

    s = config.posemap_downsample
    grid_h, grid_w = camera.height // s, camera.width // s
    latents, weights, targets = [], [], []
    with torch.no_grad():
        for rec in records:
            rays = fd.sample_rays(config, camera, rec.pose, (grid_h, grid_w))
            latent = model.point_latent(rays.positions)
            sigma = model.density(latent)
            latents.append(latent)
            weights.append(fd.render_weights(sigma, rays.deltas))
            targets.append(torch.as_tensor(rec.pose.flat, dtype=torch.float32))
    latents = torch.stack(latents)  # (V, R, N, W)
    weights = torch.stack(weights)  # (V, R, N)
    targets = torch.stack(targets)  # (V, 12)

    torch.manual_seed(schedule.seed + 1)
    for module in (model.pose_branch, model.decoder):
        for layer in module.modules():
            if isinstance(layer, torch.nn.Linear):
                layer.reset_parameters()
    optimizer = torch.optim.Adam(model.pose_parameters(), lr=schedule.learning_rate)
    generator = torch.Generator().manual_seed(schedule.seed)

    log = LossLog(run_dir / "stage2_loss.log")
    n_views = latents.shape[0]
    for step in range(schedule.iterations):
        idx = torch.randint(0, n_views, (schedule.batch_size,), generator=generator)
        feats = model.pose_features(latents[idx])
        maps = fd.render_features(weights[idx], feats)
        maps = maps.reshape(-1, grid_h, grid_w, config.feature_channels)
        predicted = model.decoder(maps)
        loss = apr_mod.loss_pose(predicted, targets[idx])

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        log.append(step, loss.item(), pose=loss.item())

    log.write()
    if model.rendering_checksum() != checksum_before:
        raise RuntimeError("stage 2 mutated frozen rendering-branch weights")
    model.pose_branch_trained = True
    ckpt_path = run_dir / ckpt_name
    fd.save_field_checkpoint(ckpt_path, model, fd.STAGE_POSE, parent=meta["checksum"])
    return ckpt_path


# ---------------------------------------------------------------------------
# Stage 3: pose regressor against the frozen field
# ---------------------------------------------------------------------------


@dataclass
class TrainRenderCache:
    """Frozen-field renders of the training views, shared across runs."""

    real_images: torch.Tensor  # (V, 3, H, W) oracle images as network input
    rendered_images: torch.Tensor  # (V, 3, H, W) field renders at GT poses
    gt_posemaps: torch.Tensor  # (V, h, w, C)
    gt_flat_poses: torch.Tensor  # (V, 12)
    poses: list[Pose]


def precompute_train_renders(
    model: PoseFeatureField, manifest: DatasetManifest
) -> TrainRenderCache:
    """Render each training view's image and pose map at its true pose."""
    records = _train_records(manifest)
    camera = manifest.camera
    real, rendered, maps, flats, poses = [], [], [], [], []
    with torch.no_grad():
        for rec in records:
            real.append(apr_mod.image_to_input(manifest.load_image(rec))[0])
            img = fd.render_image(model, camera, rec.pose)
            rendered.append(img.permute(2, 0, 1).clamp(0.0, 1.0))
            maps.append(fd.render_posemap(model, camera, rec.pose).grid)
            flats.append(torch.as_tensor(rec.pose.flat, dtype=torch.float32))
            poses.append(rec.pose)
    return TrainRenderCache(
        real_images=torch.stack(real),
        rendered_images=torch.stack(rendered),
        gt_posemaps=torch.stack(maps),
        gt_flat_poses=torch.stack(flats),
        poses=poses,
    )


def rvs_synthesize(
    model: PoseFeatureField,
    camera: Camera,
    pose: Pose,
    bounds: PerturbationBounds,
    seed: int,
) -> tuple[torch.Tensor, Pose, fd.PoseMapImage]:
    """Render a randomly perturbed view: (image, perturbed pose, pose map)."""
    p_rvs = se3.perturb(pose, bounds, seed)
    with torch.no_grad():
        image = fd.render_image(model, camera, p_rvs).clamp(0.0, 1.0)
        posemap = fd.render_posemap(model, camera, p_rvs)
    return image, p_rvs, posemap


def train_stage3_apr(
    field_ckpt: Path,
    manifest: DatasetManifest,
    apr_config: AprConfig,
    schedule: TrainSchedule,
    run_dir: Path,
    render_cache: TrainRenderCache | None = None,
    ckpt_name: str = "apr_stage3.ckpt",
) -> Path:
    """Train the pose regressor with pose, image-feature, pose-map, and
    synthesized-view losses. Field weights are frozen throughout."""
    if not Path(field_ckpt).exists():
        raise MissingPrerequisiteError(f"stage 2 checkpoint required: {field_ckpt}")
    field_model, meta = fd.load_field_checkpoint(field_ckpt)
    _require_stage(meta, fd.STAGE_POSE, "stage 3")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    camera = manifest.camera
    toggles = apr_config.toggles
    if toggles.image and schedule.batch_size < 2:
        raise ValueError("the image-feature loss needs batch_size >= 2 for negatives")

    field_model.freeze_all()
    field_model.eval()
    checksum_before = field_model.full_checksum()

    cache = render_cache or precompute_train_renders(field_model, manifest)
    n_views = cache.real_images.shape[0]

    torch.manual_seed(schedule.seed)
    apr_model = PoseRegressor(apr_config)
    optimizer = torch.optim.Adam(apr_model.parameters(), lr=schedule.learning_rate)
    generator = torch.Generator().manual_seed(schedule.seed)

    log = LossLog(run_dir / "stage3_loss.log")
    for step in range(schedule.iterations):
        idx = torch.randint(0, n_views, (schedule.batch_size,), generator=generator)
        real = cache.real_images[idx]
        rendered = cache.rendered_images[idx]
        gt_flat = cache.gt_flat_poses[idx]

        maps = apr_model.backbone_maps(real)
        predicted = apr_model.regress_pose(real, maps)
        components = LossComponents()

        if toggles.pose:
            components.pose = apr_mod.loss_pose(predicted, gt_flat)
        if toggles.image:
            feats_real = apr_model.extract_features(real, maps)
            feats_rendered = apr_model.extract_features(rendered)
            components.image = apr_mod.loss_image_batch(
                feats_real, feats_rendered, apr_config.triplet_margin
            )
        if toggles.posemap:
            terms = []
            for b, view in enumerate(idx.tolist()):
                est_map = fd.render_posemap(
                    field_model, camera, predicted[b].reshape(3, 4)
                )
                terms.append(
                    apr_mod.loss_posemap(est_map.grid, cache.gt_posemaps[view])
                )
            components.posemap = torch.stack(terms).mean()
        if toggles.rvs:
            rvs_images, rvs_flats, rvs_maps = [], [], []
            for b, view in enumerate(idx.tolist()):
                seed = schedule.seed * 1_000_003 + step * schedule.batch_size + b
                image, p_rvs, posemap = rvs_synthesize(
                    field_model, camera, cache.poses[view], schedule.rvs_bounds, seed
                )
                rvs_images.append(image.permute(2, 0, 1))
                rvs_flats.append(torch.as_tensor(p_rvs.flat, dtype=torch.float32))
                rvs_maps.append(posemap.grid)
            rvs_pred = apr_model.regress_pose(torch.stack(rvs_images))
            terms = []
            for b in range(len(rvs_flats)):
                est_map = fd.render_posemap(
                    field_model, camera, rvs_pred[b].reshape(3, 4)
                )
                terms.append(
                    apr_mod.loss_rvs(rvs_pred[b], rvs_flats[b], est_map.grid, rvs_maps[b])
                )
            components.rvs = torch.stack(terms).mean()

        total = apr_mod.loss_total(components, toggles)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        def _val(term):
            return 0.0 if term is None else term.item()

        log.append(
            step,
            total.item(),
            pose=_val(components.pose),
            image=_val(components.image),
            posemap=_val(components.posemap),
            rvs=_val(components.rvs),
        )

    log.write()
    if field_model.full_checksum() != checksum_before:
        raise RuntimeError("stage 3 mutated frozen field weights")
    ckpt_path = run_dir / ckpt_name
    apr_mod.save_apr_checkpoint(ckpt_path, apr_model, STAGE3_TAG, parent=meta["checksum"])
    return ckpt_path


# ---------------------------------------------------------------------------
# Stage 4: self-supervised alignment on unlabelled images
# ---------------------------------------------------------------------------


def train_stage4_align(
    apr_ckpt: Path,
    field_ckpt: Path,
    manifest: DatasetManifest,
    schedule: TrainSchedule,
    run_dir: Path,
    ckpt_name: str = "apr_stage4.ckpt",
) -> Path:
    """Adapt the regressor on unlabelled images.

    Per image: estimate a pose, re-render the scene there, regress the pose
    of the re-render, and minimize the image-feature triplet plus the
    pose-map cosine gap between the two estimates. The re-rendered pose map
    acts as a detached pseudo-label. Ground-truth poses of unlabelled
    records are never read (checked against the manifest's audit log).
    """
    if not Path(apr_ckpt).exists():
        raise MissingPrerequisiteError(f"stage 3 checkpoint required: {apr_ckpt}")
    if not Path(field_ckpt).exists():
        raise MissingPrerequisiteError(f"stage 2 checkpoint required: {field_ckpt}")
    apr_model, apr_meta = apr_mod.load_apr_checkpoint(apr_ckpt)
    if apr_meta["stage"] != STAGE3_TAG:
        raise MissingPrerequisiteError(
            f"stage 4 requires a {STAGE3_TAG!r} checkpoint, got {apr_meta['stage']!r}"
        )
    field_model, field_meta = fd.load_field_checkpoint(field_ckpt)
    _require_stage(field_meta, fd.STAGE_POSE, "stage 4")

    records = manifest.split_records("unlabelled")
    if not records:
        raise ValueError("stage 4 needs unlabelled records")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    camera = manifest.camera

    field_model.freeze_all()
    field_model.eval()
    checksum_before = field_model.full_checksum()
    audit_before = len(manifest.pose_audit)

    images = torch.stack(
        [apr_mod.image_to_input(manifest.load_image(r))[0] for r in records]
    )
    optimizer = torch.optim.Adam(apr_model.parameters(), lr=schedule.learning_rate)
    generator = torch.Generator().manual_seed(schedule.seed)
    margin = apr_model.config.triplet_margin

    # In-batch negatives do not exist at batch size 1; keep a short queue of
    # recent re-rendered feature maps instead, seeded from the last record.
    negatives: deque[torch.Tensor] = deque(maxlen=4)
    with torch.no_grad():
        seed_pose = apr_model.regress_pose(images[-1:])[0]
        seed_render = fd.render_image(
            field_model, camera, seed_pose.reshape(3, 4)
        ).clamp(0.0, 1.0)
        negatives.append(
            apr_model.extract_features(seed_render.permute(2, 0, 1)[None])[0]
        )

    log = LossLog(run_dir / "stage4_loss.log")
    step = 0
    for _epoch in range(schedule.epochs):
        order = torch.randperm(len(records), generator=generator).tolist()
        for k in order:
            real = images[k : k + 1]
            estimate = apr_model.regress_pose(real)[0]
            with torch.no_grad():
                re_render = fd.render_image(
                    field_model, camera, estimate.detach().reshape(3, 4)
                ).clamp(0.0, 1.0)
                target_map = fd.render_posemap(
                    field_model, camera, estimate.detach().reshape(3, 4)
                )
            rendered = re_render.permute(2, 0, 1)[None]
            re_estimate = apr_model.regress_pose(rendered)[0]
            est_map = fd.render_posemap(field_model, camera, re_estimate.reshape(3, 4))

            feats_real = apr_model.extract_features(real)[0]
            feats_rendered = apr_model.extract_features(rendered)[0]
            loss = apr_mod.loss_align(
                feats_real,
                feats_rendered,
                list(negatives),
                est_map.grid,
                target_map.grid,
                margin,
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            image_part = apr_mod.loss_image(
                feats_real.detach(), feats_rendered.detach(), list(negatives), margin
            ).item()
            log.append(step, loss.item(), image=image_part,
                       posemap=loss.item() - image_part)
            negatives.append(feats_rendered.detach())
            step += 1

    log.write()
    if field_model.full_checksum() != checksum_before:
        raise RuntimeError("stage 4 mutated frozen field weights")
    unlabelled_reads = len(manifest.pose_audit) - audit_before
    (run_dir / "stage4_audit.txt").write_text(
        f"unlabelled_pose_reads_during_training={unlabelled_reads}\n"
    )
    if unlabelled_reads:
        raise RuntimeError("stage 4 read ground-truth poses of unlabelled images")
    ckpt_path = run_dir / ckpt_name
    apr_mod.save_apr_checkpoint(
        ckpt_path, apr_model, STAGE4_TAG, parent=apr_meta["checksum"]
    )
    return ckpt_path
