"""Procedural synthetic scenes, an analytic ray-casting renderer, and dataset I/O.

The renderer is deliberately simple: flat-albedo primitives (spheres and
axis-aligned cubes) on a constant background, no shading. Every pixel is
computed in closed form, which makes it an exact reference that learned
renderers can be checked against. Datasets are manifests of image/pose
records with ``train`` / ``test`` / ``unlabelled`` split tags.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import se3
from .se3 import Pose

_HIT_EPS = 1e-6

SPLITS = ("train", "test", "unlabelled")


@dataclass(frozen=True)
class Primitive:
    """A flat-albedo solid: a sphere (``size`` = radius) or an axis-aligned
    cube (``size`` = half edge length)."""

    shape: str
    center: np.ndarray
    size: float
    albedo: np.ndarray

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        center = np.asarray(self.center, dtype=np.float64)
        albedo = np.asarray(self.albedo, dtype=np.float64)
        if center.shape != (3,) or albedo.shape != (3,):
            raise ValueError("center and albedo must be 3-vectors")
        if self.size <= 0:
            raise ValueError("primitive size must be positive")
        if np.any(albedo < 0) or np.any(albedo > 1):
            raise ValueError("albedo must lie in [0, 1]")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "albedo", albedo)

    def contains(self, point: np.ndarray) -> bool:
        delta = np.asarray(point) - self.center
        if self.shape == "sphere":
            return float(np.linalg.norm(delta)) < self.size
        return bool(np.all(np.abs(delta) < self.size))


@dataclass(frozen=True)
class SceneDescription:
    """A set of primitives inside an axis-aligned bounding box (meters)."""

    primitives: tuple[Primitive, ...]
    background_color: np.ndarray
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray

    def __post_init__(self):
        prims = tuple(self.primitives)
        if len(prims) < 3:
            raise ValueError("scene needs at least 3 primitives")
        bg = np.asarray(self.background_color, dtype=np.float64)
        lo = np.asarray(self.bounds_lo, dtype=np.float64)
        hi = np.asarray(self.bounds_hi, dtype=np.float64)
        if bg.shape != (3,) or lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("background_color and bounds must be 3-vectors")
        if np.any(lo >= hi):
            raise ValueError("bounds_lo must be strictly below bounds_hi")
        for p in prims:
            if np.any(p.center - p.size < lo) or np.any(p.center + p.size > hi):
                raise ValueError(f"primitive at {p.center} extends outside bounds")
        object.__setattr__(self, "primitives", prims)
        object.__setattr__(self, "background_color", bg)
        object.__setattr__(self, "bounds_lo", lo)
        object.__setattr__(self, "bounds_hi", hi)

    @property
    def centroid(self) -> np.ndarray:
        return np.mean([p.center for p in self.primitives], axis=0)

    @property
    def diameter(self) -> float:
        """Diagonal of the tight axis-aligned box around the primitives."""
        lo = np.min([p.center - p.size for p in self.primitives], axis=0)
        hi = np.max([p.center + p.size for p in self.primitives], axis=0)
        return float(np.linalg.norm(hi - lo))

    def contains_point(self, point) -> bool:
        point = np.asarray(point)
        return bool(np.all(point >= self.bounds_lo) and np.all(point <= self.bounds_hi))


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics; pixel rays go through pixel centers."""

    focal: float
    principal_point: tuple[float, float]
    width: int
    height: int

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        cx, cy = self.principal_point
        if not (0 < cx < self.width and 0 < cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def pixel_directions(self, resolution: tuple[int, int] | None = None) -> np.ndarray:
        """Unit camera-frame ray directions, shape (h, w, 3).

        ``resolution`` below the native one samples the centers of the
        corresponding pixel blocks; it must divide the native resolution.
        """
        h, w = resolution if resolution is not None else (self.height, self.width)
        if self.height % h or self.width % w:
            raise ValueError(
                f"resolution {(h, w)} must divide camera {(self.height, self.width)}"
            )
        sy, sx = self.height / h, self.width / w
        cx, cy = self.principal_point
        us = (np.arange(w) + 0.5) * sx - cx
        vs = (np.arange(h) + 0.5) * sy - cy
        u, v = np.meshgrid(us, vs)
        dirs = np.stack([u / self.focal, v / self.focal, np.ones_like(u)], axis=-1)
        return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def _intersect_sphere(origins, dirs, center, radius):
    oc = origins - center
    b = np.sum(oc * dirs, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc >= 0
    sqrt_disc = np.sqrt(np.where(hit, disc, 0.0))
    t_near = -b - sqrt_disc
    t_far = -b + sqrt_disc
    t = np.where(t_near >= _HIT_EPS, t_near, t_far)
    return np.where(hit & (t >= _HIT_EPS), t, np.inf)


def _intersect_box(origins, dirs, center, half):
    lo = center - half
    hi = center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origins) / dirs
        t2 = (hi - origins) / dirs
    # Rays parallel to a slab: inside -> (-inf, +inf), outside -> miss.
    parallel = dirs == 0
    inside = (origins >= lo) & (origins <= hi)
    t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
    t_near = np.max(np.minimum(t1, t2), axis=-1)
    t_far = np.min(np.maximum(t1, t2), axis=-1)
    t = np.where(t_near >= _HIT_EPS, t_near, t_far)
    hit = (t_far >= t_near) & (t >= _HIT_EPS)
    return np.where(hit, t, np.inf)


def raycast_oracle(
    scene: SceneDescription, camera: Camera, pose: Pose
) -> tuple[np.ndarray, np.ndarray]:
    """Exact first-hit rendering of a scene.

    Returns an RGB image (H, W, 3) in [0, 1] holding the albedo of the first
    primitive each pixel ray hits (background color on miss) and a depth
    image (H, W) of Euclidean first-hit distances, with 0 encoding a miss.
    """
    if not scene.contains_point(pose.translation):
        raise ValueError("camera pose lies outside scene bounds")
    for prim in scene.primitives:
        if prim.contains(pose.translation):
            raise ValueError("degenerate viewpoint: camera inside a primitive")

    dirs = camera.pixel_directions() @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)

    best_t = np.full(dirs.shape[:2], np.inf)
    best_idx = np.full(dirs.shape[:2], -1, dtype=np.int64)
    for idx, prim in enumerate(scene.primitives):
        if prim.shape == "sphere":
            t = _intersect_sphere(origins, dirs, prim.center, prim.size)
        else:
            t = _intersect_box(origins, dirs, prim.center, prim.size)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_idx = np.where(closer, idx, best_idx)

    rgb = np.tile(scene.background_color, (*dirs.shape[:2], 1))
    for idx, prim in enumerate(scene.primitives):
        rgb[best_idx == idx] = prim.albedo
    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    return rgb, depth


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose at ``eye`` looking toward ``target``.

    Camera axes: x right, y down, z forward (image rows grow downward).
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ValueError("eye and target coincide")
    forward = forward / norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, (1.0, 0.0, 0.0))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), eye)


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    image_path: str
    pose: Pose | None
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.split != "unlabelled" and self.pose is None:
            raise ValueError(f"{self.split} record requires a pose")


@dataclass
class DatasetManifest:
    """Image/pose records plus the camera they were captured with.

    Unlabelled records expose ``pose=None``; their ground-truth poses, when
    known, are kept in a hidden side table that only :meth:`eval_pose` can
    reach, and every such access is recorded in :attr:`pose_audit`.
    """

    records: list[ManifestRecord]
    spacing_window: int
    camera: Camera
    root: Path | None = None
    hidden_poses: dict[str, Pose] = field(default_factory=dict, repr=False)
    pose_audit: list[str] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.spacing_window < 1:
            raise ValueError("spacing_window must be >= 1")
        seen = set()
        for rec in self.records:
            if rec.image_path in seen:
                raise ValueError(f"duplicate image path {rec.image_path!r}")
            seen.add(rec.image_path)

    def split_records(self, split: str) -> list[ManifestRecord]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def eval_pose(self, record: ManifestRecord) -> Pose:
        """Ground-truth pose for evaluation; audited for unlabelled records."""
        if record.pose is not None:
            return record.pose
        if record.image_path in self.hidden_poses:
            self.pose_audit.append(record.image_path)
            return self.hidden_poses[record.image_path]
        raise KeyError(f"no ground-truth pose known for {record.image_path!r}")

    def image_file(self, record: ManifestRecord) -> Path:
        path = Path(record.image_path)
        if self.root is not None and not path.is_absolute():
            path = self.root / path
        return path

    def load_image(self, record: ManifestRecord) -> np.ndarray:
        """Image as float RGB in [0, 1], shape (H, W, 3)."""
        with Image.open(self.image_file(record)) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        return arr


def merge_manifests(manifests: list[DatasetManifest]) -> DatasetManifest:
    if not manifests:
        raise ValueError("nothing to merge")
    first = manifests[0]
    records: list[ManifestRecord] = []
    hidden: dict[str, Pose] = {}
    for m in manifests:
        if m.camera != first.camera or m.spacing_window != first.spacing_window:
            raise ValueError("manifests disagree on camera or spacing window")
        records.extend(m.records)
        hidden.update(m.hidden_poses)
    return DatasetManifest(
        records, first.spacing_window, first.camera, first.root, hidden
    )


def save_image(path: Path, rgb: np.ndarray) -> None:
    data = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def generate_dataset(
    scene: SceneDescription,
    camera: Camera,
    n_views: int,
    strategy: str,
    seed: int,
    out_dir: Path,
    split: str = "train",
    orbit_radius: float = 2.4,
    orbit_height: float = 1.2,
    orbit_phase: float = 0.0,
    shell_radii: tuple[float, float] = (2.4, 3.0),
    prefix: str | None = None,
) -> DatasetManifest:
    """Render ``n_views`` oracle images of the scene and write them to disk.

    ``orbit`` places cameras at equal azimuths on a circle around the scene
    centroid; ``random-in-shell`` draws camera centers uniformly from a
    spherical shell around the centroid. All cameras look at the centroid.
    """
    if n_views < 2:
        raise ValueError("need at least 2 views")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    target = scene.centroid
    rng = np.random.default_rng(seed)

    eyes = []
    if strategy == "orbit":
        for k in range(n_views):
            phi = orbit_phase + 2.0 * math.pi * k / n_views
            eyes.append(
                target
                + np.array(
                    [
                        orbit_radius * math.cos(phi),
                        orbit_radius * math.sin(phi),
                        orbit_height,
                    ]
                )
            )
    elif strategy == "random-in-shell":
        r_lo, r_hi = shell_radii
        if not 0 < r_lo <= r_hi:
            raise ValueError("shell radii must satisfy 0 < r_lo <= r_hi")
        for _ in range(n_views):
            # Polar angle kept off the vertical so look_at stays well posed.
            cos_theta = rng.uniform(-0.6, 0.6)
            phi = rng.uniform(0.0, 2.0 * math.pi)
            radius = rng.uniform(r_lo, r_hi)
            sin_theta = math.sqrt(1.0 - cos_theta * cos_theta)
            eyes.append(
                target
                + radius
                * np.array(
                    [sin_theta * math.cos(phi), sin_theta * math.sin(phi), cos_theta]
                )
            )
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    prefix = prefix or split
    records = []
    for k, eye in enumerate(eyes):
        pose = look_at(eye, target)
        rgb, _ = raycast_oracle(scene, camera, pose)
        rel_path = f"images/{prefix}_{k:04d}.png"
        save_image(out_dir / rel_path, rgb)
        records.append(ManifestRecord(rel_path, pose, split))
    return DatasetManifest(records, 1, camera, root=out_dir)


def subsample(manifest: DatasetManifest, d: int) -> DatasetManifest:
    """Keep every d-th train record (in manifest order); other splits untouched."""
    if d < 1:
        raise ValueError("spacing window must be >= 1")
    train_index = 0
    records = []
    for rec in manifest.records:
        if rec.split == "train":
            if train_index % d == 0:
                records.append(rec)
            train_index += 1
        else:
            records.append(rec)
    return DatasetManifest(
        records, d, manifest.camera, manifest.root, dict(manifest.hidden_poses)
    )


def split_unlabelled(
    manifest: DatasetManifest, fraction: float, seed: int
) -> DatasetManifest:
    """Re-tag a random test-pool fraction as unlabelled, hiding their poses.

    The ground-truth poses of re-tagged records move to the hidden side
    table, so they stay invisible to training code but remain available
    for post-hoc evaluation.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    pool = [i for i, r in enumerate(manifest.records) if r.split == "test"]
    if not pool:
        raise ValueError("manifest has no test pool to draw unlabelled images from")
    n_unlabelled = int(fraction * len(pool))
    rng = np.random.default_rng(seed)
    chosen = {pool[k] for k in rng.permutation(len(pool))[:n_unlabelled].tolist()}

    records = []
    hidden = dict(manifest.hidden_poses)
    for i, rec in enumerate(manifest.records):
        if i in chosen:
            hidden[rec.image_path] = rec.pose
            records.append(ManifestRecord(rec.image_path, None, "unlabelled"))
        else:
            records.append(rec)
    return DatasetManifest(
        records, manifest.spacing_window, manifest.camera, manifest.root, hidden
    )


def save_manifest(manifest: DatasetManifest, path: Path) -> None:
    """Write the manifest text format.

    Header: ``spacing_window=<d> width=<w> height=<h> focal=<f>``. Then one
    record per line: ``<split> <image_path> <12 pose values | ->``. The
    format assumes a centered principal point and whitespace-free paths.
    """
    cam = manifest.camera
    cx, cy = cam.principal_point
    if (cx, cy) != (cam.width / 2.0, cam.height / 2.0):
        raise ValueError("manifest format assumes a centered principal point")
    lines = [
        f"spacing_window={manifest.spacing_window} width={cam.width} "
        f"height={cam.height} focal={repr(float(cam.focal))}"
    ]
    for rec in manifest.records:
        if any(c.isspace() for c in rec.image_path):
            raise ValueError(f"image path contains whitespace: {rec.image_path!r}")
        pose_str = "-" if rec.pose is None else se3.pose_to_line(rec.pose)
        lines.append(f"{rec.split} {rec.image_path} {pose_str}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    header = {}
    for token in lines[0].split():
        key, _, value = token.partition("=")
        header[key] = value
    try:
        d = int(header["spacing_window"])
        width = int(header["width"])
        height = int(header["height"])
        focal = float(header["focal"])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed header line 1: {exc}") from exc
    camera = Camera(focal, (width / 2.0, height / 2.0), width, height)

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(maxsplit=2)
        if len(parts) != 3:
            raise ValueError(f"{path}: malformed record at line {lineno}")
        split, image_path, pose_str = parts
        try:
            pose = None if pose_str == "-" else se3.pose_from_line(pose_str)
            records.append(ManifestRecord(image_path, pose, split))
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    return DatasetManifest(records, d, camera, root=path.parent)


# ---------------------------------------------------------------------------
# Desk-scale defaults
# ---------------------------------------------------------------------------


def desk_scene() -> SceneDescription:
    """The default desk-scale scene: five bright solids, ~4 m across, on a
    black background, with azimuthally asymmetric layout so every viewpoint
    has a distinct appearance."""
    prims = (
        Primitive("sphere", (0.85, 0.10, 0.15), 0.55, (0.95, 0.25, 0.20)),
        Primitive("box", (-0.70, 0.60, -0.25), 0.40, (0.20, 0.85, 0.30)),
        Primitive("sphere", (-0.25, -0.95, 0.40), 0.38, (0.25, 0.45, 0.95)),
        Primitive("box", (0.25, 0.85, 0.70), 0.30, (0.95, 0.85, 0.25)),
        Primitive("sphere", (-0.10, -0.15, -0.70), 0.35, (0.85, 0.30, 0.85)),
    )
    return SceneDescription(
        prims,
        background_color=(0.0, 0.0, 0.0),
        bounds_lo=(-3.5, -3.5, -3.5),
        bounds_hi=(3.5, 3.5, 3.5),
    )


def desk_camera(width: int = 64, height: int = 64, focal: float = 58.0) -> Camera:
    return Camera(focal, (width / 2.0, height / 2.0), width, height)


def desk_dataset(
    scene: SceneDescription,
    camera: Camera,
    n_train: int,
    n_test: int,
    seed: int,
    out_dir: Path,
) -> DatasetManifest:
    """Train views on one orbit, test views on a different (higher, wider)
    orbit with a phase offset, echoing test paths disjoint from training."""
    train = generate_dataset(
        scene,
        camera,
        n_train,
        "orbit",
        seed,
        out_dir,
        split="train",
        orbit_radius=2.4,
        orbit_height=1.2,
    )
    test = generate_dataset(
        scene,
        camera,
        n_test,
        "orbit",
        seed + 1,
        out_dir,
        split="test",
        orbit_radius=2.8,
        orbit_height=1.7,
        orbit_phase=math.pi / 7.0,
    )
    return merge_manifests([train, test])
