"""Dataset assembly: few-shot train/test split, view records, cloud init.

Directory layout:

    <root>/images/      8-bit PNG or PPM frames
    <root>/sparse/0/    COLMAP sparse model (binary or text)
    <root>/depth/       one PFM/DPTH prior per training image, same basename

Views are ordered lexicographically by image filename; captures along a
camera path then make "uniform in index" approximate "uniform in pose".
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .camera import CameraModel, bounding_sphere_radius
from .colmap import SparseModel, parse_sparse_model
from .dataio import downscale_depth, downscale_image, load_depth_map, load_image
from .errors import ValidationError
from .runtime import active_dtype
from .scene import GaussianCloud, logit, rgb_to_dc

log = logging.getLogger(__name__)

DEPTH_EPS = 1e-6
MIN_MEAN_NN_DIST = 1e-7


@dataclass
class TrainView:
    """A supervised view: camera, target image, depth prior, validity mask."""

    camera: CameraModel
    image: NDArray
    prior_depth: NDArray
    valid_mask: NDArray
    name: str = ""
    # Mask-centered log of the prior, cached at ingestion and quantized to
    # float32 so a global rescale of the prior file leaves the training
    # inputs bit-identical (the loss only ever sees centered logs).
    prior_log: NDArray = field(default=None, repr=False)

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        if self.image.shape != (h, w, 3):
            raise ValidationError(
                f"view {self.name!r}: image shape {self.image.shape} != camera ({h}, {w}, 3)"
            )
        if self.prior_depth.shape != (h, w) or self.valid_mask.shape != (h, w):
            raise ValidationError(f"view {self.name!r}: depth/mask shape mismatch")
        if np.any(self.valid_mask & ~(self.prior_depth > 0)):
            raise ValidationError(f"view {self.name!r}: non-positive depth marked valid")
        if self.prior_log is None:
            self.prior_log = centered_log_depth(self.prior_depth, self.valid_mask)


def centered_log_depth(depth, valid) -> NDArray[np.float32]:
    """log(depth) minus its mean over the valid mask, quantized to float32."""
    out = np.zeros(depth.shape, dtype=np.float64)
    if np.any(valid):
        logs = np.log(np.maximum(depth[valid], DEPTH_EPS))
        out[valid] = logs - logs.mean()
    return out.astype(np.float32)


@dataclass
class EvalView:
    camera: CameraModel
    image: NDArray
    extrapolated: bool
    name: str = ""


@dataclass
class DatasetSplit:
    train_views: list[TrainView]
    test_views: list[EvalView]
    scene_extent: float = 1.0


def split_indices(m: int, n_train: int = 5, n_test: int = 3):
    """Deterministic uniform split over m name-sorted views.

    Test indices are the two extremes (extrapolated relative to the training
    coverage) plus interior points; train indices are rounded linspace over
    the remaining index range, stepping collisions to the nearest free index.
    Returns (train, test, extrapolated_flags) as index lists.
    """
    if m < n_train + n_test:
        raise ValidationError(f"need at least {n_train + n_test} views, got {m}")
    test = [0]
    for k in range(1, n_test - 1):
        test.append(int((m - 1) * k // (n_test - 1)))
    test.append(m - 1)
    test = sorted(dict.fromkeys(test))
    if len(test) != n_test:
        raise ValidationError(f"cannot place {n_test} distinct test views among {m}")

    free = [i for i in range(m) if i not in test]
    lo, hi = free[0], free[-1]
    train: list[int] = []
    for target in np.round(np.linspace(lo, hi, n_train)).astype(int):
        idx = int(target)
        if idx in test or idx in train:
            for step in range(1, m):
                for cand in (idx + step, idx - step):
                    if 0 <= cand < m and cand not in test and cand not in train:
                        idx = cand
                        break
                else:
                    continue
                break
        train.append(idx)
    train = sorted(train)
    extrapolated = [i in (0, m - 1) for i in test]
    return train, test, extrapolated


def uniform_split(names: list[str], n_train: int = 5, n_test: int = 3):
    """Split name-sorted views; returns (train_names, test_names, flags)."""
    ordered = sorted(names)
    train, test, flags = split_indices(len(ordered), n_train, n_test)
    return [ordered[i] for i in train], [ordered[i] for i in test], flags


def init_cloud(model: SparseModel, dtype=None) -> GaussianCloud:
    """Initialize one Gaussian per SfM point.

    Scales come from the mean distance to the 3 nearest neighbors (isotropic,
    floored); opacity starts at 0.1; DC color matches the point color; the
    scene extent is the camera-center bounding-sphere radius.
    """
    dtype = active_dtype() if dtype is None else np.dtype(dtype)
    positions = model.point_positions()
    n = len(positions)
    if n == 0:
        raise ValidationError("cannot initialize from an empty point cloud")
    if n < 4:
        raise ValidationError(f"need at least 4 SfM points for k-NN scales, got {n}")

    tree = cKDTree(positions)
    dists, _ = tree.query(positions, k=4)
    mean_nn = np.maximum(dists[:, 1:4].mean(axis=1), MIN_MEAN_NN_DIST)
    log_scales = np.repeat(np.log(mean_nn)[:, None], 3, axis=1)

    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    sh = np.zeros((n, 3, 4))
    sh[:, :, 0] = rgb_to_dc(model.point_colors() / 255.0)

    if model.images:
        cameras = [model.camera_model(img) for img in model.images.values()]
        extent = bounding_sphere_radius(cameras)
    else:
        centroid = positions.mean(axis=0)
        extent = float(np.linalg.norm(positions - centroid, axis=1).max())
        log.warning("no registered images; using point-cloud radius %.4g as scene extent", extent)
    extent = max(extent, 1e-6)

    return GaussianCloud(
        positions=positions.astype(dtype),
        log_scales=log_scales.astype(dtype),
        rotations=rotations.astype(dtype),
        opacity_logits=np.full(n, logit(0.1), dtype=dtype),
        sh=sh.astype(dtype),
        scene_extent=extent,
    )


def invert_depth(depth, valid):
    """Map inverse-depth priors to depth-like values: v -> 1 / max(v, eps)."""
    out = depth.copy()
    out[valid] = 1.0 / np.maximum(depth[valid], DEPTH_EPS)
    return out


def find_depth_file(depth_dir: Path, image_name: str) -> Path | None:
    stem = Path(image_name).stem
    for suffix in (".pfm", ".dpth"):
        cand = depth_dir / (stem + suffix)
        if cand.exists():
            return cand
    return None


@dataclass
class Dataset:
    root: Path
    model: SparseModel
    split: DatasetSplit

    @property
    def scene_extent(self) -> float:
        return self.split.scene_extent


def load_dataset(
    root,
    n_train: int = 5,
    n_test: int = 3,
    resolution_divisor: int = 1,
    invert_prior_depth: bool = False,
    znear: float = 0.01,
    zfar: float = 100.0,
    prior_scale: float = 1.0,
) -> Dataset:
    """Load and split an on-disk dataset (see module docstring for layout)."""
    root = Path(root)
    images_dir = root / "images"
    sparse_dir = root / "sparse" / "0"
    depth_dir = root / "depth"
    for d in (images_dir, sparse_dir):
        if not d.is_dir():
            raise ValidationError(f"dataset is missing directory {d}")

    model = parse_sparse_model(sparse_dir)
    by_name = {img.name: img for img in model.images.values()}
    train_names, test_names, flags = uniform_split(sorted(by_name), n_train, n_test)

    def load_view_image(name):
        path = images_dir / name
        if not path.exists():
            raise ValidationError(f"missing image file {path}")
        camera = model.camera_model(by_name[name], znear=znear, zfar=zfar).scaled(
            resolution_divisor
        )
        image = load_image(path)
        image = downscale_image(image, resolution_divisor)
        image = image[: camera.height, : camera.width]
        if image.shape[:2] != (camera.height, camera.width):
            raise ValidationError(
                f"image {name!r} is {image.shape[:2]}, camera expects "
                f"({camera.height}, {camera.width})"
            )
        return camera, image

    train_views = []
    for name in train_names:
        camera, image = load_view_image(name)
        depth_path = find_depth_file(depth_dir, name)
        if depth_path is None:
            raise ValidationError(f"missing depth prior for training view {name!r} in {depth_dir}")
        depth, valid = load_depth_map(depth_path)
        if depth.shape != (camera.height * resolution_divisor, camera.width * resolution_divisor):
            raise ValidationError(
                f"depth map {depth_path} is {depth.shape}, image {name!r} expects "
                f"({camera.height * resolution_divisor}, {camera.width * resolution_divisor})"
            )
        if invert_prior_depth:
            depth = invert_depth(depth, valid)
        if prior_scale != 1.0:
            depth = np.where(valid, depth * prior_scale, depth)
        depth, valid = downscale_depth(depth, valid, resolution_divisor)
        depth = depth[: camera.height, : camera.width]
        valid = valid[: camera.height, : camera.width]
        train_views.append(
            TrainView(camera=camera, image=image, prior_depth=depth, valid_mask=valid, name=name)
        )

    test_views = []
    for name, extrapolated in zip(test_names, flags):
        camera, image = load_view_image(name)
        test_views.append(EvalView(camera=camera, image=image, extrapolated=extrapolated, name=name))

    extent = bounding_sphere_radius(
        [model.camera_model(img) for img in model.images.values()]
    )
    split = DatasetSplit(train_views=train_views, test_views=test_views, scene_extent=max(extent, 1e-6))
    return Dataset(root=root, model=model, split=split)
