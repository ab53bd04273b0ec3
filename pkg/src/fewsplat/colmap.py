"""COLMAP sparse-model reader/writer (cameras, images, points3D; text and binary).

Binary layouts follow COLMAP's documented little-endian record formats.
Supported camera models: PINHOLE, SIMPLE_PINHOLE, and SIMPLE_RADIAL (the
radial term is dropped with a warning). Image poses are world-to-camera,
quaternion stored (w, x, y, z) as COLMAP writes them.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .camera import CameraModel
from .errors import ValidationError
from .scene import quaternion_to_rotation

log = logging.getLogger(__name__)

# model_id -> (name, param count) for the models we can ingest
CAMERA_MODEL_IDS = {
    0: ("SIMPLE_PINHOLE", 3),
    1: ("PINHOLE", 4),
    2: ("SIMPLE_RADIAL", 4),
}
CAMERA_MODEL_NAMES = {name: (mid, nparams) for mid, (name, nparams) in CAMERA_MODEL_IDS.items()}


@dataclass
class ColmapCamera:
    id: int
    model: str
    width: int
    height: int
    params: NDArray[np.float64]  # model-specific intrinsics


@dataclass
class ColmapImage:
    id: int
    qvec: NDArray[np.float64]  # (w, x, y, z), world-to-camera
    tvec: NDArray[np.float64]
    camera_id: int
    name: str
    xys: NDArray[np.float64] = field(default_factory=lambda: np.zeros((0, 2)))
    point3d_ids: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class ColmapPoint:
    id: int
    xyz: NDArray[np.float64]
    rgb: NDArray[np.uint8]
    error: float
    image_ids: NDArray[np.int32] = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    point2d_idxs: NDArray[np.int32] = field(default_factory=lambda: np.zeros(0, dtype=np.int32))


@dataclass
class SparseModel:
    cameras: dict[int, ColmapCamera]
    images: dict[int, ColmapImage]
    points: dict[int, ColmapPoint]

    def validate(self):
        for img in self.images.values():
            if img.camera_id not in self.cameras:
                raise ValidationError(
                    f"image {img.name!r} references missing camera {img.camera_id}"
                )
        for pt in self.points.values():
            if np.any(pt.rgb > 255) or np.any(pt.rgb < 0):
                raise ValidationError(f"point {pt.id} has out-of-range color")

    def point_positions(self) -> NDArray[np.float64]:
        if not self.points:
            return np.zeros((0, 3))
        return np.stack([self.points[k].xyz for k in sorted(self.points)], axis=0)

    def point_colors(self) -> NDArray[np.float64]:
        if not self.points:
            return np.zeros((0, 3))
        return np.stack(
            [np.asarray(self.points[k].rgb, dtype=np.float64) for k in sorted(self.points)], axis=0
        )

    def camera_model(self, image: ColmapImage, znear: float = 0.01, zfar: float = 100.0) -> CameraModel:
        """Build a renderer CameraModel for one registered image."""
        cam = self.cameras[image.camera_id]
        if cam.model == "PINHOLE":
            fx, fy, cx, cy = cam.params[:4]
        elif cam.model == "SIMPLE_PINHOLE":
            fx = fy = cam.params[0]
            cx, cy = cam.params[1:3]
        elif cam.model == "SIMPLE_RADIAL":
            fx = fy = cam.params[0]
            cx, cy = cam.params[1:3]
            if abs(cam.params[3]) > 1e-12:
                log.warning(
                    "camera %d: dropping SIMPLE_RADIAL distortion k=%g", cam.id, cam.params[3]
                )
        else:  # pragma: no cover - parse already rejects these
            raise ValidationError(f"unsupported camera model {cam.model}")
        R = quaternion_to_rotation(image.qvec / np.linalg.norm(image.qvec))
        return CameraModel(
            fx=float(fx),
            fy=float(fy),
            cx=float(cx),
            cy=float(cy),
            width=cam.width,
            height=cam.height,
            rotation_w2c=R,
            translation_w2c=image.tvec,
            znear=znear,
            zfar=zfar,
        )


def parse_sparse_model(directory, format: str | None = None) -> SparseModel:
    """Parse cameras/images/points3D from a COLMAP sparse model directory.

    format: "binary", "text", or None to auto-detect (binary preferred).
    """
    directory = Path(directory)
    if format not in (None, "binary", "text"):
        raise ValidationError(f"unknown sparse model format {format!r}")
    if format is None:
        format = "binary" if (directory / "cameras.bin").exists() else "text"
    ext = ".bin" if format == "binary" else ".txt"
    paths = {name: directory / f"{name}{ext}" for name in ("cameras", "images", "points3D")}
    for name, path in paths.items():
        if not path.exists():
            raise ValidationError(f"missing sparse model file: {path}")
    if format == "binary":
        cameras = read_cameras_binary(paths["cameras"])
        images = read_images_binary(paths["images"])
        points = read_points_binary(paths["points3D"])
    else:
        cameras = read_cameras_text(paths["cameras"])
        images = read_images_text(paths["images"])
        points = read_points_text(paths["points3D"])
    model = SparseModel(cameras=cameras, images=images, points=points)
    model.validate()
    return model


def write_sparse_model(model: SparseModel, directory, format: str = "binary"):
    """Serialize a SparseModel back to COLMAP's on-disk layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if format == "binary":
        write_cameras_binary(model.cameras, directory / "cameras.bin")
        write_images_binary(model.images, directory / "images.bin")
        write_points_binary(model.points, directory / "points3D.bin")
    elif format == "text":
        write_cameras_text(model.cameras, directory / "cameras.txt")
        write_images_text(model.images, directory / "images.txt")
        write_points_text(model.points, directory / "points3D.txt")
    else:
        raise ValidationError(f"unknown sparse model format {format!r}")


# --- binary records ---------------------------------------------------------


def _read(fh, fmt: str, path):
    size = struct.calcsize("<" + fmt)
    buf = fh.read(size)
    if len(buf) != size:
        raise ValidationError(f"{path}: truncated record (wanted {size} bytes, got {len(buf)})")
    return struct.unpack("<" + fmt, buf)


def read_cameras_binary(path) -> dict[int, ColmapCamera]:
    cameras = {}
    with open(path, "rb") as fh:
        (num,) = _read(fh, "Q", path)
        for _ in range(num):
            cam_id, model_id, width, height = _read(fh, "iiQQ", path)
            if model_id not in CAMERA_MODEL_IDS:
                raise ValidationError(f"{path}: unsupported camera model id {model_id}")
            name, nparams = CAMERA_MODEL_IDS[model_id]
            params = np.array(_read(fh, "d" * nparams, path))
            cameras[cam_id] = ColmapCamera(cam_id, name, int(width), int(height), params)
    return cameras


def write_cameras_binary(cameras: dict[int, ColmapCamera], path):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(cameras)))
        for cam in cameras.values():
            model_id, nparams = CAMERA_MODEL_NAMES[cam.model]
            fh.write(struct.pack("<iiQQ", cam.id, model_id, cam.width, cam.height))
            fh.write(struct.pack("<" + "d" * nparams, *cam.params[:nparams]))


def read_images_binary(path) -> dict[int, ColmapImage]:
    images = {}
    with open(path, "rb") as fh:
        (num,) = _read(fh, "Q", path)
        for _ in range(num):
            vals = _read(fh, "idddddddi", path)
            image_id = vals[0]
            qvec = np.array(vals[1:5])
            tvec = np.array(vals[5:8])
            camera_id = vals[8]
            chars = []
            while True:
                (ch,) = _read(fh, "c", path)
                if ch == b"\x00":
                    break
                chars.append(ch)
            name = b"".join(chars).decode("utf-8")
            (npts,) = _read(fh, "Q", path)
            track = _read(fh, "ddq" * npts, path)
            xys = np.array(track, dtype=np.float64).reshape(npts, 3)[:, :2] if npts else np.zeros((0, 2))
            ids = np.array(track[2::3], dtype=np.int64) if npts else np.zeros(0, dtype=np.int64)
            images[image_id] = ColmapImage(image_id, qvec, tvec, camera_id, name, xys, ids)
    return images


def write_images_binary(images: dict[int, ColmapImage], path):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(images)))
        for img in images.values():
            fh.write(struct.pack("<idddddddi", img.id, *img.qvec, *img.tvec, img.camera_id))
            fh.write(img.name.encode("utf-8") + b"\x00")
            fh.write(struct.pack("<Q", len(img.point3d_ids)))
            for xy, pid in zip(img.xys, img.point3d_ids):
                fh.write(struct.pack("<ddq", xy[0], xy[1], int(pid)))


def read_points_binary(path) -> dict[int, ColmapPoint]:
    points = {}
    with open(path, "rb") as fh:
        (num,) = _read(fh, "Q", path)
        for _ in range(num):
            vals = _read(fh, "QdddBBBd", path)
            pid = vals[0]
            xyz = np.array(vals[1:4])
            rgb = np.array(vals[4:7], dtype=np.uint8)
            error = vals[7]
            (track_len,) = _read(fh, "Q", path)
            track = _read(fh, "ii" * track_len, path)
            image_ids = np.array(track[0::2], dtype=np.int32)
            p2d = np.array(track[1::2], dtype=np.int32)
            points[pid] = ColmapPoint(pid, xyz, rgb, float(error), image_ids, p2d)
    return points


def write_points_binary(points: dict[int, ColmapPoint], path):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(points)))
        for pt in points.values():
            fh.write(struct.pack("<QdddBBBd", pt.id, *pt.xyz, *(int(v) for v in pt.rgb), pt.error))
            fh.write(struct.pack("<Q", len(pt.image_ids)))
            for iid, p2d in zip(pt.image_ids, pt.point2d_idxs):
                fh.write(struct.pack("<ii", int(iid), int(p2d)))


# --- text records ------------------------------------------------------------


def _data_lines(path):
    with open(path, "r") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                yield line


def read_cameras_text(path) -> dict[int, ColmapCamera]:
    cameras = {}
    for line in _data_lines(path):
        elems = line.split()
        if len(elems) < 5:
            raise ValidationError(f"{path}: malformed camera record {line!r}")
        cam_id = int(elems[0])
        model = elems[1]
        if model not in CAMERA_MODEL_NAMES:
            raise ValidationError(f"{path}: unsupported camera model {model!r}")
        nparams = CAMERA_MODEL_NAMES[model][1]
        params = np.array([float(v) for v in elems[4:]])
        if params.size != nparams:
            raise ValidationError(
                f"{path}: camera {cam_id} expects {nparams} params, got {params.size}"
            )
        cameras[cam_id] = ColmapCamera(cam_id, model, int(elems[2]), int(elems[3]), params)
    return cameras


def write_cameras_text(cameras: dict[int, ColmapCamera], path):
    with open(path, "w") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for cam in cameras.values():
            params = " ".join(repr(float(v)) for v in cam.params)
            fh.write(f"{cam.id} {cam.model} {cam.width} {cam.height} {params}\n")


def read_images_text(path) -> dict[int, ColmapImage]:
    # Two lines per image; the 2D-point line may be empty, so comments are
    # skipped but blank lines are kept for the pairing.
    images = {}
    with open(path, "r") as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.lstrip().startswith("#")]
    if len(lines) % 2 != 0 and lines and not lines[-1].strip():
        lines.pop()  # stray trailing blank line
    if len(lines) % 2 != 0:
        raise ValidationError(f"{path}: images file must have two lines per image")
    for head, track_line in zip(lines[0::2], lines[1::2]):
        elems = head.split()
        if len(elems) < 10:
            raise ValidationError(f"{path}: malformed image record {head!r}")
        image_id = int(elems[0])
        qvec = np.array([float(v) for v in elems[1:5]])
        tvec = np.array([float(v) for v in elems[5:8]])
        camera_id = int(elems[8])
        name = elems[9]
        track = track_line.split()
        if len(track) % 3 != 0:
            raise ValidationError(f"{path}: malformed 2D point track for image {name!r}")
        npts = len(track) // 3
        xys = np.array([float(v) for i in range(npts) for v in track[3 * i : 3 * i + 2]]).reshape(
            npts, 2
        )
        ids = np.array([int(track[3 * i + 2]) for i in range(npts)], dtype=np.int64)
        images[image_id] = ColmapImage(image_id, qvec, tvec, camera_id, name, xys, ids)
    return images


def write_images_text(images: dict[int, ColmapImage], path):
    with open(path, "w") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for img in images.values():
            pose = " ".join(repr(float(v)) for v in (*img.qvec, *img.tvec))
            fh.write(f"{img.id} {pose} {img.camera_id} {img.name}\n")
            track = " ".join(
                f"{repr(float(xy[0]))} {repr(float(xy[1]))} {int(pid)}"
                for xy, pid in zip(img.xys, img.point3d_ids)
            )
            fh.write(track + "\n")


def read_points_text(path) -> dict[int, ColmapPoint]:
    points = {}
    for line in _data_lines(path):
        elems = line.split()
        if len(elems) < 8 or (len(elems) - 8) % 2 != 0:
            raise ValidationError(f"{path}: malformed point record {line!r}")
        pid = int(elems[0])
        xyz = np.array([float(v) for v in elems[1:4]])
        rgb_raw = [int(v) for v in elems[4:7]]
        if any(v < 0 or v > 255 for v in rgb_raw):
            raise ValidationError(f"{path}: point {pid} color out of [0,255]")
        error = float(elems[7])
        track = elems[8:]
        image_ids = np.array(track[0::2], dtype=np.int32)
        p2d = np.array(track[1::2], dtype=np.int32)
        points[pid] = ColmapPoint(pid, xyz, np.array(rgb_raw, dtype=np.uint8), error, image_ids, p2d)
    return points


def write_points_text(points: dict[int, ColmapPoint], path):
    with open(path, "w") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for pt in points.values():
            head = f"{pt.id} " + " ".join(repr(float(v)) for v in pt.xyz)
            head += " " + " ".join(str(int(v)) for v in pt.rgb) + f" {repr(float(pt.error))}"
            track = " ".join(
                f"{int(iid)} {int(p2d)}" for iid, p2d in zip(pt.image_ids, pt.point2d_idxs)
            )
            fh.write((head + " " + track).strip() + "\n")
