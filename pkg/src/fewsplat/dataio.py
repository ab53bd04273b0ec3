"""Image and depth-map file IO plus resampling helpers.

Images: 8-bit PNG or PPM, mapped linearly to [0,1] (no gamma decode).
Depth: PFM (single channel, bottom-up rows, negative scale = little-endian)
or the raw "DPTH" format: magic b"DPTH", u32 width, u32 height, then
little-endian float32 rows, top-to-bottom.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError

DEPTH_MAGIC = b"DPTH"


def load_image(path) -> np.ndarray:
    """Read an 8-bit image as float64 H x W x 3 in [0,1]."""
    try:
        img = Image.open(path)
    except OSError as exc:
        raise ValidationError(f"cannot read image {path}: {exc}") from exc
    with img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image_png(arr, path):
    """Write an H x W x 3 float image in [0,1] as 8-bit PNG."""
    arr = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_depth_map(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a depth map and derive its validity mask.

    Returns (depth float64 H x W, valid bool H x W). Values that are <= 0,
    NaN, or infinite are masked invalid; valid values are returned unchanged
    (the training loss is scale-invariant, so no normalization happens here).
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        depth = read_pfm(path)
    elif suffix == ".dpth":
        depth = read_dpth(path)
    else:
        raise ValidationError(f"unsupported depth format {suffix!r} ({path})")
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(depth) & (depth > 0.0)
    return depth, valid


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header == b"Pf":
            channels = 1
        elif header == b"PF":
            channels = 3
        else:
            raise ValidationError(f"{path}: not a PFM file (header {header!r})")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise ValidationError(f"{path}: malformed PFM dimension line")
        width, height = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        endian = "<" if scale < 0 else ">"
        count = width * height * channels
        payload = fh.read(count * 4)
        if len(payload) != count * 4:
            raise ValidationError(f"{path}: truncated PFM payload")
        data = np.frombuffer(payload, dtype=endian + "f4").astype(np.float64)
    data = data.reshape(height, width, channels)[::-1]  # PFM rows are bottom-up
    if channels == 3:
        data = data[..., 0]
    else:
        data = data[..., 0]
    return np.ascontiguousarray(data)


def write_pfm(path, data, little_endian: bool = True):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValidationError("write_pfm expects a single-channel H x W array")
    h, w = data.shape
    scale = -1.0 if little_endian else 1.0
    dtype = "<f4" if little_endian else ">f4"
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(f"{scale}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data[::-1]).astype(dtype).tobytes())


def read_dpth(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DEPTH_MAGIC:
            raise ValidationError(f"{path}: bad DPTH magic {magic!r}")
        head = fh.read(8)
        if len(head) != 8:
            raise ValidationError(f"{path}: truncated DPTH header")
        width, height = struct.unpack("<II", head)
        payload = fh.read(width * height * 4)
        if len(payload) != width * height * 4:
            raise ValidationError(f"{path}: truncated DPTH payload")
        data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return data.reshape(height, width)


def write_dpth(path, data):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValidationError("write_dpth expects a single-channel H x W array")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(data).astype("<f4").tobytes())


def downscale_image(image, divisor: int) -> np.ndarray:
    """Box-filter downscale by an integer factor (right/bottom remainder trimmed)."""
    if divisor == 1:
        return image
    h, w = image.shape[:2]
    hh, ww = (h // divisor) * divisor, (w // divisor) * divisor
    img = image[:hh, :ww]
    shape = (hh // divisor, divisor, ww // divisor, divisor) + img.shape[2:]
    return img.reshape(shape).mean(axis=(1, 3))


def downscale_depth(depth, valid, divisor: int) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear depth downscale with mask erosion.

    Output pixels sample the input at the box centers; a pixel stays valid
    only when every input pixel of its box is valid (erosion keeps mixed
    valid/invalid boundaries out of the loss).
    """
    if divisor == 1:
        return depth, valid
    from scipy.ndimage import map_coordinates

    h, w = depth.shape
    hh, ww = (h // divisor) * divisor, (w // divisor) * divisor
    depth = np.where(valid, depth, 0.0)[:hh, :ww]
    valid = valid[:hh, :ww]
    out_h, out_w = hh // divisor, ww // divisor
    rows = (np.arange(out_h) + 0.5) * divisor - 0.5
    cols = (np.arange(out_w) + 0.5) * divisor - 0.5
    grid = np.meshgrid(rows, cols, indexing="ij")
    sampled = map_coordinates(depth, grid, order=1, mode="nearest")
    block = valid.reshape(out_h, divisor, out_w, divisor)
    eroded = block.all(axis=(1, 3))
    return sampled, eroded
