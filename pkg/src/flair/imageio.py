"""Image and occupancy-grid file IO."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import png
from PIL import Image

OCC_MAGIC = b"OCC1"


def read_image(path) -> np.ndarray:
    """Load PNG (8/16-bit) or binary PGM/PPM as float64 in [0, 1], shape H x W x C.

    Alpha channels are dropped. 16-bit PPM is decoded through Pillow, which
    reduces it to 8 bits per channel.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with path.open("rb") as fh:
        head = fh.read(8)
    if head.startswith(b"\x89PNG"):
        width, height, rows, info = png.Reader(filename=str(path)).asDirect()
        planes = info["planes"]
        arr = np.vstack([np.asarray(r, dtype=np.float64) for r in rows]).reshape(height, width, planes)
        arr /= float(2 ** info["bitdepth"] - 1)
        if info["alpha"]:
            arr = arr[..., :-1]
        return arr
    if head[:2] in (b"P5", b"P6"):
        with Image.open(path) as im:
            if im.mode in ("I", "I;16", "I;16B"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            else:
                arr = np.asarray(im.convert("RGB" if head[:2] == b"P6" else "L"), dtype=np.float64) / 255.0
        return arr[..., None] if arr.ndim == 2 else arr
    raise ValueError(f"unsupported image format: {path}")


def write_png(path, image: np.ndarray, bitdepth: int = 8) -> None:
    """Write a [0, 1] float image (H x W or H x W x C, C in {1, 3}) as PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    maxval = 2 ** bitdepth - 1
    ints = np.rint(arr * maxval).astype(np.uint16 if bitdepth == 16 else np.uint8)
    h, w = ints.shape[:2]
    grey = ints.ndim == 2
    writer = png.Writer(w, h, greyscale=grey, bitdepth=bitdepth)
    with open(path, "wb") as fh:
        writer.write(fh, ints.reshape(h, -1).tolist())


def read_occupancy(path) -> np.ndarray:
    """Raw OCC1 grid: magic, three little-endian u32 dims (D, H, W), then D*H*W bytes."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"occupancy grid not found: {path}")
    data = path.read_bytes()
    if data[:4] != OCC_MAGIC:
        raise ValueError(f"{path} is not an OCC1 grid")
    d, h, w = struct.unpack_from("<3I", data, 4)
    body = np.frombuffer(data, dtype=np.uint8, offset=16)
    if body.size != d * h * w:
        raise ValueError(f"{path}: expected {d * h * w} voxels, found {body.size}")
    if body.max(initial=0) > 1:
        raise ValueError(f"{path}: voxel values must be 0 or 1")
    return body.reshape(d, h, w).copy()


def write_occupancy(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    if grid.ndim != 3 or not np.isin(grid, (0, 1)).all():
        raise ValueError("occupancy grid must be a 3-D array of 0/1 values")
    with open(path, "wb") as fh:
        fh.write(OCC_MAGIC)
        fh.write(struct.pack("<3I", *grid.shape))
        fh.write(grid.astype(np.uint8).tobytes())
