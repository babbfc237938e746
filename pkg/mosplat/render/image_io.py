"""
Raster image and float-plane IO.

Float planes: magic b"F32P", then H, W, C as little-endian u32, then H*W*C
little-endian float32 values in row-major (H, W, C) order.
"""
import struct
from pathlib import Path
from typing import List, Sequence, Union

import cv2
import numpy as np
from PIL import Image, ImageDraw

from ..core.errors import DatasetError

PLANE_MAGIC = b"F32P"

PathLike = Union[str, Path]


def write_plane(path: PathLike, array: np.ndarray):
    array = np.asarray(array, dtype="<f4")
    if array.ndim == 2:
        array = array[..., None]
    if array.ndim != 3:
        raise ValueError(f"Plane must be (H, W) or (H, W, C), got shape {array.shape}")
    H, W, C = array.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(PLANE_MAGIC)
        f.write(struct.pack("<III", H, W, C))
        f.write(np.ascontiguousarray(array).tobytes())


def read_plane(path: PathLike, squeeze: bool = True) -> np.ndarray:
    """Read a float plane as float64 (H, W) when C == 1 and ``squeeze``, else (H, W, C)."""
    data = Path(path).read_bytes()
    if data[:4] != PLANE_MAGIC:
        raise DatasetError(f"Not a float plane (bad magic {data[:4]!r})", [path])
    H, W, C = struct.unpack("<III", data[4:16])
    expected = 16 + H * W * C * 4
    if len(data) != expected:
        raise DatasetError(f"Float plane has {len(data)} bytes, expected {expected}", [path])
    array = np.frombuffer(data[16:], dtype="<f4").reshape(H, W, C).astype(np.float64)
    return array[..., 0] if squeeze and C == 1 else array


def plane_shape(path: PathLike):
    with open(path, "rb") as f:
        header = f.read(16)
    if header[:4] != PLANE_MAGIC:
        raise DatasetError("Not a float plane", [path])
    return struct.unpack("<III", header[4:16])


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: PathLike, image: np.ndarray):
    """Write an RGB (H, W, 3) or gray (H, W) image with values in [0, 1]."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pixels = to_uint8(image)
    if pixels.ndim == 3:
        pixels = cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), pixels):
        raise IOError(f"Failed to write image {path}")


def read_image(path: PathLike) -> np.ndarray:
    """RGB float64 image in [0, 1]."""
    pixels = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if pixels is None:
        raise DatasetError("Unreadable image", [path])
    return cv2.cvtColor(pixels, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def read_mask(path: PathLike) -> np.ndarray:
    pixels = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if pixels is None:
        raise DatasetError("Unreadable mask", [path])
    return pixels > 127


def image_size(path: PathLike):
    """(H, W) of a raster image."""
    with Image.open(path) as img:
        return img.height, img.width


def write_contact_sheet(path: PathLike, images: Sequence[np.ndarray], labels: List[str] = None):
    """Lay RGB previews side by side in one PNG."""
    tiles = [Image.fromarray(to_uint8(img if img.ndim == 3 else np.repeat(img[..., None], 3, -1))) for img in images]
    if not tiles:
        return
    height = max(t.height for t in tiles)
    sheet = Image.new("RGB", (sum(t.width for t in tiles), height))
    x = 0
    for tile in tiles:
        sheet.paste(tile, (x, 0))
        x += tile.width
    if labels:
        draw = ImageDraw.Draw(sheet)
        x = 0
        for tile, label in zip(tiles, labels):
            draw.text((x + 2, 2), label, fill=(255, 255, 255))
            x += tile.width
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    sheet.save(path)
