"""
``.gmjo`` checkpoint files.

Layout (little-endian):

    magic      4 bytes  b"GMJO"
    version    u32
    objects    u32
    counts     u32 x objects
    sh_degree  u32
    per object, per field: contiguous float64 arrays
        positions (N,3) log_scales (N,3) rotations (N,4) opacity_logits (N,1) sh_coeffs (N,C,3)
        instance_label (N,) as int64
    sections   u32 count, then per section:
        name_len u32, name utf-8, version u32, payload_len u64, payload
"""
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import torch
from loguru import logger

from ..core.diffcore import DTYPE
from ..core.errors import CheckpointFormatError, MosplatError
from .gaussians import FLOAT_FIELDS, GaussianSet
from .geometry import sh_coeff_count

MAGIC = b"GMJO"
VERSION = 1


@dataclass
class Section:
    """Opaque named payload stored after the Gaussian records."""
    version: int
    payload: bytes


def pack_arrays(arrays: Dict[str, np.ndarray]) -> bytes:
    """Serialize named arrays deterministically (sorted names, .npy records)."""
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        record = io.BytesIO()
        np.lib.format.write_array(record, np.ascontiguousarray(arrays[name]), allow_pickle=False)
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<Q", record.tell()))
        buf.write(record.getvalue())
    return buf.getvalue()


def unpack_arrays(payload: bytes) -> Dict[str, np.ndarray]:
    reader = _Reader(payload)
    arrays = {}
    for _ in range(reader.unpack("<I")[0]):
        name = reader.take(reader.unpack("<I")[0]).decode("utf-8")
        record = reader.take(reader.unpack("<Q")[0])
        arrays[name] = np.lib.format.read_array(io.BytesIO(record), allow_pickle=False)
    return arrays


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise CheckpointFormatError("length", f">= {end} bytes", f"{len(self.data)} bytes")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, shape: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def save_checkpoint(sets: List[GaussianSet], path: Union[str, Path],
                    sections: Dict[str, Section] = None, sh_degree: int = None):
    """
    Write Gaussian sets (and optional named sections) to ``path``.

    All sets must share one SH degree.
    """
    degrees = {s.sh_degree for s in sets}
    if len(degrees) > 1:
        raise MosplatError(f"All sets in a checkpoint must share one SH degree, got {sorted(degrees)}")
    degree = degrees.pop() if degrees else (sh_degree if sh_degree is not None else 0)

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(sets)))
    buf.write(struct.pack(f"<{len(sets)}I", *[len(s) for s in sets]))
    buf.write(struct.pack("<I", degree))
    for s in sets:
        for name in FLOAT_FIELDS:
            buf.write(getattr(s, name).detach().cpu().numpy().astype("<f8", copy=False).tobytes())
        buf.write(s.instance_label.cpu().numpy().astype("<i8", copy=False).tobytes())

    sections = sections or {}
    buf.write(struct.pack("<I", len(sections)))
    for name in sorted(sections):
        section = sections[name]
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<IQ", section.version, len(section.payload)))
        buf.write(section.payload)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    logger.debug(f"Saved checkpoint with {len(sets)} sets to {path}")


def load_checkpoint_with_sections(path: Union[str, Path]) -> Tuple[List[GaussianSet], Dict[str, Section]]:
    reader = _Reader(Path(path).read_bytes())
    magic = reader.take(4)
    if magic != MAGIC:
        raise CheckpointFormatError("magic", MAGIC, magic)
    version, num_objects = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointFormatError("version", VERSION, version)
    counts = reader.unpack(f"<{num_objects}I") if num_objects else ()
    degree = reader.unpack("<I")[0]
    coeffs = sh_coeff_count(degree)

    shapes = {
        "positions": (3,),
        "log_scales": (3,),
        "rotations": (4,),
        "opacity_logits": (1,),
        "sh_coeffs": (coeffs, 3),
    }
    sets = []
    for n in counts:
        values = {name: torch.from_numpy(reader.array("<f8", (n,) + shapes[name]).astype(np.float64)).to(DTYPE)
                  for name in FLOAT_FIELDS}
        labels = torch.from_numpy(reader.array("<i8", (n,)).astype(np.int64))
        sets.append(GaussianSet(instance_label=labels, **values))

    sections = {}
    for _ in range(reader.unpack("<I")[0]):
        name = reader.take(reader.unpack("<I")[0]).decode("utf-8")
        section_version, length = reader.unpack("<IQ")
        sections[name] = Section(section_version, reader.take(length))
    return sets, sections


def load_checkpoint(path: Union[str, Path]) -> List[GaussianSet]:
    sets, _ = load_checkpoint_with_sections(path)
    return sets
