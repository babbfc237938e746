"""
Out-of-process prior providers over a local pipe.

Frames are length-prefixed (u32 little-endian byte count, then the body).

Request body:  pose 16 x f32 | tau f32 | H u32 | W u32 | reference H*W*3 f32 | render H*W*3 f32
Response body: gradient H*W*3 f32 | weight f32
"""
import argparse
import struct
import subprocess
import sys
from pathlib import Path
from typing import BinaryIO, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from ..core.errors import MosplatError
from ..objectives.priors import PriorGradient, PriorProvider, SyntheticPrior


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO) -> Optional[bytes]:
    """Next frame body, or None on a clean end of stream."""
    header = _read_exact(stream, 4)
    if not header:
        return None
    if len(header) < 4:
        raise MosplatError("Truncated frame header on prior pipe")
    (length,) = struct.unpack("<I", header)
    body = _read_exact(stream, length)
    if len(body) != length:
        raise MosplatError(f"Truncated frame on prior pipe: expected {length} bytes, got {len(body)}")
    return body


def write_frame(stream: BinaryIO, body: bytes):
    stream.write(struct.pack("<I", len(body)))
    stream.write(body)
    stream.flush()


def encode_request(render: np.ndarray, pose: np.ndarray, reference: Optional[np.ndarray], tau: float) -> bytes:
    render = np.asarray(render, dtype="<f4")
    H, W = render.shape[:2]
    reference = np.zeros_like(render) if reference is None else np.asarray(reference, dtype="<f4")
    return b"".join([
        np.asarray(pose, dtype="<f4").reshape(16).tobytes(),
        struct.pack("<fII", tau, H, W),
        reference.reshape(H, W, 3).tobytes(),
        render.reshape(H, W, 3).tobytes(),
    ])


def decode_request(body: bytes) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """(render, pose, reference, tau) as float64 arrays."""
    pose = np.frombuffer(body[:64], dtype="<f4").reshape(4, 4).astype(np.float64)
    tau, H, W = struct.unpack("<fII", body[64:76])
    size = H * W * 3 * 4
    if len(body) != 76 + 2 * size:
        raise MosplatError(f"Malformed prior request: {len(body)} bytes for {H}x{W}")
    reference = np.frombuffer(body[76:76 + size], dtype="<f4").reshape(H, W, 3).astype(np.float64)
    render = np.frombuffer(body[76 + size:], dtype="<f4").reshape(H, W, 3).astype(np.float64)
    return render, pose, reference, float(tau)


def encode_response(result: PriorGradient) -> bytes:
    return np.asarray(result.gradient, dtype="<f4").tobytes() + struct.pack("<f", result.weight)


def decode_response(body: bytes, shape: Tuple[int, int, int]) -> PriorGradient:
    size = int(np.prod(shape)) * 4
    if len(body) != size + 4:
        raise MosplatError(f"Malformed prior response: {len(body)} bytes, expected {size + 4}")
    gradient = np.frombuffer(body[:size], dtype="<f4").reshape(shape).astype(np.float64)
    (weight,) = struct.unpack("<f", body[size:])
    return PriorGradient(gradient, float(weight))


class ExternalPrior(PriorProvider):
    """Prior provider running in another process, spoken to over its stdin/stdout."""

    def __init__(self, reader: BinaryIO, writer: BinaryIO, process: Optional[subprocess.Popen] = None):
        """
        Args:
            reader: Stream the provider writes responses to
            writer: Stream the provider reads requests from
            process: Owning subprocess, terminated by ``close``
        """
        self.reader = reader
        self.writer = writer
        self.process = process

    @classmethod
    def spawn(cls, command: Sequence[str]) -> "ExternalPrior":
        logger.info(f"Starting external prior: {' '.join(command)}")
        process = subprocess.Popen(list(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        return cls(process.stdout, process.stdin, process)

    def query(self, render, pose, reference, tau) -> PriorGradient:
        render = np.asarray(render)
        try:
            write_frame(self.writer, encode_request(render, pose, reference, tau))
        except (BrokenPipeError, OSError) as e:
            logger.error(f"Failed to send prior request: {e}")
            raise MosplatError("External prior is not accepting requests") from e
        body = read_frame(self.reader)
        if body is None:
            raise MosplatError("External prior closed the pipe")
        return decode_response(body, render.shape)

    def close(self, timeout: float = 10.0):
        """Close the request stream and wait for the provider; kill it after ``timeout`` seconds."""
        try:
            self.writer.close()
        except OSError:
            pass
        if self.process is None:
            return
        try:
            self.process.wait(timeout=timeout)
            logger.info("External prior stopped")
        except subprocess.TimeoutExpired:
            logger.warning(f"External prior did not stop within {timeout}s, killing pid {self.process.pid}")
            self.process.kill()
            self.process.wait()


def serve_prior(provider: PriorProvider, reader: BinaryIO, writer: BinaryIO) -> int:
    """Answer requests until the request stream ends; returns the number served."""
    served = 0
    while True:
        body = read_frame(reader)
        if body is None:
            return served
        render, pose, reference, tau = decode_request(body)
        write_frame(writer, encode_response(provider.query(render, pose, reference, tau)))
        served += 1


def save_prior_views(path: Path, views: List[Tuple[np.ndarray, np.ndarray]]):
    np.savez(path, poses=np.stack([p for p, _ in views]), images=np.stack([img for _, img in views]))


def load_prior_views(path: Path) -> List[Tuple[np.ndarray, np.ndarray]]:
    data = np.load(path)
    return list(zip(data["poses"], data["images"]))


def main():
    """Serve a synthetic prior from saved ground-truth views on stdin/stdout."""
    parser = argparse.ArgumentParser(description="Synthetic prior provider over stdin/stdout")
    parser.add_argument("--views", type=Path, required=True, help="Saved ground-truth views (.npz)")
    args = parser.parse_args()

    logger.remove()
    logger.add(sys.stderr, level="INFO")
    provider = SyntheticPrior(load_prior_views(args.views))
    served = serve_prior(provider, sys.stdin.buffer, sys.stdout.buffer)
    logger.info(f"Prior provider served {served} requests")


if __name__ == "__main__":
    main()
