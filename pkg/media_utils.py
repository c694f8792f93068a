"""Raw video and image file utilities for 8-bit luma planes."""

import io
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

logger = logging.getLogger(__name__)

YUV_EXTENSIONS: set[str] = {".yuv", ".raw"}
PGM_EXTENSIONS: set[str] = {".pgm"}


@dataclass
class Plane8:
    """An 8-bit single-channel image, pixels shaped (height, width)."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.pixels.shape != (self.height, self.width):
            raise FormatError(
                f"pixel array {self.pixels.shape} does not match {self.width}x{self.height}"
            )
        if self.pixels.dtype != np.uint8:
            raise FormatError(f"expected uint8 pixels, got {self.pixels.dtype}")

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "Plane8":
        """Wrap a (height, width) uint8 array."""
        height, width = pixels.shape
        return cls(width=width, height=height, pixels=np.ascontiguousarray(pixels, dtype=np.uint8))


@dataclass
class YuvFrame:
    """A 4:2:0 frame: the luma plane plus the untouched chroma bytes."""

    luma: Plane8
    chroma: bytes


def is_yuv_file(path: Path) -> bool:
    """True if the path names a raw YUV file by extension."""
    return path.suffix.lower() in YUV_EXTENSIONS


def is_pgm_file(path: Path) -> bool:
    """True if the path names a PGM file by extension."""
    return path.suffix.lower() in PGM_EXTENSIONS


def parse_dims(text: str) -> tuple[int, int]:
    """Parse "WxH" into (width, height).

    Raises:
        FormatError: Not two positive integers separated by 'x'.
    """
    parts = text.lower().split("x")
    try:
        width, height = (int(p) for p in parts)
    except ValueError:
        raise FormatError(f"expected WxH, got {text!r}") from None
    if width < 1 or height < 1:
        raise FormatError(f"dimensions must be positive, got {text!r}")
    return width, height


def yuv420_frame_size(width: int, height: int) -> int:
    """Bytes per 4:2:0 frame.

    Raises:
        FormatError: Odd dimensions (4:2:0 needs even width and height).
    """
    if width % 2 or height % 2:
        raise FormatError(f"4:2:0 needs even dimensions, got {width}x{height}")
    return width * height * 3 // 2


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write data to path via a temp file in the same directory and a rename."""
    path = Path(path)
    fd, temp_path = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}_", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(temp_path, path)
    except OSError:
        logger.error("failed to write %s", path, exc_info=True)
        try:
            os.unlink(temp_path)
        except OSError:
            pass
        raise


# ---------------------------------------------------------------------- #
# Raw YUV 4:2:0                                                            #
# ---------------------------------------------------------------------- #

def read_yuv420_frames(
    path: str | Path,
    width: int,
    height: int,
    max_frames: int | None = None,
) -> list[YuvFrame]:
    """Read 8-bit planar 4:2:0 frames.

    Args:
        path: Raw .yuv file.
        width: Luma width (even).
        height: Luma height (even).
        max_frames: Read at most this many frames; None reads all whole frames.

    Raises:
        FormatError: Odd dimensions, or the file holds less than one frame.
    """
    frame_size = yuv420_frame_size(width, height)
    data = Path(path).read_bytes()
    available = len(data) // frame_size
    if available == 0:
        raise FormatError(f"{path}: {len(data)} bytes is shorter than one {width}x{height} frame ({frame_size} bytes)")
    if len(data) % frame_size:
        logger.warning("%s: ignoring %d trailing byte(s)", path, len(data) % frame_size)
    count = available if max_frames is None else min(available, max_frames)
    luma_size = width * height
    frames: list[YuvFrame] = []
    for k in range(count):
        start = k * frame_size
        luma = np.frombuffer(data, dtype=np.uint8, count=luma_size, offset=start).reshape(height, width)
        frames.append(
            YuvFrame(
                luma=Plane8(width=width, height=height, pixels=luma.copy()),
                chroma=data[start + luma_size:start + frame_size],
            )
        )
    return frames


def read_yuv420_y(
    path: str | Path,
    width: int,
    height: int,
    max_frames: int | None = None,
) -> list[Plane8]:
    """Read only the luma planes of a 4:2:0 file; chroma bytes are skipped."""
    return [frame.luma for frame in read_yuv420_frames(path, width, height, max_frames)]


def write_yuv420_frames(frames: list[YuvFrame], path: str | Path) -> None:
    """Write frames as planar 4:2:0, luma then the stored chroma bytes."""
    chunks: list[bytes] = []
    for frame in frames:
        expected = frame.luma.width * frame.luma.height // 2
        if len(frame.chroma) != expected:
            raise FormatError(f"chroma block is {len(frame.chroma)} bytes, expected {expected}")
        chunks.append(frame.luma.pixels.tobytes())
        chunks.append(frame.chroma)
    atomic_write_bytes(Path(path), b"".join(chunks))


# ---------------------------------------------------------------------- #
# Binary PGM                                                               #
# ---------------------------------------------------------------------- #

def read_pgm(path: str | Path) -> Plane8:
    """Read a binary (P5) 8-bit PGM.

    Raises:
        FormatError: Other magic (e.g. ASCII P2), a sample depth above 8 bits,
            or a raster Pillow cannot decode.
    """
    path = Path(path)
    with path.open("rb") as f:
        magic = f.read(2)
    if magic != b"P5":
        raise FormatError(f"{path}: unsupported PGM format {magic!r}, only binary P5 is read")
    try:
        with Image.open(path, formats=["PPM"]) as im:
            im.load()
            if im.mode != "L":
                raise FormatError(f"{path}: mode {im.mode} is not 8-bit, expected maxval 255")
            pixels = np.array(im, dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable PGM raster ({exc})") from exc
    height, width = pixels.shape
    return Plane8(width=width, height=height, pixels=pixels)


def write_pgm(plane: Plane8, path: str | Path) -> None:
    """Write a plane as binary P5 PGM, maxval 255."""
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(plane.pixels, dtype=np.uint8)).save(buffer, format="PPM")
    atomic_write_bytes(Path(path), buffer.getvalue())
