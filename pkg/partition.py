"""Coding-unit partitions: BPART parsing, tiling checks, mean masks, synthetic degradation.

A partition lists the square coding units (CUs) that tile one frame. CUs on the
right and bottom borders may hang over the frame edge; they are clipped and
every per-CU computation uses the clipped region.
"""

import io
import logging
import random
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .errors import PartitionError
from .media_utils import Plane8

logger = logging.getLogger(__name__)

CTU_SIZE = 64
CU_SIZES: frozenset[int] = frozenset({8, 16, 32, 64})
BPART_VERSION = 1


@dataclass(frozen=True)
class CUSquare:
    """One coding unit: top-left corner and edge length in pixels."""

    x: int
    y: int
    size: int

    def clipped(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Return (x0, y0, x1, y1) of this CU clipped to the frame."""
        return self.x, self.y, min(self.x + self.size, width), min(self.y + self.size, height)


@dataclass
class FramePartition:
    """The CUs covering one frame."""

    width: int
    height: int
    cus: list[CUSquare] = field(default_factory=list)
    index: int = 0

    def regions(self) -> list[tuple[int, int, int, int]]:
        """Clipped (x0, y0, x1, y1) boxes, one per CU, in list order."""
        return [cu.clipped(self.width, self.height) for cu in self.cus]


@dataclass
class MeanMask:
    """Per-pixel block means in [0, 1], shape (height, width)."""

    width: int
    height: int
    values: np.ndarray


# ---------------------------------------------------------------------- #
# Validation                                                               #
# ---------------------------------------------------------------------- #

def validate_tiling(p: FramePartition) -> None:
    """Check that the CUs of p tile the frame exactly once.

    Raises:
        PartitionError: First violation found: bad size, misalignment, a CU
            outside the frame, overlap (at the top-left of the intersection) or
            a gap (at the first uncovered pixel in raster order).
    """
    if p.width < 1 or p.height < 1:
        raise PartitionError("dimensions", f"frame must be non-empty, got {p.width}x{p.height}")
    coverage = np.zeros((p.height, p.width), dtype=np.int32)
    for cu in p.cus:
        if cu.size not in CU_SIZES:
            raise PartitionError("size", f"CU size {cu.size} not in {sorted(CU_SIZES)}", cu.x, cu.y)
        if cu.x < 0 or cu.y < 0 or cu.x % cu.size or cu.y % cu.size:
            raise PartitionError("misaligned", f"{cu.size}-CU not on its quadtree grid", cu.x, cu.y)
        if cu.x >= p.width or cu.y >= p.height:
            raise PartitionError("outside", "CU starts outside the frame", cu.x, cu.y)
        x0, y0, x1, y1 = cu.clipped(p.width, p.height)
        covered = np.argwhere(coverage[y0:y1, x0:x1] > 0)
        if covered.size:
            row, col = covered[0]
            raise PartitionError("overlap", "CUs overlap", x0 + int(col), y0 + int(row))
        coverage[y0:y1, x0:x1] += 1
    gaps = np.argwhere(coverage == 0)
    if gaps.size:
        row, col = gaps[0]
        raise PartitionError("gap", "pixel not covered by any CU", int(col), int(row))


# ---------------------------------------------------------------------- #
# BPART text format                                                        #
# ---------------------------------------------------------------------- #

def _ints(tokens: list[str], line_no: int) -> list[int]:
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise PartitionError("syntax", f"expected integers, got {' '.join(tokens)!r}", line=line_no) from None


def parse_partition(stream: TextIO | str) -> list[FramePartition]:
    """Parse a BPART stream into one validated partition per declared frame.

    Args:
        stream: Open text stream, or the file contents as a string.

    Returns:
        Partitions in the order their ``frame`` lines appear.

    Raises:
        PartitionError: Syntax problems carry the offending line number;
            tiling violations carry the line of the frame header.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)

    width = height = None
    frames: list[FramePartition] = []
    frame_lines: list[int] = []
    for line_no, raw in enumerate(stream, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        tokens = text.split()
        keyword, args = tokens[0], tokens[1:]
        if width is None:
            if keyword != "BPART" or len(args) != 3:
                raise PartitionError("syntax", "expected header 'BPART <version> <width> <height>'", line=line_no)
            version, width, height = _ints(args, line_no)
            if version != BPART_VERSION:
                raise PartitionError("syntax", f"unsupported BPART version {version}", line=line_no)
            if width < 1 or height < 1:
                raise PartitionError("dimensions", f"bad frame size {width}x{height}", line=line_no)
            continue
        if keyword == "frame" and len(args) == 1:
            (index,) = _ints(args, line_no)
            frames.append(FramePartition(width=width, height=height, index=index))
            frame_lines.append(line_no)
        elif keyword == "cu" and len(args) == 3:
            if not frames:
                raise PartitionError("syntax", "'cu' before any 'frame' line", line=line_no)
            x, y, size = _ints(args, line_no)
            if size not in CU_SIZES:
                raise PartitionError("size", f"CU size {size} not in {sorted(CU_SIZES)}", line=line_no)
            frames[-1].cus.append(CUSquare(x, y, size))
        else:
            raise PartitionError("syntax", f"unrecognised line {text!r}", line=line_no)

    if width is None:
        raise PartitionError("dimensions", "missing BPART header")
    for frame, line_no in zip(frames, frame_lines):
        try:
            validate_tiling(frame)
        except PartitionError as exc:
            raise PartitionError(exc.kind, f"frame {frame.index}: {exc}", line=line_no) from exc
    logger.debug("parsed %d partition frame(s) of %dx%d", len(frames), width, height)
    return frames


def format_partition(partitions: list[FramePartition]) -> str:
    """Render partitions as BPART text (inverse of parse_partition)."""
    if not partitions:
        raise PartitionError("dimensions", "nothing to write")
    width, height = partitions[0].width, partitions[0].height
    lines = [f"BPART {BPART_VERSION} {width} {height}"]
    for p in partitions:
        if (p.width, p.height) != (width, height):
            raise PartitionError("dimensions", f"frame {p.index} is {p.width}x{p.height}, expected {width}x{height}")
        lines.append(f"frame {p.index}")
        lines.extend(f"cu {cu.x} {cu.y} {cu.size}" for cu in p.cus)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------- #
# Synthesis                                                                #
# ---------------------------------------------------------------------- #

def random_quadtree(seed: int, width: int, height: int, split_prob: float) -> FramePartition:
    """Generate a random quadtree partition.

    Each CTU (raster order) is split recursively with probability split_prob
    per square until 8x8. Child squares lying wholly outside the frame are
    dropped.
    """
    if not 0.0 <= split_prob <= 1.0:
        raise PartitionError("split", f"split_prob must lie in [0, 1], got {split_prob}")
    rng = random.Random(seed)
    cus: list[CUSquare] = []

    def visit(x: int, y: int, size: int) -> None:
        if x >= width or y >= height:
            return
        if size > min(CU_SIZES) and rng.random() < split_prob:
            half = size // 2
            for dy in (0, half):
                for dx in (0, half):
                    visit(x + dx, y + dy, half)
        else:
            cus.append(CUSquare(x, y, size))

    for y in range(0, height, CTU_SIZE):
        for x in range(0, width, CTU_SIZE):
            visit(x, y, CTU_SIZE)
    partition = FramePartition(width=width, height=height, cus=cus)
    validate_tiling(partition)
    return partition


def _check_dims(plane: Plane8, p: FramePartition) -> None:
    if (plane.width, plane.height) != (p.width, p.height):
        raise PartitionError(
            "dimensions",
            f"frame is {plane.width}x{plane.height} but partition is {p.width}x{p.height}",
        )


def mean_mask(decoded: Plane8, p: FramePartition) -> MeanMask:
    """Render the block-mean mask of a decoded frame.

    Every pixel of a clipped CU holds (sum of its pixels / count) / 255.
    """
    _check_dims(decoded, p)
    values = np.empty((p.height, p.width), dtype=np.float64)
    pixels = decoded.pixels
    for x0, y0, x1, y1 in p.regions():
        region = pixels[y0:y1, x0:x1]
        total = int(region.sum(dtype=np.int64))
        values[y0:y1, x0:x1] = total / region.size / 255.0
    return MeanMask(width=p.width, height=p.height, values=values)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def synth_degrade(original: Plane8, p: FramePartition, qstep: int) -> Plane8:
    """Quantise each CU's deviation from its rounded mean with step qstep.

    Stands in for codec loss: the artifacts follow the partition, and larger
    steps give stronger blocking. qstep 1 is lossless.
    """
    if qstep < 1:
        raise PartitionError("qstep", f"qstep must be >= 1, got {qstep}")
    _check_dims(original, p)
    src = original.pixels.astype(np.int64)
    out = np.empty_like(src)
    for x0, y0, x1, y1 in p.regions():
        region = src[y0:y1, x0:x1]
        m = int(_round_half_away(np.array(region.sum() / region.size)))
        levels = _round_half_away((region - m) / qstep).astype(np.int64)
        out[y0:y1, x0:x1] = np.clip(levels * qstep + m, 0, 255)
    return Plane8(width=original.width, height=original.height, pixels=out.astype(np.uint8))
