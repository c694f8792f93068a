"""Training data: manifests, frame selection, 64x64 patch extraction.

Lifecycle::

    entries = load_manifest("corpus/manifest.txt")
    data = build_dataset(entries, qp=32, seed=7)        # masks rendered per frame
    for batch in data.batches(seed=7, epoch=0, batch_size=256):
        ...
"""

import hashlib
import logging
import random
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DatasetError, FormatError
from .media_utils import Plane8, read_yuv420_y, yuv420_frame_size
from .partition import FramePartition, MeanMask, mean_mask, parse_partition

logger = logging.getLogger(__name__)

PATCH_SIZE = 64
PATCH_STRIDE = 64
FRAMES_PER_CLIP = 4
TRAINING_QPS: frozenset[int] = frozenset({22, 27, 32, 37})


@dataclass(frozen=True)
class ManifestEntry:
    """One (original, decoded, partition) clip triple at one QP."""

    original: Path
    decoded: Path
    partition: Path
    qp: int
    width: int
    height: int
    frames: int


@dataclass
class PatchPair:
    """Co-located decoded/original/mask patches and where they came from."""

    decoded: np.ndarray
    original: np.ndarray
    mask: np.ndarray
    frame_id: str
    x: int
    y: int


class EvalFrame(NamedTuple):
    """A whole frame for evaluation."""

    decoded: Plane8
    original: Plane8
    partition: FramePartition


def derive_seed(seed: int, *parts: object) -> int:
    """Stable 63-bit seed from a base seed and identifying parts."""
    text = ":".join([str(seed), *(str(p) for p in parts)])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little") >> 1


# ---------------------------------------------------------------------- #
# Manifest                                                                 #
# ---------------------------------------------------------------------- #

def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Parse a manifest; paths are resolved against the manifest's directory.

    Line format: ``<original.yuv> <decoded.yuv> <partition.bpart> <qp> <width> <height> <frames>``.

    Raises:
        FormatError: Malformed line (with its number).
        DatasetError: Missing files or files too short for the declared frames.
    """
    path = Path(path)
    base = path.parent
    entries: list[ManifestEntry] = []
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        fields = text.split()
        if len(fields) != 7:
            raise FormatError(f"expected 7 fields, got {len(fields)}", line=line_no)
        try:
            qp, width, height, frames = (int(f) for f in fields[3:])
        except ValueError:
            raise FormatError("qp, width, height and frames must be integers", line=line_no) from None
        if qp not in TRAINING_QPS:
            raise FormatError(f"qp {qp} not in {sorted(TRAINING_QPS)}", line=line_no)
        if frames < 1:
            raise FormatError(f"frame count must be >= 1, got {frames}", line=line_no)
        entry = ManifestEntry(
            original=base / fields[0],
            decoded=base / fields[1],
            partition=base / fields[2],
            qp=qp,
            width=width,
            height=height,
            frames=frames,
        )
        _check_entry(entry, line_no)
        entries.append(entry)
    logger.info("manifest %s: %d entries", path, len(entries))
    return entries


def _check_entry(entry: ManifestEntry, line_no: int) -> None:
    needed = entry.frames * yuv420_frame_size(entry.width, entry.height)
    for video in (entry.original, entry.decoded):
        if not video.is_file():
            raise DatasetError(f"line {line_no}: missing file {video}")
        if video.stat().st_size < needed:
            raise DatasetError(
                f"line {line_no}: {video} has {video.stat().st_size} bytes, "
                f"{entry.frames} frame(s) of {entry.width}x{entry.height} need {needed}"
            )
    if not entry.partition.is_file():
        raise DatasetError(f"line {line_no}: missing file {entry.partition}")


def entries_for_qp(entries: list[ManifestEntry], qp: int) -> list[ManifestEntry]:
    return [e for e in entries if e.qp == qp]


def _load_partitions(entry: ManifestEntry) -> dict[int, FramePartition]:
    with open(entry.partition, "r", encoding="utf-8") as f:
        parsed = parse_partition(f)
    partitions: dict[int, FramePartition] = {}
    for p in parsed:
        if p.index in partitions:
            raise DatasetError(f"{entry.partition}: frame {p.index} is partitioned twice")
        if (p.width, p.height) != (entry.width, entry.height):
            raise DatasetError(
                f"{entry.partition}: partition is {p.width}x{p.height}, clip is {entry.width}x{entry.height}"
            )
        partitions[p.index] = p
    return partitions


def _partition_for(partitions: dict[int, FramePartition], entry: ManifestEntry, index: int) -> FramePartition:
    if index not in partitions:
        raise DatasetError(f"{entry.partition}: no partition for frame {index}")
    return partitions[index]


def load_eval_frames(entries: list[ManifestEntry], max_frames: int | None = None) -> list[EvalFrame]:
    """Read whole frames (decoded, original, partition) from manifest entries."""
    frames: list[EvalFrame] = []
    for entry in entries:
        count = entry.frames if max_frames is None else min(entry.frames, max_frames)
        originals = read_yuv420_y(entry.original, entry.width, entry.height, count)
        decoded = read_yuv420_y(entry.decoded, entry.width, entry.height, count)
        partitions = _load_partitions(entry)
        for k in range(count):
            frames.append(EvalFrame(decoded[k], originals[k], _partition_for(partitions, entry, k)))
    return frames


# ---------------------------------------------------------------------- #
# Frame selection and patches                                              #
# ---------------------------------------------------------------------- #

def select_frames(seed: int, frame_count: int, k: int = FRAMES_PER_CLIP) -> list[int]:
    """Pick k distinct frame indices uniformly without replacement, sorted.

    Raises:
        DatasetError: k exceeds frame_count.
    """
    if k > frame_count:
        raise DatasetError(f"cannot select {k} frames from {frame_count}")
    return sorted(random.Random(seed).sample(range(frame_count), k))


def patch_grid(width: int, height: int, size: int = PATCH_SIZE, stride: int = PATCH_STRIDE) -> list[tuple[int, int]]:
    """Top-left (x, y) of every patch fully inside the frame, row-major."""
    if width < size or height < size:
        return []
    xs = range(0, width - size + 1, stride)
    ys = range(0, height - size + 1, stride)
    return [(x, y) for y in ys for x in xs]


def extract_patches(
    decoded: Plane8,
    original: Plane8,
    mask: MeanMask,
    size: int = PATCH_SIZE,
    stride: int = PATCH_STRIDE,
    frame_id: str = "",
) -> list[PatchPair]:
    """Cut aligned patches from a frame pair and its mask.

    Partial border patches are dropped.

    Raises:
        DatasetError: The three inputs differ in size.
    """
    dims = {(decoded.width, decoded.height), (original.width, original.height), (mask.width, mask.height)}
    if len(dims) != 1:
        raise DatasetError(f"decoded/original/mask sizes differ: {sorted(dims)}")
    patches: list[PatchPair] = []
    for x, y in patch_grid(decoded.width, decoded.height, size, stride):
        window = (slice(y, y + size), slice(x, x + size))
        patches.append(
            PatchPair(
                decoded=decoded.pixels[window].copy(),
                original=original.pixels[window].copy(),
                mask=mask.values[window].copy(),
                frame_id=frame_id,
                x=x,
                y=y,
            )
        )
    return patches


# ---------------------------------------------------------------------- #
# Patch dataset                                                            #
# ---------------------------------------------------------------------- #

def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


class PatchDataset:
    """Normalised patch arrays shaped (N, 1, size, size), all read-only."""

    def __init__(self, decoded: np.ndarray, original: np.ndarray, mask: np.ndarray, sources: list[tuple[str, int, int]]) -> None:
        if not (decoded.shape == original.shape == mask.shape):
            raise DatasetError(f"array shapes differ: {decoded.shape} {original.shape} {mask.shape}")
        self.decoded = _readonly(decoded)
        self.original = _readonly(original)
        self.mask = _readonly(mask)
        self.sources = sources

    @classmethod
    def from_patches(cls, patches: list[PatchPair]) -> "PatchDataset":
        if not patches:
            raise DatasetError("no patches")
        return cls(
            decoded=np.stack([p.decoded for p in patches])[:, None].astype(np.float64) / 255.0,
            original=np.stack([p.original for p in patches])[:, None].astype(np.float64) / 255.0,
            mask=np.stack([p.mask for p in patches])[:, None].astype(np.float64),
            sources=[(p.frame_id, p.x, p.y) for p in patches],
        )

    def __len__(self) -> int:
        return self.decoded.shape[0]

    def epoch_order(self, seed: int, epoch: int) -> np.ndarray:
        """Permutation of patch indices for one epoch."""
        return np.random.default_rng([seed, epoch]).permutation(len(self))

    def batches(self, seed: int, epoch: int, batch_size: int) -> Iterator[np.ndarray]:
        """Index arrays of full minibatches; a partial last batch is dropped."""
        order = self.epoch_order(seed, epoch)
        for start in range(0, len(order) - batch_size + 1, batch_size):
            yield order[start:start + batch_size]

    def steps_per_epoch(self, batch_size: int) -> int:
        return len(self) // batch_size

    def save_npz(self, path: str | Path) -> None:
        np.savez(Path(path), decoded=self.decoded, original=self.original, mask=self.mask)


def build_dataset(
    entries: list[ManifestEntry],
    qp: int,
    seed: int,
    frames_per_clip: int = FRAMES_PER_CLIP,
    size: int = PATCH_SIZE,
    stride: int = PATCH_STRIDE,
) -> PatchDataset:
    """Select frames per clip at one QP and cut their patches.

    Frames are selected per (clip, qp) with a seed derived from both. Masks
    are rendered on the whole frame before patching.

    Raises:
        DatasetError: No manifest entry at this QP, or no full patch fits.
    """
    selected = entries_for_qp(entries, qp)
    if not selected:
        raise DatasetError(f"no manifest entries at qp {qp}")
    patches: list[PatchPair] = []
    for entry in selected:
        k = min(frames_per_clip, entry.frames)
        chosen = select_frames(derive_seed(seed, entry.original.name, qp), entry.frames, k)
        originals = read_yuv420_y(entry.original, entry.width, entry.height, entry.frames)
        decoded = read_yuv420_y(entry.decoded, entry.width, entry.height, entry.frames)
        partitions = _load_partitions(entry)
        for index in chosen:
            mask = mean_mask(decoded[index], _partition_for(partitions, entry, index))
            frame_id = f"{entry.decoded.name}#{index}"
            patches += extract_patches(decoded[index], originals[index], mask, size, stride, frame_id)
        logger.debug("%s: frames %s", entry.decoded.name, chosen)
    if not patches:
        raise DatasetError(f"no {size}x{size} patch fits the frames at qp {qp}")
    logger.info("dataset qp %d: %d patches from %d clip(s)", qp, len(patches), len(selected))
    return PatchDataset.from_patches(patches)


# ---------------------------------------------------------------------- #
# Synthetic content                                                        #
# ---------------------------------------------------------------------- #

def make_toy_frames(seed: int, count: int, width: int, height: int) -> list[Plane8]:
    """Smooth synthetic originals: a gradient plus low-frequency sinusoids."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    u, v = xx / width, yy / height
    frames: list[Plane8] = []
    for _ in range(count):
        img = rng.uniform(-1, 1) * u + rng.uniform(-1, 1) * v
        for _ in range(4):
            fx, fy = rng.uniform(0.5, 3.0, size=2) * rng.choice([-1, 1], size=2)
            img = img + rng.uniform(0.2, 0.6) * np.sin(2 * np.pi * (fx * u + fy * v) + rng.uniform(0, 2 * np.pi))
        img = (img - img.min()) / max(float(np.ptp(img)), 1e-12)
        pixels = np.rint(16 + img * (235 - 16)).astype(np.uint8)
        frames.append(Plane8(width=width, height=height, pixels=pixels))
    return frames
