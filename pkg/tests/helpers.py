"""Builders shared by the test modules."""

from pathlib import Path

import numpy as np

from bdrrn.dataset import derive_seed, make_toy_frames
from bdrrn.media_utils import Plane8, YuvFrame, write_yuv420_frames
from bdrrn.model import Fusion, Model, ModelConfig, Variant, build_model
from bdrrn.partition import FramePartition, format_partition, random_quadtree, synth_degrade
from bdrrn.tensor import RunningStats


def write_toy_clip(
    root: Path,
    name: str,
    frames: int,
    width: int,
    height: int,
    qstep: int = 24,
    seed: int = 0,
) -> tuple[list[Plane8], list[Plane8], list[FramePartition]]:
    """Write <name>.orig.yuv, <name>.dec.yuv and <name>.bpart under root."""
    originals = make_toy_frames(derive_seed(seed, name), frames, width, height)
    chroma = bytes([128]) * (width * height // 2)
    decoded: list[Plane8] = []
    partitions: list[FramePartition] = []
    for k, plane in enumerate(originals):
        partition = random_quadtree(derive_seed(seed, name, k), width, height, 0.5)
        partition.index = k
        partitions.append(partition)
        decoded.append(synth_degrade(plane, partition, qstep))
    write_yuv420_frames([YuvFrame(p, chroma) for p in originals], root / f"{name}.orig.yuv")
    write_yuv420_frames([YuvFrame(p, chroma) for p in decoded], root / f"{name}.dec.yuv")
    (root / f"{name}.bpart").write_text(format_partition(partitions), encoding="utf-8")
    return originals, decoded, partitions


def ready_model(
    variant: Variant = Variant.BDRRN,
    fusion: Fusion = Fusion.ADD,
    channels: int = 2,
    zero_recon: bool = False,
    seed: int = 0,
) -> Model:
    """A model whose batch-norm statistics are usable in Eval mode."""
    model = build_model(ModelConfig(variant=variant, fusion=fusion, channels=channels), seed)
    for stream in model.bn_stats:
        model.bn_stats[stream] = RunningStats(mean=0.5, var=0.05, ready=True)
    if zero_recon:
        model["recon.w"].data[...] = 0.0
        model["recon.b"].data[...] = 0.0
    return model


def random_plane(rng: np.random.Generator, width: int, height: int) -> Plane8:
    return Plane8.from_array(rng.integers(0, 256, size=(height, width), dtype=np.uint8))
