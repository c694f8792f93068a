"""Minibatch training, whole-frame enhancement and PSNR evaluation."""

import csv
import io
import logging
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .checkpoint import save_checkpoint
from .dataset import EvalFrame, PatchDataset
from .errors import BatchNormStateError, ConfigError, DatasetError, TrainingDivergedError
from .media_utils import Plane8, atomic_write_bytes
from .metrics import psnr
from .model import Model, forward
from .optim import AdamState, adam_step
from .partition import FramePartition, mean_mask
from .tensor import Mode, Tensor, backward, mse_loss, no_grad, zero_grads

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimisation settings. Defaults are the published schedule."""

    base_lr: float = 5e-4
    batch_size: int = 256
    epochs: int = 150
    seed: int = 0
    eval_every: int = 0  # epochs between held-out evaluations; 0 disables
    checkpoint_path: Path | None = None
    max_steps: int | None = None

    def validate(self) -> None:
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.eval_every < 0:
            raise ConfigError(f"eval_every must be >= 0, got {self.eval_every}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "base_lr": self.base_lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "eval_every": self.eval_every,
            "checkpoint_path": str(self.checkpoint_path) if self.checkpoint_path else None,
            "max_steps": self.max_steps,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        """Create a TrainConfig from a dictionary, defaulting missing keys."""
        defaults = cls()
        checkpoint = data.get("checkpoint_path")
        max_steps = data.get("max_steps")
        try:
            cfg = cls(
                base_lr=float(data.get("base_lr", defaults.base_lr)),
                batch_size=int(data.get("batch_size", defaults.batch_size)),
                epochs=int(data.get("epochs", defaults.epochs)),
                seed=int(data.get("seed", defaults.seed)),
                eval_every=int(data.get("eval_every", defaults.eval_every)),
                checkpoint_path=Path(checkpoint) if checkpoint else None,
                max_steps=int(max_steps) if max_steps is not None else None,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad train config: {exc}") from exc
        cfg.validate()
        return cfg


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float


@dataclass
class EvalRecord:
    epoch: int
    psnr_decoded: float
    psnr_enhanced: float


@dataclass
class TrainLog:
    """Everything recorded during one training run."""

    steps: list[StepRecord] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    def steps_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["step", "epoch", "loss"])
        writer.writerows([s.step, s.epoch, repr(s.loss)] for s in self.steps)
        return out.getvalue()

    def evals_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["epoch", "eval_psnr_decoded", "eval_psnr_enhanced"])
        writer.writerows([e.epoch, f"{e.psnr_decoded:.6f}", f"{e.psnr_enhanced:.6f}"] for e in self.evals)
        return out.getvalue()

    def write_csv(self, prefix: str | Path) -> tuple[Path, Path]:
        """Write ``<prefix>.steps.csv`` and ``<prefix>.evals.csv``."""
        prefix = Path(prefix)
        steps_path = prefix.with_name(prefix.name + ".steps.csv")
        evals_path = prefix.with_name(prefix.name + ".evals.csv")
        atomic_write_bytes(steps_path, self.steps_csv().encode("utf-8"))
        atomic_write_bytes(evals_path, self.evals_csv().encode("utf-8"))
        return steps_path, evals_path


@dataclass
class FrameScore:
    index: int
    psnr_decoded: float
    psnr_enhanced: float

    @property
    def delta(self) -> float:
        if self.psnr_decoded == self.psnr_enhanced:
            return 0.0  # also covers inf == inf
        return self.psnr_enhanced - self.psnr_decoded


# ---------------------------------------------------------------------- #
# Inference                                                                #
# ---------------------------------------------------------------------- #

def _check_eval_ready(model: Model) -> None:
    streams = ["decoded", "mask"] if model.config.uses_mask else ["decoded"]
    missing = [s for s in streams if not model.bn_stats[s].ready]
    if missing:
        raise BatchNormStateError(f"no running statistics for input stream(s): {', '.join(missing)}")


def enhance_plane(model: Model, decoded: Plane8, partition: FramePartition | None) -> Plane8:
    """Run whole-frame inference and return a rounded, clamped 8-bit plane.

    Raises:
        ConfigError: A B-DRRN model without a partition.
        BatchNormStateError: The model has no running statistics.
    """
    _check_eval_ready(model)
    x = decoded.pixels.astype(np.float64)[None, None] / 255.0
    mask = None
    if model.config.uses_mask:
        if partition is None:
            raise ConfigError("bdrrn model needs a partition to build the mean mask")
        mask = Tensor(mean_mask(decoded, partition).values[None, None])
    with no_grad():
        out = forward(model, Tensor(x), mask, Mode.EVAL)
    pixels = np.clip(np.rint(out.data[0, 0] * 255.0), 0, 255).astype(np.uint8)
    return Plane8(width=decoded.width, height=decoded.height, pixels=pixels)


def evaluate(model: Model, frames: Sequence[EvalFrame]) -> list[FrameScore]:
    """Per-frame PSNR of decoded and enhanced frames against the originals."""
    _check_eval_ready(model)
    scores: list[FrameScore] = []
    for k, (decoded, original, partition) in enumerate(frames):
        enhanced = enhance_plane(model, decoded, partition)
        scores.append(FrameScore(k, psnr(decoded, original), psnr(enhanced, original)))
    return scores


def mean_scores(scores: Sequence[FrameScore]) -> tuple[float, float, float]:
    """Mean decoded PSNR, mean enhanced PSNR and mean delta."""
    if not scores:
        return math.nan, math.nan, math.nan
    n = len(scores)
    return (
        sum(s.psnr_decoded for s in scores) / n,
        sum(s.psnr_enhanced for s in scores) / n,
        sum(s.delta for s in scores) / n,
    )


def format_scores(scores: Sequence[FrameScore]) -> str:
    lines = [f"{'frame':>5}  {'decoded':>9}  {'enhanced':>9}  {'delta':>7}"]
    lines += [
        f"{s.index:>5}  {s.psnr_decoded:>9.4f}  {s.psnr_enhanced:>9.4f}  {s.delta:>7.2f}"
        for s in scores
    ]
    dec, enh, delta = mean_scores(scores)
    lines.append(f"{'mean':>5}  {dec:>9.4f}  {enh:>9.4f}  {delta:>7.2f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------- #
# Training                                                                 #
# ---------------------------------------------------------------------- #

def train(
    model: Model,
    data: PatchDataset,
    cfg: TrainConfig,
    eval_frames: Sequence[EvalFrame] | None = None,
    adam: AdamState | None = None,
) -> tuple[Model, TrainLog]:
    """Fit the residual by minibatch MSE with Adam.

    The patch order of every epoch is a seeded permutation; the partial
    last minibatch is dropped. ``recon.*`` move at 0.1x the base rate.

    Raises:
        DatasetError: No full minibatch can be formed.
        TrainingDivergedError: The loss became non-finite.
    """
    cfg.validate()
    if len(data) == 0 or data.steps_per_epoch(cfg.batch_size) == 0:
        raise DatasetError(f"{len(data)} patch(es) cannot fill a batch of {cfg.batch_size}")
    adam = adam if adam is not None else AdamState(lr=cfg.base_lr)
    params = model.parameters()
    uses_mask = model.config.uses_mask
    log = TrainLog()
    step = 0
    logger.info(
        "training %s: %d patches, batch %d, %d epoch(s)",
        model.config.variant.value, len(data), cfg.batch_size, cfg.epochs,
    )
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        losses: list[float] = []
        for idx in data.batches(cfg.seed, epoch, cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            mask = Tensor(data.mask[idx]) if uses_mask else None
            zero_grads(params)
            pred = forward(model, Tensor(data.decoded[idx]), mask, Mode.TRAIN)
            loss = mse_loss(pred, data.original[idx])
            value = loss.item()
            log.steps.append(StepRecord(step, epoch, value))
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            backward(loss)
            adam_step(params, adam)
            losses.append(value)
            step += 1
        if not losses:
            break
        log.epoch_losses.append(sum(losses) / len(losses))
        log.epoch_seconds.append(time.perf_counter() - started)
        logger.info("epoch %d loss %.6g (%.1fs)", epoch, log.epoch_losses[-1], log.epoch_seconds[-1])

        if eval_frames and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            dec, enh, _ = mean_scores(evaluate(model, eval_frames))
            log.evals.append(EvalRecord(epoch, dec, enh))
            logger.info("epoch %d eval psnr %.4f -> %.4f", epoch, dec, enh)
            if cfg.checkpoint_path is not None:
                save_checkpoint(model, cfg.checkpoint_path, adam)

    if cfg.checkpoint_path is not None:
        save_checkpoint(model, cfg.checkpoint_path, adam)
    return model, log
