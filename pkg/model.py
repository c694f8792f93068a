"""DRRN baseline and the block-information B-DRRN variant.

Both variants draw every layer from one named parameter registry. The mask
branch of B-DRRN and its merge stage reuse the main branch's entries, so
sharing is identity: the same ``Parameter`` object appears at every use site
and B-DRRN with additive fusion has exactly the parameters of DRRN.
"""

import enum
import logging
import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Mode,
    Parameter,
    RunningStats,
    Tensor,
    add,
    batchnorm_input,
    concat_channels,
    conv3x3,
    relu,
)

logger = logging.getLogger(__name__)

RECON_LR_SCALE = 0.1
BN_STREAMS = ("decoded", "mask")


class Variant(enum.Enum):
    DRRN = "drrn"
    BDRRN = "bdrrn"


class Fusion(enum.Enum):
    ADD = "add"
    CONCAT = "concat"


@dataclass
class ModelConfig:
    """Architecture settings. Defaults reproduce the published network."""

    variant: Variant = Variant.BDRRN
    channels: int = 64
    main_iters: int = 9
    extra_iters: int = 3
    merge_iters: int = 2
    fusion: Fusion = Fusion.ADD
    recon_init_scale: float = 1.0  # multiplies the He std of recon.w only

    def validate(self) -> None:
        """Raise ConfigError for impossible settings."""
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        for name in ("main_iters", "extra_iters", "merge_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.recon_init_scale >= 0:
            raise ConfigError(f"recon_init_scale must be >= 0, got {self.recon_init_scale}")

    @property
    def uses_mask(self) -> bool:
        return self.variant is Variant.BDRRN

    @property
    def has_fuse_layer(self) -> bool:
        return self.variant is Variant.BDRRN and self.fusion is Fusion.CONCAT

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "variant": self.variant.value,
            "channels": self.channels,
            "main_iters": self.main_iters,
            "extra_iters": self.extra_iters,
            "merge_iters": self.merge_iters,
            "fusion": self.fusion.value,
            "recon_init_scale": self.recon_init_scale,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        """Create a ModelConfig from a dictionary, defaulting missing keys."""
        defaults = cls()
        try:
            cfg = cls(
                variant=Variant(data.get("variant", defaults.variant.value)),
                channels=int(data.get("channels", defaults.channels)),
                main_iters=int(data.get("main_iters", defaults.main_iters)),
                extra_iters=int(data.get("extra_iters", defaults.extra_iters)),
                merge_iters=int(data.get("merge_iters", defaults.merge_iters)),
                fusion=Fusion(data.get("fusion", defaults.fusion.value)),
                recon_init_scale=float(data.get("recon_init_scale", defaults.recon_init_scale)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad model config: {exc}") from exc
        cfg.validate()
        return cfg


def layer_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes, in initialisation order.

    ``fuse.*`` comes last so that every other entry draws the same random
    numbers regardless of variant.
    """
    c = cfg.channels
    specs: list[tuple[str, tuple[int, ...]]] = [
        ("bn.gamma", (1,)),
        ("bn.beta", (1,)),
        ("conv_in.w", (c, 1, 3, 3)),
        ("conv_in.b", (c,)),
        ("rru.c1.w", (c, c, 3, 3)),
        ("rru.c1.b", (c,)),
        ("rru.c2.w", (c, c, 3, 3)),
        ("rru.c2.b", (c,)),
        ("recon.w", (1, c, 3, 3)),
        ("recon.b", (1,)),
    ]
    if cfg.has_fuse_layer:
        specs += [("fuse.w", (c, 2 * c, 3, 3)), ("fuse.b", (c,))]
    return specs


def lr_scale_for(name: str) -> float:
    return RECON_LR_SCALE if name.startswith("recon.") else 1.0


class Model:
    """A parameter registry, batch-norm statistics and the config that wires them."""

    def __init__(
        self,
        config: ModelConfig,
        params: dict[str, Parameter],
        bn_stats: dict[str, RunningStats] | None = None,
    ) -> None:
        self.config = config
        self.params = params
        self.bn_stats = bn_stats if bn_stats is not None else {s: RunningStats() for s in BN_STREAMS}

    def parameters(self) -> list[Parameter]:
        """Registry entries sorted by name (bytewise)."""
        return [self.params[name] for name in sorted(self.params, key=str.encode)]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].value


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """Create a model with deterministic He-style initialisation.

    Conv weights ~ N(0, 2 / fan_in), biases 0, gamma 1, beta 0.
    """
    cfg.validate()
    if cfg.uses_mask and cfg.extra_iters * 3 != cfg.main_iters:
        logger.warning(
            "mask branch depth %d is not 1/3 of main depth %d", cfg.extra_iters, cfg.main_iters
        )
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}
    for name, shape in layer_specs(cfg):
        if name.endswith(".w"):
            fan_in = shape[1] * shape[2] * shape[3]
            std = math.sqrt(2.0 / fan_in)
            if name.startswith("recon."):
                std *= cfg.recon_init_scale
            data = rng.normal(0.0, std, size=shape)
        elif name == "bn.gamma":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Parameter(name, Tensor(data, requires_grad=True), lr_scale_for(name))
    logger.debug("built %s model with %d parameters", cfg.variant.value, sum(p.size for p in params.values()))
    return Model(cfg, params)


# ---------------------------------------------------------------------- #
# Forward pass                                                             #
# ---------------------------------------------------------------------- #

def _rru(m: Model, u: Tensor, anchor: Tensor) -> Tensor:
    """anchor + c2(relu(c1(relu(u)))) with the single shared pair."""
    h = conv3x3(relu(u), m["rru.c1.w"], m["rru.c1.b"])
    h = conv3x3(relu(h), m["rru.c2.w"], m["rru.c2.b"])
    return add(anchor, h)


def _recurse(m: Model, start: Tensor, iterations: int) -> Tensor:
    u = start
    for _ in range(iterations):
        u = _rru(m, u, start)
    return u


def _embed(m: Model, x: Tensor, stream: str, mode: Mode) -> Tensor:
    a = batchnorm_input(x, m["bn.gamma"], m["bn.beta"], m.bn_stats[stream], mode)
    return conv3x3(a, m["conv_in.w"], m["conv_in.b"])


def forward(
    m: Model,
    decoded: Tensor,
    mask: Tensor | None,
    mode: Mode,
    taps: dict[str, Tensor] | None = None,
) -> Tensor:
    """Run the network on normalised luma (and mask) planes.

    Args:
        m: The model.
        decoded: Decoded frames, shape (n, 1, h, w), values in [0, 1].
        mask: Mean masks of the same shape; required for B-DRRN, refused for DRRN.
        mode: TRAIN uses batch statistics and updates running ones; EVAL
            uses running statistics and leaves the model untouched.
        taps: If given, receives the intermediate activations "main",
            "extra", "fused" and "merge" (the last three for B-DRRN only).

    Returns:
        Enhanced frames: decoded + predicted residual, same shape as decoded.
    """
    cfg = m.config
    if decoded.data.ndim != 4 or decoded.shape[1] != 1:
        raise ShapeError("forward", f"decoded must be (n, 1, h, w), got {decoded.shape}")
    if cfg.uses_mask:
        if mask is None:
            raise ConfigError("bdrrn forward needs a mask")
        if mask.shape != decoded.shape:
            raise ShapeError("forward", f"mask {mask.shape} vs decoded {decoded.shape}")
    elif mask is not None:
        raise ConfigError("drrn forward takes no mask")

    x0 = _embed(m, decoded, "decoded", mode)
    u = _recurse(m, x0, cfg.main_iters)
    if taps is not None:
        taps["main"] = u
    if not cfg.uses_mask:
        return add(decoded, conv3x3(relu(u), m["recon.w"], m["recon.b"]))

    y0 = _embed(m, mask, "mask", mode)
    v = _recurse(m, y0, cfg.extra_iters)
    if cfg.fusion is Fusion.ADD:
        f = add(u, v)
    else:
        f = conv3x3(relu(concat_channels(u, v)), m["fuse.w"], m["fuse.b"])
    w = _recurse(m, f, cfg.merge_iters)
    if taps is not None:
        taps.update(extra=v, fused=f, merge=w)
    return add(decoded, conv3x3(relu(w), m["recon.w"], m["recon.b"]))


# ---------------------------------------------------------------------- #
# Parameter audit                                                          #
# ---------------------------------------------------------------------- #

def param_count(m: Model) -> int:
    """Learnable scalars, each registry entry counted once."""
    return sum(p.size for p in m.params.values())


def param_table(m: Model) -> list[tuple[str, tuple[int, ...], int, float]]:
    """(name, shape, count, lr_scale) per registry entry, sorted by name."""
    return [(p.name, p.value.shape, p.size, p.lr_scale) for p in m.parameters()]
