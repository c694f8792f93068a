"""Binary checkpoint format.

Layout (little-endian)::

    "BDRN"  u32 version
    u8 variant  u8 fusion  u32 channels  u32 main  u32 extra  u32 merge
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 ndim, u32 dims..., float64 data

Tensors are ordered by name, bytewise ascending. Besides the model
parameters a checkpoint may carry batch-norm running statistics
(``running.<stream>.mean|var``) and Adam state (``adam.*``).
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
)
from .media_utils import atomic_write_bytes
from .model import BN_STREAMS, Fusion, Model, ModelConfig, Variant, layer_specs, lr_scale_for
from .optim import AdamState
from .tensor import Parameter, RunningStats, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"BDRN"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sI")
_CONFIG = struct.Struct("<BBIIII")
_COUNT = struct.Struct("<I")
_NAME_LEN = struct.Struct("<H")
_NDIM = struct.Struct("<B")

_VARIANT_CODES = {Variant.DRRN: 0, Variant.BDRRN: 1}
_FUSION_CODES = {Fusion.ADD: 0, Fusion.CONCAT: 1}


@dataclass
class Checkpoint:
    """Decoded checkpoint contents before they are turned into a Model."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]


# ---------------------------------------------------------------------- #
# Writing                                                                  #
# ---------------------------------------------------------------------- #

def _collect_tensors(m: Model, adam: AdamState | None) -> dict[str, np.ndarray]:
    tensors = {p.name: p.value.data for p in m.parameters()}
    for stream, stats in m.bn_stats.items():
        if stats.ready:
            tensors[f"running.{stream}.mean"] = np.array([stats.mean])
            tensors[f"running.{stream}.var"] = np.array([stats.var])
    if adam is not None:
        tensors["adam.t"] = np.array([float(adam.t)])
        tensors["adam.hparams"] = np.array([adam.lr, adam.beta1, adam.beta2, adam.eps])
        for name in adam.m:
            tensors[f"adam.m.{name}"] = adam.m[name]
            tensors[f"adam.v.{name}"] = adam.v[name]
    return tensors


def encode_checkpoint(m: Model, adam: AdamState | None = None) -> bytes:
    """Serialise a model (and optionally its optimizer state) to bytes."""
    cfg = m.config
    fusion = cfg.fusion if cfg.variant is Variant.BDRRN else Fusion.ADD
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION),
        _CONFIG.pack(
            _VARIANT_CODES[cfg.variant],
            _FUSION_CODES[fusion],
            cfg.channels,
            cfg.main_iters,
            cfg.extra_iters,
            cfg.merge_iters,
        ),
    ]
    tensors = _collect_tensors(m, adam)
    parts.append(_COUNT.pack(len(tensors)))
    for name in sorted(tensors, key=str.encode):
        data = tensors[name]
        encoded = name.encode("utf-8")
        parts.append(_NAME_LEN.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_NDIM.pack(data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(m: Model, path: str | Path, adam: AdamState | None = None) -> None:
    """Atomically write a checkpoint file."""
    atomic_write_bytes(Path(path), encode_checkpoint(m, adam))
    logger.info("checkpoint written: %s", path)


# ---------------------------------------------------------------------- #
# Reading                                                                  #
# ---------------------------------------------------------------------- #

class _Reader:
    def __init__(self, data: bytes, source: str) -> None:
        self._data = data
        self._pos = 0
        self._source = source

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise CheckpointTruncatedError(
                f"{self._source}: truncated at byte {len(self._data)}, needed {self._pos + n}"
            )
        chunk = self._data[self._pos:self._pos + n]
        self._pos += n
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    """Parse checkpoint bytes.

    Raises:
        CheckpointMagicError: Wrong leading bytes.
        CheckpointVersionError: Unknown format version.
        CheckpointTruncatedError: Data ends early.
        CheckpointShapeError: Bad config codes.
    """
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointMagicError(f"{source}: not a checkpoint (magic {data[:4]!r})")
    reader = _Reader(data, source)
    _, version = reader.unpack(_HEADER)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{source}: format version {version}, expected {FORMAT_VERSION}")
    variant_code, fusion_code, channels, main, extra, merge = reader.unpack(_CONFIG)
    try:
        variant = {v: k for k, v in _VARIANT_CODES.items()}[variant_code]
        fusion = {v: k for k, v in _FUSION_CODES.items()}[fusion_code]
    except KeyError:
        raise CheckpointShapeError(f"{source}: unknown variant/fusion code {variant_code}/{fusion_code}") from None
    config = ModelConfig(
        variant=variant,
        channels=channels,
        main_iters=main,
        extra_iters=extra,
        merge_iters=merge,
        fusion=fusion,
    )

    (count,) = reader.unpack(_COUNT)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack(_NAME_LEN)
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointShapeError(f"{source}: tensor name is not UTF-8") from None
        (ndim,) = reader.unpack(_NDIM)
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(8 * size)
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return Checkpoint(config=config, tensors=tensors)


def read_checkpoint(path: str | Path) -> Checkpoint:
    """Read and decode a checkpoint file."""
    return decode_checkpoint(Path(path).read_bytes(), str(path))


def _build(ckpt: Checkpoint, source: str) -> Model:
    cfg = ckpt.config
    try:
        cfg.validate()
    except ConfigError as exc:
        raise CheckpointShapeError(f"{source}: {exc}") from exc
    expected = dict(layer_specs(cfg))
    params: dict[str, Parameter] = {}
    for name, shape in expected.items():
        if name not in ckpt.tensors:
            raise CheckpointShapeError(f"{source}: missing tensor {name}")
        data = ckpt.tensors[name]
        if data.shape != shape:
            raise CheckpointShapeError(f"{source}: {name} has shape {data.shape}, config implies {shape}")
        params[name] = Parameter(name, Tensor(data, requires_grad=True), lr_scale_for(name))
    for name in ckpt.tensors:
        if name not in expected and not name.startswith(("running.", "adam.")):
            raise CheckpointShapeError(f"{source}: tensor {name} does not belong to a {cfg.variant.value} model")

    bn_stats = {stream: RunningStats() for stream in BN_STREAMS}
    for stream, stats in bn_stats.items():
        mean = ckpt.tensors.get(f"running.{stream}.mean")
        var = ckpt.tensors.get(f"running.{stream}.var")
        if mean is not None and var is not None:
            stats.mean, stats.var, stats.ready = float(mean[0]), float(var[0]), True
    return Model(cfg, params, bn_stats)


def load_checkpoint(
    path: str | Path,
    variant: Variant | None = None,
    fusion: Fusion | None = None,
) -> Model:
    """Load a model, optionally re-wiring it as another variant.

    A DRRN checkpoint loads as B-DRRN with additive fusion because the two
    share one parameter set; the mask stream then has no running statistics
    until it is trained.

    Raises:
        CheckpointError: Any of the distinct magic/version/truncation/shape failures.
    """
    ckpt = read_checkpoint(path)
    if variant is not None:
        ckpt.config.variant = variant
    if fusion is not None:
        ckpt.config.fusion = fusion
    return _build(ckpt, str(path))


def load_training_state(path: str | Path) -> tuple[Model, AdamState | None]:
    """Load a model together with the optimizer state stored beside it, if any."""
    ckpt = read_checkpoint(path)
    model = _build(ckpt, str(path))
    if "adam.t" not in ckpt.tensors or "adam.hparams" not in ckpt.tensors:
        return model, None
    lr, beta1, beta2, eps = (float(v) for v in ckpt.tensors["adam.hparams"])
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=int(ckpt.tensors["adam.t"][0]))
    for name in model.params:
        if f"adam.m.{name}" in ckpt.tensors:
            state.m[name] = ckpt.tensors[f"adam.m.{name}"].copy()
            state.v[name] = ckpt.tensors[f"adam.v.{name}"].copy()
    return model, state
