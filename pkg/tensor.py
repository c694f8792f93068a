"""Minimal reverse-mode automatic differentiation over NCHW float64 arrays.

Only the operators the enhancement network needs are provided. Every
operation checks shapes explicitly; nothing broadcasts implicitly.

Usage::

    x = Tensor(np.zeros((1, 1, 8, 8)))
    y = relu(conv3x3(x, weight.value, bias.value))
    loss = mse_loss(y, target)
    backward(loss)          # fills weight.value.grad / bias.value.grad
"""

import contextlib
import contextvars
import enum
import logging
from collections.abc import Callable, Iterable, Iterator
from dataclasses import dataclass

import numpy as np

from .errors import BatchNormStateError, ConfigError, GraphError, ShapeError

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_DECAY = 0.9  # running = decay * running + (1 - decay) * batch

# Open no_grad blocks in the current thread or task.
_no_grad_depth: contextvars.ContextVar[int] = contextvars.ContextVar("bdrrn_no_grad_depth", default=0)

BackwardFn = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording for operations run inside the block."""
    _no_grad_depth.set(_no_grad_depth.get() + 1)
    try:
        yield
    finally:
        _no_grad_depth.set(_no_grad_depth.get() - 1)


def grad_enabled() -> bool:
    """True when operations in the current context record a graph."""
    return _no_grad_depth.get() == 0


class Mode(enum.Enum):
    """Batch-norm behaviour selector."""

    TRAIN = "train"
    EVAL = "eval"


class Tensor:
    """A float64 array with an optional gradient slot.

    Leaf tensors (parameters, inputs) own writable data. Tensors produced by an
    operation are read-only and remember how to push gradients to their parents.
    """

    def __init__(
        self,
        data: np.ndarray | float | list,
        requires_grad: bool = False,
        *,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
    ) -> None:
        if _backward is None:
            self.data = np.array(data, dtype=np.float64)
        else:
            self.data = np.asarray(data, dtype=np.float64)
            self.data.flags.writeable = False
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        """Return the value of a single-element tensor as a Python float."""
        if self.data.size != 1:
            raise ShapeError("item", f"tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None


@dataclass
class Parameter:
    """A named, trainable tensor.

    Attributes:
        name: Registry key, stable across checkpoint round trips.
        value: The tensor; always requires grad.
        lr_scale: Multiplier applied to the optimizer's base learning rate.
    """

    name: str
    value: Tensor
    lr_scale: float = 1.0

    def __post_init__(self) -> None:
        if not self.lr_scale > 0:
            raise ConfigError(f"parameter {self.name}: lr_scale must be > 0, got {self.lr_scale}")
        self.value.requires_grad = True

    @property
    def size(self) -> int:
        return int(self.value.data.size)


@dataclass
class RunningStats:
    """Exponential-moving-average statistics for one batch-norm input stream."""

    mean: float = 0.0
    var: float = 1.0
    ready: bool = False  # True after a Train-mode update or a checkpoint load

    def update(self, batch_mean: float, batch_var: float) -> None:
        self.mean = BN_DECAY * self.mean + (1.0 - BN_DECAY) * batch_mean
        self.var = BN_DECAY * self.var + (1.0 - BN_DECAY) * batch_var
        self.ready = True


class ReluTape:
    """ReLU on/off patterns in call order.

    While recording, every ``relu`` appends the pattern it used. While
    replaying, every ``relu`` uses the next stored pattern instead of the sign
    of its input, which makes the network smooth in a neighbourhood of the
    recorded point.
    """

    def __init__(self) -> None:
        self.patterns: list[np.ndarray] = []
        self._replaying = False
        self._pos = 0

    def pattern(self, x: np.ndarray) -> np.ndarray:
        if not self._replaying:
            self.patterns.append(x > 0)
            return self.patterns[-1]
        if self._pos >= len(self.patterns):
            raise GraphError(f"relu tape exhausted after {len(self.patterns)} pattern(s)")
        pattern = self.patterns[self._pos]
        if pattern.shape != x.shape:
            raise GraphError(f"relu tape entry {self._pos} has shape {pattern.shape}, input {x.shape}")
        self._pos += 1
        return pattern


_relu_tape: contextvars.ContextVar[ReluTape | None] = contextvars.ContextVar("bdrrn_relu_tape", default=None)


@contextlib.contextmanager
def record_relu(tape: ReluTape) -> Iterator[ReluTape]:
    """Record the pattern of every ReLU evaluated inside the block."""
    tape.patterns.clear()
    tape._replaying = False
    token = _relu_tape.set(tape)
    try:
        yield tape
    finally:
        _relu_tape.reset(token)


@contextlib.contextmanager
def replay_relu(tape: ReluTape) -> Iterator[ReluTape]:
    """Evaluate ReLUs inside the block with the recorded patterns."""
    tape._replaying = True
    tape._pos = 0
    token = _relu_tape.set(tape)
    try:
        yield tape
        if tape._pos != len(tape.patterns):
            raise GraphError(f"relu tape replay used {tape._pos} of {len(tape.patterns)} pattern(s)")
    finally:
        _relu_tape.reset(token)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    if _no_grad_depth.get() == 0 and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)
    # Untracked results are still immutable.
    return Tensor(data, _parents=(), _backward=_untracked)


def _untracked(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
    return ()


def _require_4d(op: str, t: Tensor) -> None:
    if t.data.ndim != 4:
        raise ShapeError(op, f"expected an NCHW tensor, got shape {t.shape}")


# ---------------------------------------------------------------------- #
# Operators                                                                #
# ---------------------------------------------------------------------- #

def conv3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1.

    Args:
        x: Input of shape (n, cin, h, w).
        weight: Kernels of shape (cout, cin, 3, 3).
        bias: Per-output-channel offsets of shape (cout,).

    Returns:
        Tensor of shape (n, cout, h, w).
    """
    _require_4d("conv3x3", x)
    n, cin, h, w = x.shape
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError("conv3x3", f"weight must be (cout, cin, 3, 3), got {weight.shape}")
    cout, wcin = weight.shape[:2]
    if wcin != cin:
        raise ShapeError("conv3x3", f"input has {cin} channels but weight expects {wcin}")
    if bias.shape != (cout,):
        raise ShapeError("conv3x3", f"bias must be ({cout},), got {bias.shape}")
    if h < 1 or w < 1:
        raise ShapeError("conv3x3", f"empty spatial extent {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    kernel = weight.data
    acc = np.zeros((n, h, w, cout))
    for dy in range(3):
        for dx in range(3):
            window = xp[:, :, dy:dy + h, dx:dx + w]
            acc += np.tensordot(window, kernel[:, :, dy, dx], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2)) + bias.data[None, :, None, None]

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad_nhwc = grad.transpose(0, 2, 3, 1)
        grad_xp = np.zeros((n, h + 2, w + 2, cin))
        grad_w = np.zeros_like(kernel)
        for dy in range(3):
            for dx in range(3):
                window = xp[:, :, dy:dy + h, dx:dx + w]
                grad_w[:, :, dy, dx] = np.tensordot(grad, window, axes=([0, 2, 3], [0, 2, 3]))
                grad_xp[:, dy:dy + h, dx:dx + w, :] += np.tensordot(
                    grad_nhwc, kernel[:, :, dy, dx], axes=([3], [0])
                )
        grad_x = np.ascontiguousarray(grad_xp[:, 1:h + 1, 1:w + 1, :].transpose(0, 3, 1, 2))
        return grad_x, grad_w, grad.sum(axis=(0, 2, 3))

    return _result(out, (x, weight, bias), backward_fn)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the derivative at exactly 0 is 0."""
    tape = _relu_tape.get()
    positive = x.data > 0 if tape is None else tape.pattern(x.data)
    out = np.where(positive, x.data, 0.0)

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (np.where(positive, grad, 0.0),)

    return _result(out, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError("add", f"{a.shape} vs {b.shape}")

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return grad, grad

    return _result(a.data + b.data, (a, b), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack b's channels after a's."""
    _require_4d("concat_channels", a)
    _require_4d("concat_channels", b)
    na, ca, ha, wa = a.shape
    nb, _, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError("concat_channels", f"batch/spatial mismatch {a.shape} vs {b.shape}")

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return np.ascontiguousarray(grad[:, :ca]), np.ascontiguousarray(grad[:, ca:])

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), backward_fn)


def mse_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Mean squared error; the target is treated as a constant.

    Returns:
        A 0-d tensor.
    """
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target_data.shape:
        raise ShapeError("mse_loss", f"{pred.shape} vs {target_data.shape}")
    diff = pred.data - target_data
    count = diff.size

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * (2.0 / count) * diff,)

    return _result(np.asarray(np.mean(diff * diff)), (pred,), backward_fn)


def batchnorm_input(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    mode: Mode,
) -> Tensor:
    """Single-channel batch normalisation for network inputs.

    Train mode normalises by the batch statistics over (n, h, w) and folds
    them into ``stats``; Eval mode normalises by ``stats``.

    Raises:
        BatchNormStateError: Eval mode with statistics that were never set.
    """
    _require_4d("batchnorm_input", x)
    if x.shape[1] != 1:
        raise ShapeError("batchnorm_input", f"expected one channel, got {x.shape[1]}")
    if gamma.shape != (1,) or beta.shape != (1,):
        raise ShapeError("batchnorm_input", f"gamma/beta must be (1,), got {gamma.shape}/{beta.shape}")

    g = float(gamma.data[0])
    if mode is Mode.TRAIN:
        mean = float(x.data.mean())
        var = float(x.data.var())
        stats.update(mean, var)
    else:
        if not stats.ready:
            raise BatchNormStateError("eval-mode batch norm has no running statistics")
        mean, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mean) * inv_std
    out = xhat * g + float(beta.data[0])
    count = x.data.size
    train = mode is Mode.TRAIN

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad_gamma = np.array([np.sum(grad * xhat)])
        grad_beta = np.array([np.sum(grad)])
        dxhat = grad * g
        if train:
            grad_x = (inv_std / count) * (
                count * dxhat - dxhat.sum() - xhat * np.sum(dxhat * xhat)
            )
        else:
            grad_x = dxhat * inv_std
        return grad_x, grad_gamma, grad_beta

    return _result(out, (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------------- #
# Differentiation                                                          #
# ---------------------------------------------------------------------- #

def _topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from root, every node after all of its parents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Calling it twice without zeroing adds the gradients twice.

    Raises:
        GraphError: loss is not a scalar produced by a recorded operation.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise GraphError(f"backward needs a 0-d loss, got shape {loss.shape}")
    if loss.is_leaf or not loss.requires_grad:
        raise GraphError("loss was not produced by a recorded operation")

    pending: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(_topological_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


def zero_grads(params: Iterable[Parameter]) -> None:
    """Clear the gradient slot of every parameter."""
    for p in params:
        p.value.zero_grad()
