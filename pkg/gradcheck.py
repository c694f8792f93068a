"""Central finite-difference checks of analytic gradients."""

import logging
from collections.abc import Callable, Mapping

import numpy as np

from .media_utils import Plane8
from .model import Model, ModelConfig, build_model, forward
from .partition import mean_mask, random_quadtree
from .tensor import Mode, ReluTape, Tensor, backward, mse_loss, no_grad, record_relu, replay_relu

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
TOLERANCE = 1e-4
# Gradients below this magnitude are compared on an absolute scale.
ERROR_FLOOR = 1e-5


def _central_difference(
    loss_fn: Callable[[], Tensor],
    data: np.ndarray,
    idx: tuple[int, ...],
    h: float,
    tape: ReluTape,
) -> float:
    original = data[idx]
    try:
        data[idx] = original + h
        with no_grad(), replay_relu(tape):
            plus = loss_fn().item()
        data[idx] = original - h
        with no_grad(), replay_relu(tape):
            minus = loss_fn().item()
    finally:
        data[idx] = original
    return (plus - minus) / (2.0 * h)


def relative_error(analytic: float, numeric: float, floor: float = ERROR_FLOOR) -> float:
    """|a - n| / max(|a|, |n|, floor)."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    leaves: Mapping[str, Tensor],
    step: float = FD_STEP,
    floor: float = ERROR_FLOOR,
) -> dict[str, float]:
    """Compare backward() against central differences for every leaf element.

    The ReLU patterns of the unperturbed evaluation are recorded and replayed
    for every perturbed one, so a step that would carry a ReLU input across
    zero still differentiates the same smooth piece the analytic gradient
    describes.

    Args:
        loss_fn: Rebuilds the scalar loss from the current leaf values.
        leaves: Tensors to check, by name; their data is perturbed in place
            and restored.
        step: Finite-difference step.
        floor: Lower bound on the denominator of the relative error.

    Returns:
        Per leaf, the largest element error |a - n| / max(|a|, |n|, floor).
    """
    for t in leaves.values():
        t.grad = None
    tape = ReluTape()
    with record_relu(tape):
        loss = loss_fn()
    backward(loss)
    errors: dict[str, float] = {}
    for name, t in leaves.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = 0.0
        for idx in np.ndindex(t.data.shape):
            numeric = _central_difference(loss_fn, t.data, idx, step, tape)
            worst = max(worst, relative_error(float(analytic[idx]), numeric, floor))
        errors[name] = worst
        logger.debug("gradcheck %s: %.3g", name, worst)
    return errors


def model_gradcheck(cfg: ModelConfig, height: int = 16, width: int = 16, seed: int = 0) -> dict[str, float]:
    """Gradient check of every parameter of a freshly built model.

    Inputs are a random frame, its mean mask over a random quadtree and a
    target perturbed by small noise; batch norm runs in Train mode.
    """
    model: Model = build_model(cfg, seed)
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(height, width), dtype=np.uint8)
    plane = Plane8(width=width, height=height, pixels=pixels)
    decoded = Tensor(pixels.astype(np.float64)[None, None] / 255.0)
    target = decoded.data + rng.normal(0.0, 0.02, size=decoded.shape)
    mask = None
    if cfg.uses_mask:
        partition = random_quadtree(seed, width, height, split_prob=0.5)
        mask = Tensor(mean_mask(plane, partition).values[None, None])

    def loss_fn() -> Tensor:
        return mse_loss(forward(model, decoded, mask, Mode.TRAIN), target)

    return check_gradients(loss_fn, {p.name: p.value for p in model.parameters()})
