import logging
from collections.abc import Callable, Sequence
from typing import Optional

import numpy as np

from src.model.tensor import NumericError, Tape, Tensor


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - fd| / max(|a|, |fd|, 1e-12) over all coordinates (0 for empty input)."""
    if analytic.size == 0:
        return 0.0
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denominator))


def _evaluate(f: Callable[[], Tensor]) -> float:
    value = f()
    scalar = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(scalar):
        raise NumericError(f"grad_check: function evaluated to {scalar}")
    return scalar


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Compare the tape gradient of a scalar function with central differences.

    Parameters
    ----------
    f: maps a tensor to a scalar tensor using tensor primitives.
    x: the point of evaluation; it is checked at 64-bit precision.
    eps: the finite-difference step.

    Returns
    -------
    The max over coordinates of |analytic - fd| / max(|analytic|, |fd|, 1e-12).

    Raises
    ------
    NumericError if f evaluates to a non-finite value at a perturbed point.
    """
    if x.dtype != np.float64:
        logging.warning(f"grad_check promotes {x.dtype} input to float64")
    point = x.data.astype(np.float64).copy()

    leaf = Tensor(point.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(leaf)
    if loss.node is None:
        analytic = np.zeros_like(point)
    else:
        analytic = tape.backward(loss, leaves=[leaf])[leaf]

    numeric = np.zeros_like(point)
    flat_point, flat_numeric = point.reshape(-1), numeric.reshape(-1)
    for i in range(flat_point.size):
        original = flat_point[i]
        flat_point[i] = original + eps
        plus = _evaluate(lambda: f(Tensor(point.copy())))
        flat_point[i] = original - eps
        minus = _evaluate(lambda: f(Tensor(point.copy())))
        flat_point[i] = original
        flat_numeric[i] = (plus - minus) / (2 * eps)
    return max_relative_error(analytic, numeric)


def grad_check_parameters(
        loss_fn: Callable[[], Tensor],
        params: Sequence[Tensor],
        eps: float = 1e-5,
        coordinates_per_tensor: Optional[int] = None,
        seed: int = 0
        ) -> float:
    """Gradient check of a loss over a list of parameter tensors, perturbed in place.

    Parameters
    ----------
    loss_fn: recomputes the scalar loss from the current parameter values.
    params: 64-bit leaf tensors with requires_grad set.
    eps: the finite-difference step.
    coordinates_per_tensor: if set, only this many seeded random coordinates of every
        tensor are perturbed; None checks every coordinate.
    seed: seed of the coordinate sample.

    Returns
    -------
    The max relative error over all checked coordinates of all tensors.
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, leaves=params)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for param in params:
        flat = param.data.reshape(-1)
        if coordinates_per_tensor is None or coordinates_per_tensor >= flat.size:
            coordinates = np.arange(flat.size)
        else:
            coordinates = rng.choice(flat.size, size=coordinates_per_tensor, replace=False)
        analytic = grads[param].reshape(-1)[coordinates]
        numeric = np.zeros_like(analytic)
        for j, i in enumerate(coordinates):
            original = flat[i]
            flat[i] = original + eps
            plus = _evaluate(loss_fn)
            flat[i] = original - eps
            minus = _evaluate(loss_fn)
            flat[i] = original
            numeric[j] = (plus - minus) / (2 * eps)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst
