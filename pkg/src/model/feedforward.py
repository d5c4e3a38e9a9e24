from collections.abc import Sequence

import numpy as np

from src.model.fp8 import quantize_activation
from src.model.tensor import (
    ShapeError, Tensor, gather, matmul, mul, relu, reshape, swish, transpose
)

SWIGLU_ROLES = ("up", "gate", "down")


class FeedForwardException(Exception):
    """Base class for Exceptions of the per-position networks"""
    def __init__(self, message: str):
        """Base class for Exceptions of the per-position networks"""
        super().__init__(message)

class InitScaleError(FeedForwardException):
    """The init scales are not three non-negative numbers."""


def xavier_normal(shape: Sequence[int], scale: float, rng: np.random.Generator, dtype: type) -> np.ndarray:
    """Draw W ~ Normal(0, 2*scale/(n_in+n_out)) with fans taken from the last two axes.

    A scale of 0 gives the zero matrix.
    """
    n_in, n_out = shape[-2], shape[-1]
    std = np.sqrt(2.0 * scale / (n_in + n_out))
    return (rng.standard_normal(shape) * std).astype(dtype)


def position_slice(param: Tensor, offset: int, count: int) -> Tensor:
    """Rows offset..offset+count of a per-position parameter (the parameter itself if that is all of it)."""
    if offset == 0 and count == param.shape[0]:
        return param
    if offset + count > param.shape[0]:
        raise ShapeError(f"gather: positions {offset}..{offset + count} exceed {param.shape[0]}")
    return gather(param, np.arange(offset, offset + count), axis=0)


def to_position_major(x: Tensor) -> Tensor:
    """(B, P, W) -> (P, B, W)."""
    return transpose(x, (1, 0, 2))


def to_batch_major(x: Tensor) -> Tensor:
    """(P, B, W) -> (B, P, W)."""
    return transpose(x, (1, 0, 2))


def swiglu_core(x: Tensor, w_up: Tensor, w_gate: Tensor, w_down: Tensor, quantize_input: bool = True) -> Tensor:
    """down(Swish(x @ gate) * (x @ up)) on position-major or flat input.

    The input (unless already quantized by the caller) and the hidden activation
    pass through the FP8 activation hook, which is the identity unless simulated
    FP8 inference is active.
    """
    if quantize_input:
        x = quantize_activation(x)
    hidden = mul(swish(matmul(x, w_gate)), matmul(x, w_up))
    return matmul(quantize_activation(hidden), w_down)


def pswiglu(x: Tensor, w_up: Tensor, w_gate: Tensor, w_down: Tensor) -> Tensor:
    """Per-position SwiGLU of a (B, P, W) activation.

    Parameters
    ----------
    x: the activation, position p is transformed by the weights of position p.
    w_up, w_gate: (P, W, hidden) weights.
    w_down: (P, hidden, W) weights.
    """
    if x.shape[1] != w_up.shape[0] or x.shape[2] != w_up.shape[1]:
        raise ShapeError(f"pswiglu: input {x.shape} does not match weights {w_up.shape}")
    return to_batch_major(swiglu_core(to_position_major(x), w_up, w_gate, w_down))


class TokenNet:
    """A network applied independently at every position of a (B, P, W) activation.

    `forward` accepts any contiguous run of positions starting at `offset`, which
    is how the token-parallel simulator evaluates the positions one device owns.
    """
    def __init__(self, positions: int, width: int, hidden: int) -> None:
        self.positions = positions
        self.width = width
        self.hidden = hidden

    def forward(self, x: Tensor, offset: int = 0) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list:
        raise NotImplementedError

    def parameter_count(self) -> tuple:
        """(total, activated) parameter counts."""
        total = sum(p.size for p in self.parameters())
        return total, total

    def check_input(self, x: Tensor, offset: int) -> None:
        if x.data.ndim != 3 or x.shape[2] != self.width or offset + x.shape[1] > self.positions:
            raise ShapeError(
                f"{type(self).__name__}: input {x.shape} at offset {offset} does not fit "
                f"{self.positions} positions of width {self.width}"
            )


class PerTokenSwiGLU(TokenNet):
    """Every position has its own bias-free SwiGLU with hidden width n*W."""
    def __init__(
            self,
            positions: int,
            width: int,
            expansion: int,
            rng: np.random.Generator,
            dtype: type = np.float64,
            init_scales: Sequence[float] = (1.0, 1.0, 0.01)
            ) -> None:
        super().__init__(positions, width, expansion * width)
        self.w_up = Tensor(np.zeros((positions, width, self.hidden), dtype=dtype), requires_grad=True)
        self.w_gate = Tensor(np.zeros((positions, width, self.hidden), dtype=dtype), requires_grad=True)
        self.w_down = Tensor(np.zeros((positions, self.hidden, width), dtype=dtype), requires_grad=True)
        small_init(self, init_scales, rng)

    def weights(self) -> dict:
        """The SwiGLU weights by role."""
        return {"up": self.w_up, "gate": self.w_gate, "down": self.w_down}

    def forward(self, x: Tensor, offset: int = 0) -> Tensor:
        self.check_input(x, offset)
        count = x.shape[1]
        return pswiglu(
            x,
            position_slice(self.w_up, offset, count),
            position_slice(self.w_gate, offset, count),
            position_slice(self.w_down, offset, count)
        )

    def parameters(self) -> list:
        return [self.w_up, self.w_gate, self.w_down]


class SharedSwiGLU(TokenNet):
    """One SwiGLU whose weights are shared by every position."""
    def __init__(
            self,
            positions: int,
            width: int,
            expansion: int,
            rng: np.random.Generator,
            dtype: type = np.float64,
            init_scales: Sequence[float] = (1.0, 1.0, 0.01)
            ) -> None:
        super().__init__(positions, width, expansion * width)
        self.w_up = Tensor(np.zeros((width, self.hidden), dtype=dtype), requires_grad=True)
        self.w_gate = Tensor(np.zeros((width, self.hidden), dtype=dtype), requires_grad=True)
        self.w_down = Tensor(np.zeros((self.hidden, width), dtype=dtype), requires_grad=True)
        small_init(self, init_scales, rng)

    def weights(self) -> dict:
        return {"up": self.w_up, "gate": self.w_gate, "down": self.w_down}

    def forward(self, x: Tensor, offset: int = 0) -> Tensor:
        self.check_input(x, offset)
        batch, count, width = x.shape
        flat = reshape(x, (batch * count, width))
        return reshape(swiglu_core(flat, self.w_up, self.w_gate, self.w_down), (batch, count, width))

    def parameters(self) -> list:
        return [self.w_up, self.w_gate, self.w_down]


class PerTokenFFN(TokenNet):
    """Every position has its own two-layer ReLU network."""
    def __init__(
            self,
            positions: int,
            width: int,
            expansion: int,
            rng: np.random.Generator,
            dtype: type = np.float64,
            init_scales: Sequence[float] = (1.0, 1.0, 0.01)
            ) -> None:
        super().__init__(positions, width, expansion * width)
        self.w_in = Tensor(xavier_normal((positions, width, self.hidden), init_scales[0], rng, dtype), requires_grad=True)
        self.w_out = Tensor(xavier_normal((positions, self.hidden, width), init_scales[-1], rng, dtype), requires_grad=True)

    def forward(self, x: Tensor, offset: int = 0) -> Tensor:
        self.check_input(x, offset)
        count = x.shape[1]
        xt = quantize_activation(to_position_major(x))
        hidden = relu(matmul(xt, position_slice(self.w_in, offset, count)))
        out = matmul(quantize_activation(hidden), position_slice(self.w_out, offset, count))
        return to_batch_major(out)

    def parameters(self) -> list:
        return [self.w_in, self.w_out]


def small_init(net, scales: Sequence[float], rng: np.random.Generator, variance: float = 1.0) -> None:
    """Redraw the up, gate and down weights of a SwiGLU-style net in place.

    Parameters
    ----------
    net: anything exposing `weights()` as a role -> Tensor mapping (SwiGLU nets, expert banks).
    scales: one Xavier-normal scale per role, in the order up, gate, down; 0 gives zeros.
    rng: source of the new values.
    variance: extra multiplier of every role's variance.
    """
    if len(scales) != len(SWIGLU_ROLES) or min(scales) < 0:
        raise InitScaleError(f"small_init needs three non-negative scales, got {list(scales)}")
    for role, scale in zip(SWIGLU_ROLES, scales):
        weight = net.weights()[role]
        weight.data[...] = xavier_normal(weight.shape, scale * variance, rng, weight.dtype)


TOKEN_NETS = {
    "pertoken_swiglu": PerTokenSwiGLU,
    "shared_swiglu": SharedSwiGLU,
    "pertoken_ffn": PerTokenFFN
}
