import contextvars
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from src.model.tensor import Tensor


class Fp8Exception(Exception):
    """Base class for Exceptions of the FP8 codec"""
    def __init__(self, message: str):
        """Base class for Exceptions of the FP8 codec"""
        super().__init__(message)

class NonFiniteInputError(Fp8Exception):
    """A tensor to be quantized holds NaN or infinity."""

class InvalidParametersError(Fp8Exception):
    """Model parameters cannot be quantized."""


E4M3_MAX = 448.0
E4M3_MIN_SUBNORMAL = 2.0 ** -9
E4M3_NAN = 0x7F
GRANULARITIES = ("tensor", "channel")


def _build_decode_table() -> np.ndarray:
    table = np.empty(256, dtype=np.float64)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        exponent = (code >> 3) & 0x0F
        mantissa = code & 0x07
        if exponent == 0x0F and mantissa == 0x07:
            table[code] = np.copysign(np.nan, sign)
        elif exponent == 0:
            table[code] = sign * mantissa * E4M3_MIN_SUBNORMAL
        else:
            table[code] = sign * (1.0 + mantissa / 8.0) * 2.0 ** (exponent - 7)
    return table


DECODE_TABLE = _build_decode_table()
# magnitudes of codes 0x00..0x7E, strictly increasing
_POSITIVE_GRID = DECODE_TABLE[:0x7F]


def encode_array(values: np.ndarray) -> np.ndarray:
    """Encode to E4M3 codes with round-to-nearest-even, saturating at +-448.

    NaN maps to the NaN code with the input's sign bit; -0.0 maps to 0x80.
    """
    values = np.asarray(values, dtype=np.float64)
    magnitude = np.minimum(np.abs(values), E4M3_MAX)
    nan = np.isnan(values)
    magnitude = np.where(nan, 0.0, magnitude)

    upper = np.clip(np.searchsorted(_POSITIVE_GRID, magnitude, side="left"), 0, 0x7E)
    lower = np.clip(upper - 1, 0, 0x7E)
    to_upper = _POSITIVE_GRID[upper] - magnitude
    to_lower = magnitude - _POSITIVE_GRID[lower]
    # on a tie the even code has a zero mantissa LSB
    pick_upper = (to_upper < to_lower) | ((to_upper == to_lower) & (upper % 2 == 0))
    codes = np.where(pick_upper, upper, lower).astype(np.uint8)
    codes = np.where(nan, E4M3_NAN, codes).astype(np.uint8)
    return codes | np.where(np.signbit(values), 0x80, 0).astype(np.uint8)


def decode_array(codes: np.ndarray) -> np.ndarray:
    """Exact decode of E4M3 codes to 64-bit floats."""
    return DECODE_TABLE[np.asarray(codes, dtype=np.uint8)]


def encode(value: float) -> int:
    """Encode one scalar to its E4M3 code."""
    return int(encode_array(np.array([value]))[0])


def decode(code: int) -> float:
    """Decode one E4M3 code."""
    return float(DECODE_TABLE[code & 0xFF])


@dataclass(frozen=True)
class QuantTensor:
    """E4M3 codes with the absmax scale(s) needed to recover the values."""
    codes: np.ndarray
    scale: Union[float, np.ndarray]
    shape: tuple
    granularity: str = "tensor"


def _absmax_scale(x: np.ndarray, granularity: str) -> Union[float, np.ndarray]:
    if granularity == "tensor":
        peak = float(np.max(np.abs(x))) if x.size else 0.0
        return peak / E4M3_MAX if peak > 0 else 1.0
    if granularity == "channel":
        peak = np.abs(x).reshape(-1, x.shape[-1]).max(axis=0)
        return np.where(peak > 0, peak / E4M3_MAX, 1.0)
    raise InvalidParametersError(f"Unknown quantization granularity '{granularity}', expected one of {GRANULARITIES}.")


def quantize(x: Union[Tensor, np.ndarray], granularity: str = "tensor") -> QuantTensor:
    """Scale so that max|x|/s = 448 and encode; s = 1 for an all-zero input.

    Parameters
    ----------
    x: the values to quantize.
    granularity: "tensor" for one scale, "channel" for one scale per last-axis column.

    Raises
    ------
    NonFiniteInputError if x holds NaN or infinity.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteInputError("Cannot quantize a tensor holding non-finite values.")
    scale = _absmax_scale(data, granularity)
    return QuantTensor(codes=encode_array(data / scale), scale=scale, shape=data.shape, granularity=granularity)


def dequantize(q: QuantTensor, dtype: type = np.float64) -> Tensor:
    """decode(codes) * s."""
    return Tensor((decode_array(q.codes) * q.scale).reshape(q.shape), dtype=dtype)


def fake_quantize(data: np.ndarray, granularity: str = "tensor") -> np.ndarray:
    """Quantize-dequantize round trip in the input's precision."""
    return dequantize(quantize(data, granularity), dtype=data.dtype).data


_ACTIVATION_GRANULARITY: contextvars.ContextVar[Optional[str]] = contextvars.ContextVar(
    "fp8_activation_granularity", default=None
)


@contextmanager
def fp8_activations(granularity: str = "tensor"):
    """Within the block, activations passed to `quantize_activation` are rounded through E4M3."""
    if granularity not in GRANULARITIES:
        raise InvalidParametersError(f"Unknown quantization granularity '{granularity}'.")
    token = _ACTIVATION_GRANULARITY.set(granularity)
    try:
        yield
    finally:
        _ACTIVATION_GRANULARITY.reset(token)


def quantize_activation(x: Tensor) -> Tensor:
    """Identity unless FP8 activations are active, then a constant fake-quantized copy."""
    granularity = _ACTIVATION_GRANULARITY.get()
    if granularity is None:
        return x
    return Tensor(fake_quantize(x.data, granularity))
