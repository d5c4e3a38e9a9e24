import contextvars
import threading
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np


class TensorException(Exception):
    """Base class for Exceptions of the tensor engine"""
    def __init__(self, message: str):
        """Base class for Exceptions of the tensor engine"""
        super().__init__(message)

class ShapeError(TensorException):
    """The input extents are not valid for the primitive."""

class NumericError(TensorException):
    """A primitive produced a non-finite value."""

class TapeError(TensorException):
    """Backward was requested for a value the tape cannot differentiate."""


PRECISIONS = {
    "float64": np.float64,
    "float32": np.float32
}


def resolve_precision(precision: str) -> type:
    """Map a precision name of the experiment file to a numpy scalar type."""
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise TensorException(f"Unsupported precision '{precision}', expected one of {sorted(PRECISIONS)}.")


class Tensor:
    """Dense n-dimensional array that can take part in a differentiation tape.

    Tensors compare and hash by identity, so they can be used as keys of the
    gradient map returned by `Tape.backward`.
    """
    def __init__(self, data: Union[np.ndarray, float, Sequence], requires_grad: bool = False, dtype: Optional[type] = None) -> None:
        """Wrap an array.

        Parameters
        ----------
        data: the values; integer input is promoted to 64-bit floats.
        requires_grad: True for leaves (parameters) whose gradient is wanted.
        dtype: optional numpy scalar type to cast to.
        """
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional["Node"] = None

    @property
    def shape(self) -> tuple:
        """The extents of the tensor."""
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        """The scalar precision of the tensor."""
        return self.data.dtype

    @property
    def size(self) -> int:
        """Number of scalars held."""
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        """True if the tensor was not produced by a recorded primitive."""
        return self.node is None

    def item(self) -> float:
        """The single scalar of a one-element tensor."""
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A constant copy that does not take part in any tape."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: float) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class Node:
    """One applied primitive on a tape."""
    kind: str
    inputs: tuple
    outputs: tuple
    backward: Callable
    index: int
    tape: "Tape"


_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("active_tape", default=None)


class Tape:
    """Ordered record of the primitives applied while the tape is active.

    A tape is activated with a `with` block and is visible to every primitive
    applied in the same context (threads started with a copied context share it).
    Besides the nodes it keeps a running count of GEMM floating-point operations,
    which is what the FLOPs accounting is checked against.
    """
    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.gemm_flops = 0
        self.__lock = threading.Lock()
        self.__tokens: list = []

    def __enter__(self) -> "Tape":
        self.__tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self.__tokens.pop())

    @staticmethod
    def current() -> Optional["Tape"]:
        """The tape active in the calling context, if any."""
        return _ACTIVE_TAPE.get()

    def record(self, kind: str, inputs: tuple, outputs: tuple, backward: Callable) -> Node:
        """Append a node; inputs always precede it because they already exist."""
        with self.__lock:
            node = Node(kind=kind, inputs=inputs, outputs=outputs, backward=backward, index=len(self.nodes), tape=self)
            self.nodes.append(node)
        for output in outputs:
            output.node = node
        return node

    def count_gemm(self, flops: int) -> None:
        """Add the floating-point operations of one matrix product."""
        with self.__lock:
            self.gemm_flops += flops

    def backward(self, loss: Tensor, leaves: Iterable[Tensor] = ()) -> dict:
        """Propagate d(loss)/d(.) back through the recorded nodes.

        Parameters
        ----------
        loss: a one-element tensor produced on this tape.
        leaves: tensors that must appear in the result even if the loss does not depend on them.

        Returns
        -------
        Gradient map from every reached leaf (and every listed leaf) to its gradient array.
        The arrays are also stored on the leaves' `grad` attribute.

        Raises
        ------
        TapeError if the loss is not a scalar or was not produced on this tape.
        """
        if loss.size != 1:
            raise TapeError(f"Loss must be a scalar, got shape {loss.shape}.")
        if loss.node is None or loss.node.tape is not self:
            raise TapeError("Loss was not produced on this tape.")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes[:loss.node.index + 1]):
            out_grads = [grads.pop(id(output), None) for output in node.outputs]
            if all(g is None for g in out_grads):
                continue
            in_grads = node.backward(out_grads)
            for tensor, grad in zip(node.inputs, in_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
                    tensors[key] = tensor

        result = {}
        for key, grad in grads.items():
            tensor = tensors[key]
            if tensor.is_leaf:
                tensor.grad = grad.astype(tensor.dtype, copy=False)
                result[tensor] = tensor.grad
        for leaf in leaves:
            if leaf not in result:
                leaf.grad = np.zeros_like(leaf.data)
                result[leaf] = leaf.grad
        return result


def backward(loss: Tensor, leaves: Iterable[Tensor] = ()) -> dict:
    """Run `Tape.backward` on the tape that produced `loss`."""
    if loss.node is None:
        raise TapeError("Loss was not produced on a tape.")
    return loss.node.tape.backward(loss, leaves=leaves)


##############
# primitives #
##############
class Primitive:
    """A forward rule with its local backward rule.

    A fresh instance is created for every application, so `forward` may keep
    whatever the backward rule needs on `self`.
    """
    kind = ""

    def __init__(self, **attrs) -> None:
        self.attrs = attrs

    def check(self, *arrays: np.ndarray) -> None:
        """Raise ShapeError if the inputs do not fit the primitive."""

    def forward(self, *arrays: np.ndarray):
        raise NotImplementedError

    def backward(self, out_grads: list) -> list:
        raise NotImplementedError

    def shape_error(self, detail: str) -> ShapeError:
        return ShapeError(f"{self.kind}: {detail}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the operand shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class _Elementwise(Primitive):
    """Binary op where at most one operand is expanded, along size-1 or leading axes."""
    def check(self, a: np.ndarray, b: np.ndarray) -> None:
        try:
            out = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise self.shape_error(f"operands {a.shape} and {b.shape} do not align")
        if out != a.shape and out != b.shape:
            raise self.shape_error(f"operands {a.shape} and {b.shape} would both be expanded")


class Add(_Elementwise):
    kind = "add"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, out_grads):
        g = out_grads[0]
        return [_unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])]


class Mul(_Elementwise):
    kind = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, out_grads):
        g = out_grads[0]
        return [_unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)]


class Scale(Primitive):
    kind = "scale"

    def forward(self, a):
        return a * self.attrs["factor"]

    def backward(self, out_grads):
        return [out_grads[0] * self.attrs["factor"]]


class MatMul(Primitive):
    """(m, k) @ (k, n) or position-batched (P, m, k) @ (P, k, n)."""
    kind = "matmul"

    def check(self, a, b):
        if a.ndim != b.ndim or a.ndim not in (2, 3):
            raise self.shape_error(f"expected two 2-d or two 3-d operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise self.shape_error(f"inner extents differ: {a.shape} @ {b.shape}")
        if a.ndim == 3 and a.shape[0] != b.shape[0]:
            raise self.shape_error(f"batch extents differ: {a.shape} @ {b.shape}")

    def forward(self, a, b):
        self.a, self.b = a, b
        batch = a.shape[0] if a.ndim == 3 else 1
        self.flops = 2 * batch * a.shape[-2] * a.shape[-1] * b.shape[-1]
        return np.matmul(a, b)

    def backward(self, out_grads):
        g = out_grads[0]
        return [np.matmul(g, np.swapaxes(self.b, -1, -2)), np.matmul(np.swapaxes(self.a, -1, -2), g)]


class Concat(Primitive):
    kind = "concat"

    def check(self, *arrays):
        axis = self.attrs["axis"]
        first = arrays[0]
        for other in arrays[1:]:
            if other.ndim != first.ndim:
                raise self.shape_error(f"rank mismatch {first.shape} vs {other.shape}")
            for dim in range(first.ndim):
                if dim != axis % first.ndim and other.shape[dim] != first.shape[dim]:
                    raise self.shape_error(f"extent mismatch on axis {dim}: {first.shape} vs {other.shape}")

    def forward(self, *arrays):
        axis = self.attrs["axis"]
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, out_grads):
        bounds = np.cumsum(self.sizes)[:-1]
        return list(np.split(out_grads[0], bounds, axis=self.attrs["axis"]))


class Split(Primitive):
    kind = "split"

    def check(self, x):
        sizes, axis = self.attrs["sizes"], self.attrs["axis"]
        if sum(sizes) != x.shape[axis] or min(sizes) < 1:
            raise self.shape_error(f"sizes {list(sizes)} do not partition extent {x.shape[axis]} of axis {axis}")

    def forward(self, x):
        self.x_shape = x.shape
        self.dtype = x.dtype
        bounds = np.cumsum(self.attrs["sizes"])[:-1]
        return tuple(np.ascontiguousarray(part) for part in np.split(x, bounds, axis=self.attrs["axis"]))

    def backward(self, out_grads):
        axis = self.attrs["axis"]
        parts = []
        for grad, size in zip(out_grads, self.attrs["sizes"]):
            if grad is None:
                shape = list(self.x_shape)
                shape[axis] = size
                grad = np.zeros(shape, dtype=self.dtype)
            parts.append(grad)
        return [np.concatenate(parts, axis=axis)]


class Transpose(Primitive):
    kind = "transpose"

    def check(self, x):
        axes = self.attrs["axes"]
        if sorted(axes) != list(range(x.ndim)):
            raise self.shape_error(f"axes {list(axes)} are not a permutation for shape {x.shape}")

    def forward(self, x):
        return np.ascontiguousarray(np.transpose(x, self.attrs["axes"]))

    def backward(self, out_grads):
        return [np.transpose(out_grads[0], np.argsort(self.attrs["axes"]))]


class Reshape(Primitive):
    kind = "reshape"

    def check(self, x):
        shape = tuple(self.attrs["shape"])
        if int(np.prod(shape)) != x.size:
            raise self.shape_error(f"cannot view {x.shape} as {shape}")

    def forward(self, x):
        self.x_shape = x.shape
        return x.reshape(self.attrs["shape"])

    def backward(self, out_grads):
        return [out_grads[0].reshape(self.x_shape)]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    return out


class Sigmoid(Primitive):
    kind = "sigmoid"

    def forward(self, x):
        self.y = _sigmoid(x)
        return self.y

    def backward(self, out_grads):
        return [out_grads[0] * self.y * (1.0 - self.y)]


class Swish(Primitive):
    """Swish(x) = x * sigmoid(x)."""
    kind = "swish"

    def forward(self, x):
        self.x = x
        self.s = _sigmoid(x)
        return x * self.s

    def backward(self, out_grads):
        return [out_grads[0] * (self.s + self.x * self.s * (1.0 - self.s))]


class Relu(Primitive):
    kind = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0).astype(x.dtype)

    def backward(self, out_grads):
        return [out_grads[0] * self.mask]


class Softmax(Primitive):
    kind = "softmax"

    def forward(self, x):
        axis = self.attrs.get("axis", -1)
        shifted = np.exp(x - x.max(axis=axis, keepdims=True))
        self.y = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, out_grads):
        axis = self.attrs.get("axis", -1)
        g = out_grads[0]
        return [self.y * (g - (g * self.y).sum(axis=axis, keepdims=True))]


class Gather(Primitive):
    """Select slices by integer index along one axis (embedding lookup, permutes)."""
    kind = "gather"

    def check(self, x):
        indices, axis = self.attrs["indices"], self.attrs.get("axis", 0)
        if indices.size and (indices.min() < 0 or indices.max() >= x.shape[axis]):
            raise self.shape_error(f"index out of range for extent {x.shape[axis]} of axis {axis}")

    def forward(self, x):
        self.x_shape, self.dtype = x.shape, x.dtype
        return np.take(x, self.attrs["indices"], axis=self.attrs.get("axis", 0))

    def backward(self, out_grads):
        axis = self.attrs.get("axis", 0)
        grad = np.zeros(self.x_shape, dtype=self.dtype)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, self.attrs["indices"], np.moveaxis(out_grads[0], axis, 0))
        return [grad]


class TakeAlong(Primitive):
    """Per-row selection along the last axis; gradient reaches only the selected entries."""
    kind = "take_along"

    def check(self, x):
        indices = self.attrs["indices"]
        if indices.shape[:-1] != x.shape[:-1]:
            raise self.shape_error(f"index rows {indices.shape[:-1]} do not match {x.shape[:-1]}")

    def forward(self, x):
        self.x_shape, self.dtype = x.shape, x.dtype
        return np.take_along_axis(x, self.attrs["indices"], axis=-1)

    def backward(self, out_grads):
        indices = self.attrs["indices"]
        grad = np.zeros(self.x_shape, dtype=self.dtype)
        rows = grad.reshape(-1, self.x_shape[-1])
        flat_indices = indices.reshape(rows.shape[0], -1)
        np.add.at(rows, (np.arange(rows.shape[0])[:, None], flat_indices), out_grads[0].reshape(flat_indices.shape))
        return [grad]


class ScatterAdd(Primitive):
    """Sum rows of `src` into a zero tensor with `size` rows at `indices`."""
    kind = "scatter_add"

    def check(self, src):
        indices, size = self.attrs["indices"], self.attrs["size"]
        if indices.shape[0] != src.shape[0]:
            raise self.shape_error(f"{indices.shape[0]} indices for {src.shape[0]} rows")
        if indices.size and (indices.min() < 0 or indices.max() >= size):
            raise self.shape_error(f"index out of range for {size} rows")

    def forward(self, src):
        out = np.zeros((self.attrs["size"],) + src.shape[1:], dtype=src.dtype)
        np.add.at(out, self.attrs["indices"], src)
        return out

    def backward(self, out_grads):
        return [np.take(out_grads[0], self.attrs["indices"], axis=0)]


class Mean(Primitive):
    kind = "mean"

    def forward(self, x):
        self.x_shape = x.shape
        return x.mean(axis=self.attrs.get("axis"), keepdims=self.attrs.get("keepdims", False))

    def backward(self, out_grads):
        axis = self.attrs.get("axis")
        count = int(np.prod(self.x_shape)) if axis is None else self.x_shape[axis]
        grad = out_grads[0]
        if axis is not None and not self.attrs.get("keepdims", False):
            grad = np.expand_dims(grad, axis)
        return [np.broadcast_to(grad / count, self.x_shape).copy()]


class Sum(Primitive):
    kind = "sum"

    def forward(self, x):
        self.x_shape = x.shape
        return x.sum(axis=self.attrs.get("axis"), keepdims=self.attrs.get("keepdims", False))

    def backward(self, out_grads):
        axis = self.attrs.get("axis")
        grad = out_grads[0]
        if axis is not None and not self.attrs.get("keepdims", False):
            grad = np.expand_dims(grad, axis)
        return [np.broadcast_to(grad, self.x_shape).copy()]


class RmsNorm(Primitive):
    """x * gamma / sqrt(mean(x^2) + eps) over the last axis."""
    kind = "rmsnorm"

    def check(self, x, gamma):
        if gamma.shape != x.shape[-1:]:
            raise self.shape_error(f"gain {gamma.shape} does not match width {x.shape[-1]}")

    def forward(self, x, gamma):
        self.x, self.gamma = x, gamma
        self.rms = np.sqrt((x * x).mean(axis=-1, keepdims=True) + self.attrs["eps"])
        return x * gamma / self.rms

    def backward(self, out_grads):
        g = out_grads[0]
        width = self.x.shape[-1]
        normed = self.x / self.rms
        grad_gamma = (g * normed).reshape(-1, width).sum(axis=0)
        weighted = g * self.gamma
        grad_x = weighted / self.rms - normed * (weighted * normed).sum(axis=-1, keepdims=True) / (width * self.rms)
        return [grad_x, grad_gamma]


class BceWithLogits(Primitive):
    """Mean binary cross-entropy of logits against constant 0/1 labels."""
    kind = "bce_with_logits"

    def check(self, z):
        labels = self.attrs["labels"]
        if labels.shape != z.shape:
            raise self.shape_error(f"labels {labels.shape} do not match logits {z.shape}")

    def forward(self, z):
        self.z = z
        labels = self.attrs["labels"].astype(z.dtype)
        losses = np.maximum(z, 0) - z * labels + np.log1p(np.exp(-np.abs(z)))
        return np.asarray(losses.mean(), dtype=z.dtype)

    def backward(self, out_grads):
        labels = self.attrs["labels"].astype(self.z.dtype)
        return [out_grads[0] * (_sigmoid(self.z) - labels) / self.z.size]


_PRIMITIVES = {
    cls.kind: cls for cls in (
        Add, Mul, Scale, MatMul, Concat, Split, Transpose, Reshape, Sigmoid, Swish, Relu,
        Softmax, Gather, TakeAlong, ScatterAdd, Mean, Sum, RmsNorm, BceWithLogits
    )
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Union[Tensor, tuple]:
    """Apply one primitive and record it on the active tape.

    Parameters
    ----------
    kind: the primitive id, one of the registered kinds.
    inputs: the operand tensors.
    attrs: static attributes that fully determine the output shape.

    Returns
    -------
    The output tensor (a tuple of tensors for `split`).

    Raises
    ------
    ShapeError if the operands do not fit the primitive.
    NumericError if the output holds a non-finite value.
    """
    try:
        primitive = _PRIMITIVES[kind](**attrs)
    except KeyError:
        raise TensorException(f"Unknown primitive '{kind}'.")
    arrays = [tensor.data for tensor in inputs]
    primitive.check(*arrays)
    result = primitive.forward(*arrays)
    outputs = result if isinstance(result, tuple) else (result,)
    for output in outputs:
        if not np.all(np.isfinite(output)):
            raise NumericError(f"{kind}: produced non-finite values.")

    tape = Tape.current()
    record = tape is not None and any(tensor.requires_grad for tensor in inputs)
    tensors = tuple(Tensor(output, requires_grad=record) for output in outputs)
    if tape is not None:
        if isinstance(primitive, MatMul):
            tape.count_gemm(primitive.flops)
        if record:
            tape.record(kind, tuple(inputs), tensors, primitive.backward)
    return tensors if isinstance(result, tuple) else tensors[0]


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def scale(a: Tensor, factor: float) -> Tensor:
    return apply_primitive("scale", [a], factor=factor)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if len(tensors) == 1:
        return tensors[0]
    return apply_primitive("concat", list(tensors), axis=axis)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> tuple:
    return apply_primitive("split", [x], sizes=tuple(sizes), axis=axis)


def chunk(x: Tensor, parts: int, axis: int) -> tuple:
    """Split into `parts` equal slices along `axis`."""
    extent = x.shape[axis]
    if extent % parts != 0:
        raise ShapeError(f"split: extent {extent} of axis {axis} is not divisible by {parts}")
    return split(x, [extent // parts] * parts, axis)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return apply_primitive("transpose", [x], axes=tuple(axes))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", [x], shape=tuple(shape))


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def swish(x: Tensor) -> Tensor:
    return apply_primitive("swish", [x])


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", [x])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", [x], axis=axis)


def gather(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    return apply_primitive("gather", [x], indices=np.asarray(indices, dtype=np.int64), axis=axis)


def take_along(x: Tensor, indices: np.ndarray) -> Tensor:
    return apply_primitive("take_along", [x], indices=np.asarray(indices, dtype=np.int64))


def scatter_add(src: Tensor, indices: np.ndarray, size: int) -> Tensor:
    return apply_primitive("scatter_add", [src], indices=np.asarray(indices, dtype=np.int64), size=size)


def reduce_mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", [x], axis=axis, keepdims=keepdims)


def reduce_sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return apply_primitive("sum", [x], axis=axis, keepdims=keepdims)


def rmsnorm(x: Tensor, gamma: Tensor, eps: float) -> Tensor:
    return apply_primitive("rmsnorm", [x, gamma], eps=eps)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    return apply_primitive("bce_with_logits", [logits], labels=np.asarray(labels))


def top_k(x: Tensor, k: int) -> tuple:
    """Select the k largest entries of every row of the last axis.

    Selection is a stable sort on the negated scores, so ties go to the lowest
    index. The selection itself is not differentiable; the returned values are
    a `take_along` of the input and carry gradient to the selected entries only.

    Returns
    -------
    (values Tensor [..., k], indices ndarray [..., k])
    """
    if not 1 <= k <= x.shape[-1]:
        raise ShapeError(f"top_k: k={k} is outside [1, {x.shape[-1]}]")
    indices = np.argsort(-x.data, axis=-1, kind="stable")[..., :k]
    return take_along(x, indices), indices
