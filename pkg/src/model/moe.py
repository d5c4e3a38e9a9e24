import threading
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from src.model.feedforward import (
    PerTokenSwiGLU, TokenNet, position_slice, small_init, swiglu_core,
    to_batch_major, to_position_major, xavier_normal
)
from src.model.fp8 import quantize_activation
from src.model.tensor import (
    Tensor, chunk, concat, gather, matmul, mul, reshape, scale, scatter_add,
    softmax, split, top_k
)


class MoeException(Exception):
    """Base class for Exceptions of the sparse-pertoken MoE"""
    def __init__(self, message: str):
        """Base class for Exceptions of the sparse-pertoken MoE"""
        super().__init__(message)

class RoutingError(MoeException):
    """The routed active count does not fit the routed expert count."""

class ExpertSplitError(MoeException):
    """The hidden width cannot be split evenly into experts."""


# sparsity name -> (experts including the shared one, active including the shared one)
SPARSITY_PRESETS = {
    "1:2": (4, 2),
    "1:4": (8, 2),
    "1:8": (16, 2)
}

EXPERT_SCOPES = ("pertoken", "global")
DISPATCH_MODES = ("grouped", "per_token")


def default_alpha(total_experts: int, active_experts: int) -> float:
    """Gate value scale: total over activated expert count."""
    if active_experts <= 0:
        raise MoeException(f"Active expert count must be positive, got {active_experts}.")
    return total_experts / active_experts


@dataclass(frozen=True)
class MoeConfig:
    """Expert layout of a sparse-pertoken MoE stage."""
    enabled: bool = False
    stages: tuple = ("mixing", "reverting")
    experts: int = 4
    active: int = 2
    shared: bool = True
    alpha: Union[str, float] = "auto"
    expert_scope: str = "pertoken"
    dispatch: str = "grouped"
    init_variance: float = 1.0

    @property
    def routed_experts(self) -> int:
        """E_routed: the experts the router chooses from, per bank."""
        return self.experts - 1 if self.shared else self.experts

    @property
    def routed_active(self) -> int:
        """k': the experts the router selects per example."""
        return self.active - 1 if self.shared else self.active

    @property
    def resolved_alpha(self) -> float:
        """alpha, with "auto" resolved to experts/active."""
        if self.alpha == "auto":
            return default_alpha(self.experts, self.active)
        return float(self.alpha)

    def validate(self) -> None:
        """Raise RoutingError / MoeException on an inconsistent layout."""
        if self.experts < 1 or not 1 <= self.active <= self.experts:
            raise RoutingError(f"Need 1 <= active <= experts, got active={self.active}, experts={self.experts}.")
        if self.routed_active > self.routed_experts:
            raise RoutingError(f"k'={self.routed_active} exceeds the {self.routed_experts} routed experts.")
        if self.resolved_alpha <= 0:
            raise MoeException(f"alpha must be positive, got {self.alpha}.")
        if self.expert_scope not in EXPERT_SCOPES:
            raise MoeException(f"Unknown expert scope '{self.expert_scope}', expected one of {EXPERT_SCOPES}.")
        if self.dispatch not in DISPATCH_MODES:
            raise MoeException(f"Unknown dispatch '{self.dispatch}', expected one of {DISPATCH_MODES}.")
        for stage in self.stages:
            if stage not in ("mixing", "reverting"):
                raise MoeException(f"Unknown MoE stage '{stage}'.")


def select_gates(scores: Tensor, k: int) -> tuple:
    """Top-k selection followed by a softmax over the selected scores only.

    Returns
    -------
    (indices ndarray [..., k], gates Tensor [..., k]); the gates of a row sum to 1.
    """
    values, indices = top_k(scores, k)
    return indices, softmax(values, axis=-1)


def route(x: Tensor, router: Tensor, k: int) -> tuple:
    """Score routed experts with `x @ router` and select k of them.

    Parameters
    ----------
    x: (N, W) inputs of one position.
    router: (W, E_routed) router weights.
    k: routed active count k'.

    Raises
    ------
    RoutingError if k exceeds the routed expert count.
    """
    if k > router.shape[-1]:
        raise RoutingError(f"k'={k} exceeds the {router.shape[-1]} routed experts.")
    return select_gates(matmul(x, router), k)


class ExpertBank:
    """SwiGLU weights of a set of experts, indexed by the leading axes."""
    def __init__(self, shape_prefix: tuple, width: int, hidden: int, dtype: type) -> None:
        self.w_up = Tensor(np.zeros(shape_prefix + (width, hidden), dtype=dtype), requires_grad=True)
        self.w_gate = Tensor(np.zeros(shape_prefix + (width, hidden), dtype=dtype), requires_grad=True)
        self.w_down = Tensor(np.zeros(shape_prefix + (hidden, width), dtype=dtype), requires_grad=True)

    def weights(self) -> dict:
        return {"up": self.w_up, "gate": self.w_gate, "down": self.w_down}

    def parameters(self) -> list:
        return [self.w_up, self.w_gate, self.w_down]


class RoutingLog:
    """Accumulates routing decisions per position for load-balance statistics."""
    def __init__(self, positions: int, bank_experts: int, routed_active: int, shared: bool) -> None:
        self.counts = np.zeros((positions, bank_experts), dtype=np.int64)
        self.windows = np.zeros(positions, dtype=np.int64)
        self.routed_active = routed_active
        self.shared = shared
        self.min_margin = np.inf
        self.__lock = threading.Lock()

    def record(self, indices: np.ndarray, offset: int = 0, scores: Optional[np.ndarray] = None) -> None:
        """Add the (count, B, k') selections of positions offset..offset+count.

        With `scores` the smallest gap between the k'-th and the next router score is
        tracked in `min_margin`; it stays inf when every expert is selected.
        """
        with self.__lock:
            for p in range(indices.shape[0]):
                self.counts[offset + p] += np.bincount(indices[p].ravel(), minlength=self.counts.shape[1])
                self.windows[offset + p] += indices.shape[1]
            k = indices.shape[-1]
            if scores is not None and k < scores.shape[-1]:
                ordered = -np.sort(-scores, axis=-1)
                self.min_margin = min(self.min_margin, float(np.min(ordered[..., k - 1] - ordered[..., k])))


@dataclass(frozen=True)
class LoadStats:
    """Per-position expert activation frequencies over a window of examples."""
    counts: np.ndarray
    window: int
    frequencies: np.ndarray
    uniform_frequency: float
    shared_frequency: Optional[float]
    coefficient_of_variation: np.ndarray

    @property
    def max_relative_deviation(self) -> float:
        """max |frequency - uniform| / uniform over positions and routed experts."""
        return float(np.max(np.abs(self.frequencies - self.uniform_frequency)) / self.uniform_frequency)


def load_balance(log: RoutingLog) -> LoadStats:
    """Turn routing counts into frequencies (activations per example) and their spread.

    Raises
    ------
    MoeException on an empty window.
    """
    if log.windows.size == 0 or np.any(log.windows == 0):
        raise MoeException("Load statistics need at least one routed example per position.")
    frequencies = log.counts / log.windows[:, None]
    mean = frequencies.mean(axis=1)
    cv = np.where(mean > 0, frequencies.std(axis=1) / np.where(mean > 0, mean, 1.0), 0.0)
    return LoadStats(
        counts=log.counts.copy(),
        window=int(log.windows.min()),
        frequencies=frequencies,
        uniform_frequency=log.routed_active / log.counts.shape[1],
        shared_frequency=1.0 if log.shared else None,
        coefficient_of_variation=cv
    )


class SpMoe(TokenNet):
    """Sparse-pertoken MoE: y = alpha * sum(g_i * Expert_i(x)) + SharedExpert(x) per position.

    With the per-token scope every position owns a bank of E_routed experts; with the
    global scope a single bank of P*E_routed experts is shared by all positions while
    routers and shared experts stay per position.
    """
    def __init__(
            self,
            positions: int,
            width: int,
            expansion: int,
            config: MoeConfig,
            rng: np.random.Generator,
            dtype: type = np.float64,
            init_scales: Sequence[float] = (1.0, 1.0, 0.01)
            ) -> None:
        config.validate()
        if (expansion * width) % config.experts != 0:
            raise ExpertSplitError(
                f"Hidden width {expansion * width} cannot be split into {config.experts} experts."
            )
        super().__init__(positions, width, expansion * width // config.experts)
        self.config = config
        self.alpha = config.resolved_alpha
        if config.expert_scope == "pertoken":
            self.banks, self.bank_experts = positions, config.routed_experts
        else:
            self.banks, self.bank_experts = 1, positions * config.routed_experts
        self.routed = ExpertBank((self.banks, self.bank_experts), width, self.hidden, dtype)
        self.shared = ExpertBank((positions,), width, self.hidden, dtype) if config.shared else None
        self.router = Tensor(xavier_normal((positions, width, self.bank_experts), 1.0, rng, dtype), requires_grad=True)
        small_init(self.routed, init_scales, rng, variance=config.init_variance)
        if self.shared is not None:
            small_init(self.shared, init_scales, rng)
        self.routing_log: Optional[RoutingLog] = None

    def start_routing_log(self) -> RoutingLog:
        """Begin recording routing decisions of subsequent forward passes."""
        self.routing_log = RoutingLog(self.positions, self.bank_experts, self.config.routed_active, self.config.shared)
        return self.routing_log

    def parameters(self) -> list:
        params = self.routed.parameters() + [self.router]
        if self.shared is not None:
            params += self.shared.parameters()
        return params

    def __expert_pieces(self, offset: int, count: int) -> list:
        """Per-(bank, expert) (W, hidden) weight triples for the banks of the given positions."""
        banks = count if self.config.expert_scope == "pertoken" else 1
        first = offset if self.config.expert_scope == "pertoken" else 0
        pieces = []
        for weight in self.routed.parameters():
            local = position_slice(weight, first, banks)
            flat = reshape(local, (banks * self.bank_experts,) + weight.shape[2:])
            parts = split(flat, [1] * (banks * self.bank_experts), axis=0)
            pieces.append([reshape(part, weight.shape[2:]) for part in parts])
        return list(zip(*pieces))

    def forward(self, x: Tensor, offset: int = 0) -> Tensor:
        self.check_input(x, offset)
        batch, count, width = x.shape
        xt = quantize_activation(to_position_major(x))
        out = None
        k = self.config.routed_active
        if k > 0:
            out = scale(self.__routed_forward(xt, offset, count, k), self.alpha)
        if self.shared is not None:
            shared = swiglu_core(
                xt,
                position_slice(self.shared.w_up, offset, count),
                position_slice(self.shared.w_gate, offset, count),
                position_slice(self.shared.w_down, offset, count),
                quantize_input=False
            )
            out = shared if out is None else out + shared
        return to_batch_major(out)

    def __routed_forward(self, xt: Tensor, offset: int, count: int, k: int) -> Tensor:
        batch = xt.shape[1]
        scores = matmul(xt, position_slice(self.router, offset, count))
        indices, gates = select_gates(scores, k)
        if self.routing_log is not None:
            self.routing_log.record(indices, offset, scores.data)
        flat_gates = reshape(gates, (count * batch * k,))
        pieces = self.__expert_pieces(offset, count)
        rows = chunk(xt, count, axis=0) if count > 1 else (xt,)

        outputs = []
        for p in range(count):
            xp = reshape(rows[p], (batch, self.width))
            bank = p if self.config.expert_scope == "pertoken" else 0
            bank_pieces = pieces[bank * self.bank_experts:(bank + 1) * self.bank_experts]
            dispatch = self.__grouped if self.config.dispatch == "grouped" else self.__per_token
            y = dispatch(xp, indices[p], flat_gates, p * batch * k, bank_pieces)
            outputs.append(reshape(y, (1, batch, self.width)))
        return concat(outputs, axis=0)

    def __grouped(self, xp: Tensor, indices: np.ndarray, flat_gates: Tensor, base: int, pieces: list) -> Tensor:
        """Permute rows by expert, run each expert once on its rows, unpermute by scatter-add."""
        batch, k = indices.shape
        contributions, rows = [], []
        for expert, (w_up, w_gate, w_down) in enumerate(pieces):
            row_ids, slot_ids = np.nonzero(indices == expert)
            if row_ids.size == 0:
                continue
            y = swiglu_core(gather(xp, row_ids), w_up, w_gate, w_down, quantize_input=False)
            g = reshape(gather(flat_gates, base + row_ids * k + slot_ids), (row_ids.size, 1))
            contributions.append(mul(y, g))
            rows.append(row_ids)
        return scatter_add(concat(contributions, axis=0), np.concatenate(rows), size=batch)

    def __per_token(self, xp: Tensor, indices: np.ndarray, flat_gates: Tensor, base: int, pieces: list) -> Tensor:
        """Naive dispatch: every (example, selected expert) pair evaluated on its own."""
        batch, k = indices.shape
        contributions, rows = [], []
        for b in range(batch):
            xb = gather(xp, [b])
            for j in range(k):
                w_up, w_gate, w_down = pieces[indices[b, j]]
                y = swiglu_core(xb, w_up, w_gate, w_down, quantize_input=False)
                g = reshape(gather(flat_gates, [base + b * k + j]), (1, 1))
                contributions.append(mul(y, g))
                rows.append(b)
        return scatter_add(concat(contributions, axis=0), np.array(rows), size=batch)

    def expert_sum(self, x: Tensor, offset: int = 0) -> Tensor:
        """Every expert of the position's bank with unit gates and no alpha, plus the shared expert."""
        self.check_input(x, offset)
        batch, count, width = x.shape
        xt = to_position_major(x)
        rows = chunk(xt, count, axis=0) if count > 1 else (xt,)
        pieces = self.__expert_pieces(offset, count)
        outputs = []
        for p in range(count):
            xp = reshape(rows[p], (batch, width))
            bank = p if self.config.expert_scope == "pertoken" else 0
            total = None
            for w_up, w_gate, w_down in pieces[bank * self.bank_experts:(bank + 1) * self.bank_experts]:
                y = swiglu_core(xp, w_up, w_gate, w_down)
                total = y if total is None else total + y
            outputs.append(reshape(total, (1, batch, width)))
        out = concat(outputs, axis=0)
        if self.shared is not None:
            out = out + swiglu_core(
                xt,
                position_slice(self.shared.w_up, offset, count),
                position_slice(self.shared.w_gate, offset, count),
                position_slice(self.shared.w_down, offset, count)
            )
        return to_batch_major(out)

    def expert_parameter_count(self) -> tuple:
        """(total, activated) expert weights, shared expert included, router excluded."""
        per_expert = 3 * self.width * self.hidden
        total = self.banks * self.bank_experts * per_expert
        activated = self.positions * self.config.routed_active * per_expert
        if self.shared is not None:
            total += self.positions * per_expert
            activated += self.positions * per_expert
        return total, activated

    def parameter_count(self) -> tuple:
        total, activated = self.expert_parameter_count()
        return total + self.router.size, activated + self.router.size


def split_dense(dense: PerTokenSwiGLU, experts: int, active: int, shared: bool = True, alpha: Union[str, float] = "auto") -> SpMoe:
    """Split a per-token SwiGLU's hidden width into `experts` contiguous slabs.

    Slab j takes columns j*h..(j+1)*h of the up and gate weights and the matching rows
    of the down weight. With a shared expert, slab 0 becomes the shared expert. The
    router starts at zero, so the initial gates are uniform over the selected experts.

    Raises
    ------
    ExpertSplitError if the hidden width is not divisible by `experts`.
    """
    if dense.hidden % experts != 0:
        raise ExpertSplitError(f"Hidden width {dense.hidden} cannot be split into {experts} experts.")
    config = MoeConfig(enabled=True, experts=experts, active=active, shared=shared, alpha=alpha)
    moe = SpMoe(
        dense.positions, dense.width, dense.hidden // dense.width, config,
        rng=np.random.default_rng(0), dtype=dense.w_up.dtype
    )
    hidden = moe.hidden
    slabs = [slice(j * hidden, (j + 1) * hidden) for j in range(experts)]
    routed_slabs = slabs[1:] if shared else slabs
    if shared:
        moe.shared.w_up.data[...] = dense.w_up.data[:, :, slabs[0]]
        moe.shared.w_gate.data[...] = dense.w_gate.data[:, :, slabs[0]]
        moe.shared.w_down.data[...] = dense.w_down.data[:, slabs[0], :]
    for e, slab in enumerate(routed_slabs):
        moe.routed.w_up.data[:, e] = dense.w_up.data[:, :, slab]
        moe.routed.w_gate.data[:, e] = dense.w_gate.data[:, :, slab]
        moe.routed.w_down.data[:, e] = dense.w_down.data[:, slab, :]
    moe.router.data[...] = 0.0
    return moe
