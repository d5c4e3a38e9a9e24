import logging
import threading
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from contextvars import copy_context
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from opentelemetry.metrics._internal.instrument import Histogram

from src.model.block import BlockParams, MixConfig, mix, mixing_stage, revert, reverting_stage
from src.model.tensor import Tensor, add, chunk, concat, gather, reduce_sum, reshape, scale, transpose
from src.model.tokenizer import mean_pool
from src.model.tokenmixer import ModelOutput, TokenMixerModel


class ParallelException(Exception):
    """Base class for Exceptions of the token parallel simulator"""
    def __init__(self, message: str):
        """Base class for Exceptions of the token parallel simulator"""
        super().__init__(message)

class ShardingError(ParallelException):
    """An axis cannot be split evenly across the devices."""

class LayoutError(ParallelException):
    """A tensor arrives in a layout the step cannot consume."""


PARALLEL_STRATEGIES = ("vertical", "diagonal", "random")


@dataclass
class ShardedTensor:
    """A global tensor held as one slice per logical device along `shard_dim`.

    `layout` names the logical axis that is sharded ("batch", "head" or "token").
    """
    global_shape: tuple
    shard_dim: int
    slices: list
    layout: str = "batch"

    @property
    def devices(self) -> int:
        return len(self.slices)

    @classmethod
    def shard(cls, x: Tensor, dim: int, devices: int, layout: str = "batch") -> "ShardedTensor":
        """Split `x` into `devices` equal slices along `dim`.

        Raises
        ------
        ShardingError if the extent of `dim` is not divisible by `devices`.
        """
        if x.shape[dim] % devices != 0:
            raise ShardingError(f"Axis {dim} of extent {x.shape[dim]} cannot be split across {devices} devices.")
        slices = list(chunk(x, devices, axis=dim)) if devices > 1 else [x]
        return cls(tuple(x.shape), dim, slices, layout)

    def unshard(self) -> Tensor:
        """Concatenate the slices back into the global tensor."""
        return concat(self.slices, axis=self.shard_dim)


@dataclass(frozen=True)
class CommEvent:
    """One simulated collective."""
    step: str
    kind: str
    bytes_moved: int
    source: str
    destination: str


@dataclass
class CommLog:
    """Ordered record of the collectives of a simulated run."""
    events: list = field(default_factory=list)

    def append(self, event: CommEvent) -> None:
        self.events.append(event)

    @property
    def all2all_count(self) -> int:
        return sum(1 for event in self.events if event.kind == "all2all")

    @property
    def all2all_bytes(self) -> int:
        return sum(event.bytes_moved for event in self.events if event.kind == "all2all")

    def to_records(self) -> list:
        """The events as plain dicts, one per line of the structured log."""
        return [
            {"step": e.step, "kind": e.kind, "bytes": e.bytes_moved, "source": e.source, "destination": e.destination}
            for e in self.events
        ]


@dataclass
class ParallelResult:
    """Outcome of a simulated token-parallel forward pass."""
    output: ShardedTensor
    logits: Tensor
    aux_logits: dict
    log: CommLog
    states: list = field(default_factory=list)

    def to_model_output(self) -> ModelOutput:
        return ModelOutput(logits=self.logits, aux_logits=self.aux_logits, layers=[s.unshard() for s in self.states])


class TokenParallelSimulator:
    """Runs TokenMixer-Large blocks over N logical devices with explicit all-to-all exchanges.

    Per-position weights are partitioned: in the mixing stage device j owns heads
    j*H/N..(j+1)*H/N, in the reverting stage tokens j*T/N..(j+1)*T/N. Devices run
    in round-robin order, or on one thread each per phase; results are identical.
    """
    def __init__(
            self,
            devices: int,
            threads: bool = False,
            log: Optional[CommLog] = None,
            histogram: Optional[Histogram] = None
            ) -> None:
        """
        Parameters
        ----------
        devices: the number of logical devices N.
        threads: evaluate every phase with one thread per device.
        log: the communication log to append to; a new one by default.
        histogram: optional histogram receiving the bytes of every all-to-all.
        """
        if devices < 1:
            raise ShardingError(f"At least one device is required, got {devices}.")
        self.devices = devices
        self.threads = threads
        self.log = log if log is not None else CommLog()
        self.histogram = histogram
        self.__lock = threading.Lock()

    def record_to_histogram(self, amount: int, attributes=None) -> None:
        """ Records the telemetry data to the histogram attribute.

        Parameters
        ----------
        amount: the amount of the measurement.
        attributes: metadata of the measurement.
        """
        if self.histogram is not None:
            try:
                self.histogram.record(amount=amount, attributes=attributes)
            except Exception as e:
                logging.error(f"Error during recording histogram: {e}")

    def __run_devices(self, step: Callable[[int], object]) -> list:
        if not self.threads or self.devices == 1:
            return [step(device) for device in range(self.devices)]
        with ThreadPoolExecutor(max_workers=self.devices) as pool:
            futures = [pool.submit(copy_context().run, step, device) for device in range(self.devices)]
            return [future.result() for future in futures]

    def __log(self, event: CommEvent) -> None:
        with self.__lock:
            self.log.append(event)
        if event.kind == "all2all":
            self.record_to_histogram(event.bytes_moved, attributes={"tokenmixer.parallel.step": event.step})

    def all2all(self, x: ShardedTensor, new_dim: int, step: str = "all2all", layout: Optional[str] = None) -> ShardedTensor:
        """Re-shard so every device holds the full old shard axis and 1/N of `new_dim`.

        Device j receives piece j of every device's slice, concatenated in device
        order along the old shard axis. Logs one event moving (N-1)/N of the bytes.

        Raises
        ------
        ShardingError if the global extent of `new_dim` is not divisible by N.
        """
        n = x.devices
        if x.global_shape[new_dim] % n != 0:
            raise ShardingError(
                f"{step}: axis {new_dim} of extent {x.global_shape[new_dim]} cannot be split across {n} devices."
            )
        total_bytes = int(np.prod(x.global_shape)) * x.slices[0].data.itemsize
        destination = layout if layout is not None else f"dim{new_dim}"
        self.__log(CommEvent(step, "all2all", total_bytes * (n - 1) // n, x.layout, destination))
        if n == 1:
            return ShardedTensor(x.global_shape, new_dim, list(x.slices), destination)
        pieces = [chunk(part, n, axis=new_dim) for part in x.slices]
        slices = self.__run_devices(lambda j: concat([pieces[i][j] for i in range(n)], axis=x.shard_dim))
        return ShardedTensor(x.global_shape, new_dim, slices, destination)

    def all_reduce_sum(self, parts: list, step: str) -> Tensor:
        """Sum of per-device partials, replicated; logged as its own event kind."""
        total_bytes = parts[0].size * parts[0].data.itemsize
        self.__log(CommEvent(step, "all_reduce", 2 * total_bytes * (self.devices - 1) // self.devices, "partial", "replicated"))
        total = parts[0]
        for part in parts[1:]:
            total = add(total, part)
        return total

    def check(self, tokens: int, config: MixConfig, batch: int) -> None:
        """Raise LayoutError / ShardingError if a block cannot run on this grid."""
        if config.strategy not in PARALLEL_STRATEGIES:
            raise LayoutError(f"Token parallel execution needs a per-token chunk plan; '{config.strategy}' has none.")
        for name, extent in (("H", config.heads), ("T", tokens), ("B", batch)):
            if extent % self.devices != 0:
                raise ShardingError(f"{name}={extent} is not divisible by N={self.devices}.")

    def __partial_mix(self, x: Tensor, device: int, config: MixConfig, tokens: int) -> Tensor:
        """Chunks of the locally owned tokens in mixed order: (B, H, T/N, D/H)."""
        batch, local, dim = x.shape
        heads, piece = config.heads, dim // config.heads
        chunk_of = config.plan(tokens) % heads
        first = device * local
        index = [t * heads + chunk_of[h, first + t] for h in range(heads) for t in range(local)]
        gathered = gather(reshape(x, (batch, local * heads, piece)), np.array(index), axis=1)
        return reshape(gathered, (batch, heads, local, piece))

    def __local_revert(self, r: Tensor, device: int, config: MixConfig, tokens: int) -> Tensor:
        """(B, H, T/N, D/H) position-ordered chunks -> (B, T/N, D) tokens in chunk order."""
        batch, heads, local, piece = r.shape
        chunk_of = config.plan(tokens) % heads
        first = device * local
        index = []
        for t in range(local):
            source_head = np.argsort(chunk_of[:, first + t])
            index.extend(t * heads + source_head)
        per_token = reshape(transpose(r, (0, 2, 1, 3)), (batch, local * heads, piece))
        return reshape(gather(per_token, np.array(index), axis=1), (batch, local, heads * piece))

    def block_forward(self, x: ShardedTensor, params: BlockParams, config: MixConfig, layer: int = 1) -> tuple:
        """One block with two all-to-all exchanges.

        Returns
        -------
        (output sharded on tokens, block input sharded on tokens)

        Raises
        ------
        LayoutError if x is not sharded on batch or tokens.
        """
        batch, tokens, dim = x.global_shape
        self.check(tokens, config, batch)
        n, heads = self.devices, config.heads
        piece, width = dim // heads, tokens * dim // heads
        local_heads, local_tokens = heads // n, tokens // n

        if x.layout == "batch":
            mixed = self.__run_devices(lambda i: mix(x.slices[i], config))
            m = self.all2all(ShardedTensor((batch, heads, width), 0, mixed, "batch"), 1, f"block{layer}.mix", "head")
        elif x.layout == "token":
            partial = self.__run_devices(lambda i: self.__partial_mix(x.slices[i], i, config, tokens))
            exchanged = self.all2all(
                ShardedTensor((batch, heads, tokens, piece), 2, partial, "token"), 1, f"block{layer}.mix", "head"
            )
            m = ShardedTensor(
                (batch, heads, width), 1,
                [reshape(s, (batch, local_heads, width)) for s in exchanged.slices], "head"
            )
        else:
            raise LayoutError(f"Block input must be sharded on batch or tokens, got '{x.layout}'.")

        hidden = self.__run_devices(lambda j: mixing_stage(m.slices[j], params, offset=j * local_heads))

        def payload(j: int) -> Tensor:
            h = reshape(hidden[j], (1, batch, local_heads, tokens, piece))
            if x.layout == "batch":
                # the mixed input rides along to give the residual its token layout
                return concat([h, reshape(m.slices[j], (1, batch, local_heads, tokens, piece))], axis=0)
            return h

        parts = self.__run_devices(payload)
        stacked = parts[0].shape[0]
        exchanged = self.all2all(
            ShardedTensor((stacked, batch, heads, tokens, piece), 2, parts, "head"), 3, f"block{layer}.revert", "token"
        )

        def revert_stage(k: int) -> tuple:
            received = exchanged.slices[k]
            views = chunk(received, stacked, axis=0) if stacked > 1 else (received,)
            views = [reshape(v, (batch, heads, local_tokens, piece)) for v in views]
            r = self.__local_revert(views[0], k, config, tokens)
            residual = self.__local_revert(views[1], k, config, tokens) if x.layout == "batch" else x.slices[k]
            return reverting_stage(r, residual, params, offset=k * local_tokens), residual

        results = self.__run_devices(revert_stage)
        output = ShardedTensor((batch, tokens, dim), 1, [out for out, _ in results], "token")
        block_input = ShardedTensor((batch, tokens, dim), 1, [res for _, res in results], "token")
        return output, block_input

    def naive_block_forward(self, x: ShardedTensor, params: BlockParams, config: MixConfig, layer: int = 1) -> ShardedTensor:
        """One block re-sharding before and after each per-position stage: four exchanges, batch layout in and out."""
        if x.layout != "batch":
            raise LayoutError(f"Naive plan expects batch sharding, got '{x.layout}'.")
        batch, tokens, dim = x.global_shape
        self.check(tokens, config, batch)
        n, heads = self.devices, config.heads
        width, local_batch = tokens * dim // heads, batch // n

        mixed = self.__run_devices(lambda i: mix(x.slices[i], config))
        m = self.all2all(ShardedTensor((batch, heads, width), 0, mixed, "batch"), 1, f"block{layer}.mix.scatter", "head")
        hidden = self.__run_devices(lambda j: mixing_stage(m.slices[j], params, offset=j * (heads // n)))
        h = self.all2all(ShardedTensor((batch, heads, width), 1, hidden, "head"), 0, f"block{layer}.mix.gather", "batch")

        def stack(i: int) -> Tensor:
            r = revert(h.slices[i], config, tokens)
            return concat([reshape(r, (1, local_batch, tokens, dim)), reshape(x.slices[i], (1, local_batch, tokens, dim))], axis=0)

        stacked = self.all2all(
            ShardedTensor((2, batch, tokens, dim), 1, self.__run_devices(stack), "batch"), 2,
            f"block{layer}.revert.scatter", "token"
        )

        def revert_stage(k: int) -> Tensor:
            r, residual = chunk(stacked.slices[k], 2, axis=0)
            local = (batch, tokens // n, dim)
            return reverting_stage(reshape(r, local), reshape(residual, local), params, offset=k * (tokens // n))

        out = self.__run_devices(revert_stage)
        return self.all2all(ShardedTensor((batch, tokens, dim), 1, out, "token"), 0, f"block{layer}.revert.gather", "batch")

    def pool(self, x: ShardedTensor, step: str) -> Tensor:
        """Mean over tokens of a sharded (B, T, W) tensor, replicated on every device."""
        if x.layout == "batch":
            return concat(self.__run_devices(lambda i: mean_pool(x.slices[i])), axis=0)
        partial = self.__run_devices(lambda i: reduce_sum(x.slices[i], axis=1))
        return scale(self.all_reduce_sum(partial, step), 1.0 / x.global_shape[1])

    def run(self, model: TokenMixerModel, x: ShardedTensor, naive: bool = False) -> ParallelResult:
        """The full stack: L parallel blocks, interval residuals, heads and the terminal restore.

        The optimized plan exchanges twice per block plus once at the end (2L+1);
        the naive plan exchanges four times per block (4L).

        Raises
        ------
        LayoutError for a non TokenMixer-Large stack or an input not sharded on batch.
        """
        if model.config.block_type != "tokenmixer_large":
            raise LayoutError("Token parallel execution supports TokenMixer-Large blocks only.")
        if x.layout != "batch":
            raise LayoutError(f"Model input must be sharded on batch, got '{x.layout}'.")
        config = model.config.mix_config
        targets = {target: source for source, target in model.junctions}

        states = [x]
        current = x
        for layer, params in enumerate(model.blocks, start=1):
            if naive:
                out = self.naive_block_forward(current, params, config, layer)
            else:
                out, block_input = self.block_forward(current, params, config, layer)
                if layer == 1:
                    states[0] = block_input
            if layer in targets:
                source = states[targets[layer]]
                out = ShardedTensor(
                    out.global_shape, out.shard_dim,
                    self.__run_devices(lambda k: add(out.slices[k], source.slices[k])), out.layout
                )
            states.append(out)
            current = out

        aux_logits = {
            layer: model.aux_logits(layer, self.pool(states[layer], f"aux{layer}.pool")) for layer in model.aux_heads
        }
        final = current if naive else self.all2all(current, 0, "final.restore", "batch")
        logits = concat(self.__run_devices(lambda i: model.head(mean_pool(final.slices[i]))), axis=0)
        return ParallelResult(output=final, logits=logits, aux_logits=aux_logits, log=self.log, states=states)


def all2all(x: ShardedTensor, new_shard_dim: int, log: Optional[CommLog] = None, step: str = "all2all") -> ShardedTensor:
    """Re-shard `x` along `new_shard_dim`, appending one event to `log`."""
    return TokenParallelSimulator(x.devices, log=log).all2all(x, new_shard_dim, step)


def parallel_block_forward(
        x: ShardedTensor,
        params: BlockParams,
        config: MixConfig,
        log: Optional[CommLog] = None,
        threads: bool = False
        ) -> ShardedTensor:
    """One block on a batch- or token-sharded input; the output stays sharded on tokens."""
    output, _ = TokenParallelSimulator(x.devices, threads=threads, log=log).block_forward(x, params, config)
    return output


def run_parallel(
        model: TokenMixerModel,
        x: ShardedTensor,
        devices: int,
        naive: bool = False,
        threads: bool = False,
        histogram: Optional[Histogram] = None
        ) -> ParallelResult:
    """Simulate the model over `devices` logical devices starting from a batch-sharded token matrix."""
    if x.devices != devices:
        x = ShardedTensor.shard(x.unshard(), 0, devices, "batch")
    return TokenParallelSimulator(devices, threads=threads, histogram=histogram).run(model, x, naive=naive)
