import functools
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from src.model.feedforward import TOKEN_NETS, TokenNet
from src.model.moe import MoeConfig, SpMoe
from src.model.tensor import Tensor, gather, reshape, rmsnorm


class BlockException(Exception):
    """Base class for Exceptions of the mixing blocks"""
    def __init__(self, message: str):
        """Base class for Exceptions of the mixing blocks"""
        super().__init__(message)

class MixConfigError(BlockException):
    """The mixing layout does not fit the token matrix."""

class ModelConfigError(BlockException):
    """The layer stack configuration is inconsistent."""


MIX_STRATEGIES = ("vertical", "diagonal", "random", "half_tokens", "none")
NORM_PLACEMENTS = ("pre", "post", "sandwich")
BLOCK_TYPES = ("tokenmixer_large", "rankmixer")


@functools.lru_cache(maxsize=256)
def chunk_plan(tokens: int, heads: int, strategy: str, seed: int = 0) -> np.ndarray:
    """Source chunk of every (position, slot) pair as a flat index t*H + c.

    Row h lists, slot by slot, the chunks gathered into mixed position h. For the
    vertical, diagonal and random strategies slot t of every position holds a chunk
    of token t. The returned array must not be modified.
    """
    plan = np.empty((heads, tokens), dtype=np.int64)
    if strategy == "vertical":
        for h in range(heads):
            plan[h] = np.arange(tokens) * heads + h
    elif strategy == "diagonal":
        for h in range(heads):
            plan[h] = np.arange(tokens) * heads + (np.arange(tokens) + h) % heads
    elif strategy == "random":
        rng = np.random.default_rng(seed)
        permutations = np.stack([rng.permutation(heads) for _ in range(tokens)])
        for h in range(heads):
            plan[h] = np.arange(tokens) * heads + permutations[:, h]
    elif strategy == "half_tokens":
        half_heads, half_tokens = heads // 2, tokens // 2
        for h in range(heads):
            first = 0 if h < half_heads else half_tokens
            column = h % half_heads
            for slot in range(tokens):
                t = first + slot // 2
                plan[h, slot] = t * heads + column + (slot % 2) * half_heads
    else:
        raise MixConfigError(f"Strategy '{strategy}' has no chunk plan.")
    plan.setflags(write=False)
    return plan


@dataclass(frozen=True)
class MixConfig:
    """How T tokens of width D are rearranged into H positions."""
    heads: int
    strategy: str = "vertical"
    seed: int = 0

    def validate(self, tokens: int, dim: int) -> None:
        """Raise MixConfigError if the strategy cannot mix a (T, D) matrix."""
        if self.strategy not in MIX_STRATEGIES:
            raise MixConfigError(f"Unknown mix strategy '{self.strategy}', expected one of {MIX_STRATEGIES}.")
        if self.strategy == "none":
            return
        if self.heads < 1 or dim % self.heads != 0:
            raise MixConfigError(f"D={dim} is not divisible by H={self.heads}.")
        if self.strategy == "half_tokens" and (tokens % 2 or self.heads % 2):
            raise MixConfigError(f"half_tokens mixing needs even T and H, got T={tokens}, H={self.heads}.")

    def positions(self, tokens: int) -> int:
        """P: positions after mixing."""
        return tokens if self.strategy == "none" else self.heads

    def width(self, tokens: int, dim: int) -> int:
        """Width of a mixed position."""
        return dim if self.strategy == "none" else tokens * dim // self.heads

    def plan(self, tokens: int) -> np.ndarray:
        return chunk_plan(tokens, self.heads, self.strategy, self.seed)


def mix(x: Tensor, config: MixConfig) -> Tensor:
    """(B, T, D) -> (B, H, T*D/H): position h concatenates one D/H chunk of every token.

    A pure rearrangement of scalars; with strategy "none" the input is returned.
    """
    batch, tokens, dim = x.shape
    config.validate(tokens, dim)
    if config.strategy == "none":
        return x
    piece = dim // config.heads
    chunks = reshape(x, (batch, tokens * config.heads, piece))
    mixed = gather(chunks, config.plan(tokens).ravel(), axis=1)
    return reshape(mixed, (batch, config.heads, tokens * piece))


def revert(h: Tensor, config: MixConfig, tokens: int) -> Tensor:
    """Exact inverse of `mix`: (B, H, T*D/H) -> (B, T, D)."""
    batch, heads, width = h.shape
    if config.strategy == "none":
        return h
    if heads != config.heads or width % tokens != 0:
        raise MixConfigError(f"Cannot revert shape {h.shape} to {tokens} tokens with H={config.heads}.")
    piece = width // tokens
    config.validate(tokens, piece * heads)
    inverse = np.argsort(config.plan(tokens).ravel())
    chunks = reshape(h, (batch, heads * tokens, piece))
    return reshape(gather(chunks, inverse, axis=1), (batch, tokens, piece * heads))


@dataclass(frozen=True)
class ModelConfig:
    """Shape and wiring of the L-layer stack."""
    dim: int = 64
    heads: int = 8
    expansion: int = 2
    layers: int = 4
    interval: int = 2
    interval_residuals: bool = True
    aux_weight: float = 0.1
    aux_layers: Optional[tuple] = None
    aux_detached: bool = False
    norm: str = "pre"
    mix_strategy: str = "vertical"
    mix_seed: int = 0
    global_token: bool = True
    residual: bool = True
    token_net: str = "pertoken_swiglu"
    block_type: str = "tokenmixer_large"
    rankmixer_heads: Union[str, int] = "tokens"
    init_scales: tuple = (1.0, 1.0, 0.01)
    tokenizer_layers: int = 1
    rms_eps: float = 1e-6

    @property
    def mix_config(self) -> MixConfig:
        return MixConfig(heads=self.heads, strategy=self.mix_strategy, seed=self.mix_seed)

    def junctions(self) -> list:
        """Interval residual (source, target) pairs: X_target += X_source.

        Sources are 0, k, 2k, ... and a junction is kept only if its target lies
        strictly below the final layer L.
        """
        if not self.interval_residuals:
            return []
        pairs = []
        source = 0
        while source + self.interval < self.layers:
            pairs.append((source, source + self.interval))
            source += self.interval
        return pairs

    def resolved_aux_layers(self) -> tuple:
        """Aux head sites: the configured list, by default every junction target."""
        if self.aux_layers is not None:
            return tuple(self.aux_layers)
        return tuple(target for _, target in self.junctions())

    def rankmixer_head_count(self, tokens: int) -> int:
        if self.rankmixer_heads == "tokens":
            return tokens
        if self.rankmixer_heads == "half_tokens":
            return max(tokens // 2, 1)
        return int(self.rankmixer_heads)

    def validate(self, tokens: int) -> None:
        """Raise ModelConfigError / MixConfigError for an inconsistent stack."""
        if self.layers < 1:
            raise ModelConfigError(f"At least one layer is required, got {self.layers}.")
        if self.interval < 2:
            raise ModelConfigError(f"Interval residual spacing must be >= 2, got {self.interval}.")
        if self.aux_weight < 0:
            raise ModelConfigError(f"Aux loss weight must be >= 0, got {self.aux_weight}.")
        for layer in self.resolved_aux_layers():
            if not 1 <= layer < self.layers:
                raise ModelConfigError(f"Aux head at layer {layer} is not allowed; sites must lie in [1, {self.layers - 1}].")
        if self.norm not in NORM_PLACEMENTS:
            raise ModelConfigError(f"Unknown norm placement '{self.norm}', expected one of {NORM_PLACEMENTS}.")
        if self.token_net not in TOKEN_NETS:
            raise ModelConfigError(f"Unknown token net '{self.token_net}', expected one of {tuple(TOKEN_NETS)}.")
        if self.block_type not in BLOCK_TYPES:
            raise ModelConfigError(f"Unknown block type '{self.block_type}', expected one of {BLOCK_TYPES}.")
        if len(self.init_scales) != 3:
            raise ModelConfigError(f"init_scales needs one value per up, gate and down, got {self.init_scales}.")
        if self.block_type == "rankmixer":
            heads = self.rankmixer_head_count(tokens)
            MixConfig(heads, self.mix_strategy, self.mix_seed).validate(tokens, self.dim)
            width = tokens * self.dim // heads
            if self.layers > 1:
                MixConfig(heads, self.mix_strategy, self.mix_seed).validate(heads, width)
            if self.junctions() and (heads != tokens or width != self.dim):
                raise ModelConfigError("Interval residuals need equal layer shapes; use RankMixer heads = tokens or disable them.")
        else:
            self.mix_config.validate(tokens, self.dim)


def make_token_net(
        stage: str,
        positions: int,
        width: int,
        config: ModelConfig,
        moe: MoeConfig,
        rng: np.random.Generator,
        dtype: type
        ) -> TokenNet:
    """The per-position network of a stage: an S-P MoE if enabled for it, else the configured net."""
    if moe.enabled and stage in moe.stages:
        return SpMoe(positions, width, config.expansion, moe, rng, dtype, init_scales=config.init_scales)
    return TOKEN_NETS[config.token_net](positions, width, config.expansion, rng, dtype, init_scales=config.init_scales)


def _norm_sites(norm: str, stages: tuple) -> list:
    if norm == "sandwich":
        return [f"{stage}_{side}" for stage in stages for side in ("in", "out")]
    return list(stages)


@dataclass
class BlockParams:
    """Weights of one TokenMixer-Large block.

    `gammas` holds one RMSNorm gain per norm site, shared across the positions of
    its stage: "mixing"/"reverting" for pre and post placement, "<stage>_in" and
    "<stage>_out" for sandwich placement.
    """
    mixing_net: TokenNet
    reverting_net: TokenNet
    gammas: dict
    norm: str = "pre"
    residual: bool = True
    eps: float = 1e-6

    @classmethod
    def initialize(
            cls,
            tokens: int,
            config: ModelConfig,
            moe: MoeConfig,
            rng: np.random.Generator,
            dtype: type = np.float64
            ) -> "BlockParams":
        mix_config = config.mix_config
        positions, width = mix_config.positions(tokens), mix_config.width(tokens, config.dim)
        mixing_net = make_token_net("mixing", positions, width, config, moe, rng, dtype)
        reverting_net = make_token_net("reverting", tokens, config.dim, config, moe, rng, dtype)
        widths = {"mixing": width, "reverting": config.dim}
        gammas = {
            site: Tensor(np.ones(widths[site.split("_")[0]], dtype=dtype), requires_grad=True)
            for site in _norm_sites(config.norm, ("mixing", "reverting"))
        }
        return cls(mixing_net, reverting_net, gammas, config.norm, config.residual, config.rms_eps)

    def parameters(self) -> list:
        return self.mixing_net.parameters() + self.reverting_net.parameters() + list(self.gammas.values())


def residual_unit(x: Tensor, f: Callable[[Tensor], Tensor], params, site: str, residual: Optional[Tensor] = None) -> Tensor:
    """One network application with the configured norm placement.

    pre:      residual + f(norm(x))
    post:     norm(f(x) + residual)
    sandwich: norm_out(residual + f(norm_in(x)))
    `residual` defaults to x; with residuals disabled the additive term is dropped.
    """
    skip = x if residual is None else residual
    gammas, eps = params.gammas, params.eps
    if params.norm == "pre":
        out = f(rmsnorm(x, gammas[site], eps))
        return skip + out if params.residual else out
    if params.norm == "post":
        out = f(x)
        return rmsnorm(out + skip if params.residual else out, gammas[site], eps)
    out = f(rmsnorm(x, gammas[f"{site}_in"], eps))
    return rmsnorm(skip + out if params.residual else out, gammas[f"{site}_out"], eps)


def mixing_stage(m: Tensor, params: BlockParams, offset: int = 0) -> Tensor:
    """H' from the mixed tokens M (any contiguous run of positions starting at offset)."""
    return residual_unit(m, lambda z: params.mixing_net.forward(z, offset), params, "mixing")


def reverting_stage(r: Tensor, x: Tensor, params: BlockParams, offset: int = 0) -> Tensor:
    """X_next from the reverted tokens, with the block's original input X as residual."""
    return residual_unit(r, lambda z: params.reverting_net.forward(z, offset), params, "reverting", residual=x)


def block_forward(x: Tensor, params: BlockParams, config: MixConfig) -> Tensor:
    """One TokenMixer-Large block: (B, T, D) -> (B, T, D).

    M = mix(X); H' = stage1(M); X_next = stage2(revert(H'), X).
    """
    tokens = x.shape[1]
    hidden = mixing_stage(mix(x, config), params)
    return reverting_stage(revert(hidden, config, tokens), x, params)


@dataclass
class RankMixerParams:
    """Weights of one RankMixer block: a per-position net and the output norm gain."""
    net: TokenNet
    gamma: Tensor
    residual: bool = True
    eps: float = 1e-6
    mix_config: MixConfig = field(default_factory=lambda: MixConfig(heads=1))

    def parameters(self) -> list:
        return self.net.parameters() + [self.gamma]


def rankmixer_block_forward(x: Tensor, params: RankMixerParams) -> Tensor:
    """Norm(pSwiGLU(mix(X)) + mix(X)): (B, T, D) -> (B, H, T*D/H), no reverting stage."""
    mixed = mix(x, params.mix_config)
    out = params.net.forward(mixed)
    if params.residual:
        out = out + mixed
    return rmsnorm(out, params.gamma, params.eps)
