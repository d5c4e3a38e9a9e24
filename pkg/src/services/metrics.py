from collections.abc import Sequence

import numpy as np

from src.model.block import MixConfig, ModelConfig
from src.model.moe import MoeConfig
from src.model.tokenizer import FeatureSpec


class MetricsException(Exception):
    """Base class for Exceptions of Metrics"""
    def __init__(self, message: str):
        """Base class for Exceptions of Metrics"""
        super().__init__(message)

class MetricUndefinedError(MetricsException):
    """The metric has no value for the given input."""


def tied_rank(x: np.ndarray) -> np.ndarray:
    """1-based ranks of `x` with tied values sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    average = ends - (counts - 1) / 2.0
    return average[inverse]


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability that a random positive outranks a random negative, ties counted one half.

    Parameters
    ----------
    scores: higher means more likely positive.
    labels: binary labels of the same length.

    Raises
    ------
    MetricUndefinedError: if only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positives = np.asarray(labels).ravel() == 1
    if scores.shape != positives.shape:
        raise MetricUndefinedError(f"{scores.size} scores for {positives.size} labels.")
    num_positive = int(positives.sum())
    num_negative = positives.size - num_positive
    if num_positive == 0 or num_negative == 0:
        raise MetricUndefinedError("AUC needs at least one positive and one negative example.")
    sum_positive = tied_rank(scores)[positives].sum()
    return float((sum_positive - num_positive * (num_positive + 1) / 2.0) / (num_positive * num_negative))


def logloss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy of logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, logits) - labels * logits))


def _net_flops(kind: str, positions: int, width: int, config: ModelConfig, moe: MoeConfig, stage: str, batch: int) -> int:
    hidden = config.expansion * width
    if moe.enabled and stage in moe.stages:
        expert_hidden = hidden // moe.experts
        bank = moe.routed_experts if moe.expert_scope == "pertoken" else positions * moe.routed_experts
        active = moe.routed_active
        flops = 6 * batch * positions * active * width * expert_hidden
        if active > 0:
            flops += 2 * batch * positions * width * bank
        if moe.shared:
            flops += 6 * batch * positions * width * expert_hidden
        return flops
    if kind == "pertoken_ffn":
        return 4 * batch * positions * width * hidden
    return 6 * batch * positions * width * hidden


def flops_count(
        features: Sequence[FeatureSpec],
        config: ModelConfig,
        moe: MoeConfig,
        batch: int
        ) -> int:
    """Analytic GEMM FLOPs (2 x multiply-adds) of one forward pass over `batch` examples.

    Covers the tokenizer projections, both stages of every block (only the
    activated experts of a MoE plus its router), the task head and the aux
    heads. Norms, activations and rearrangements are not GEMMs and are not counted.
    """
    groups = sorted({f.group for f in features})
    tokens = len(groups) + (1 if config.global_token else 0)
    deep = 2 * batch * config.dim * config.dim * (config.tokenizer_layers - 1)
    flops = 0
    for group in groups:
        width = sum(f.emb_dim for f in features if f.group == group)
        flops += 2 * batch * width * config.dim + deep
    if config.global_token:
        flops += 2 * batch * sum(f.emb_dim for f in features) * config.dim + deep

    widths = [config.dim]
    if config.block_type == "tokenmixer_large":
        mix_config = config.mix_config
        positions, width = mix_config.positions(tokens), mix_config.width(tokens, config.dim)
        per_block = (
            _net_flops(config.token_net, positions, width, config, moe, "mixing", batch)
            + _net_flops(config.token_net, tokens, config.dim, config, moe, "reverting", batch)
        )
        flops += config.layers * per_block
        widths += [config.dim] * config.layers
    else:
        heads = config.rankmixer_head_count(tokens)
        layer_tokens, width = tokens, config.dim
        for _ in range(config.layers):
            mix_config = MixConfig(heads, config.mix_strategy, config.mix_seed)
            layer_tokens, width = mix_config.positions(layer_tokens), mix_config.width(layer_tokens, width)
            flops += _net_flops(config.token_net, layer_tokens, width, config, moe, "mixing", batch)
            widths.append(width)

    flops += 2 * batch * widths[-1]
    for layer in config.resolved_aux_layers():
        flops += 2 * batch * widths[layer]
    return flops
