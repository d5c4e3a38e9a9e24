import copy
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from src.model.block import (
    BlockParams, MixConfig, ModelConfig, RankMixerParams, block_forward,
    make_token_net, rankmixer_block_forward
)
from src.model.moe import MoeConfig, SpMoe
from src.model.tensor import Tensor, bce_with_logits, matmul, reshape, scale
from src.model.tokenizer import FeatureSpec, Tokenizer, mean_pool


@dataclass
class ModelOutput:
    """Final logits, aux logits by layer and the layer outputs X_0..X_L."""
    logits: Tensor
    aux_logits: dict = field(default_factory=dict)
    layers: list = field(default_factory=list)


class LinearHead:
    """Pooled representation -> one logit, with a scalar bias."""
    def __init__(self, width: int, rng: np.random.Generator, dtype: type) -> None:
        self.weight = Tensor(rng.standard_normal((width, 1)) / np.sqrt(width), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)

    def __call__(self, pooled: Tensor) -> Tensor:
        out = matmul(pooled, self.weight) + self.bias
        return reshape(out, (pooled.shape[0],))

    def parameters(self) -> list:
        return [self.weight, self.bias]


class TokenMixerModel:
    """Tokenizer, L mixing blocks with interval residuals, task head and aux heads."""
    def __init__(
            self,
            features: Sequence[FeatureSpec],
            config: ModelConfig,
            moe: MoeConfig = MoeConfig(),
            seed: int = 0,
            dtype: type = np.float64
            ) -> None:
        """Build and initialize every parameter from one seed.

        Raises
        ------
        ModelConfigError / MixConfigError / MoeException for an inconsistent configuration.
        """
        rng = np.random.default_rng(seed)
        self.config = config
        self.moe = moe
        self.dtype = dtype
        self.tokenizer = Tokenizer(
            features, config.dim, rng, dtype, global_token=config.global_token, layers=config.tokenizer_layers
        )
        tokens = self.tokenizer.tokens
        config.validate(tokens)
        if moe.enabled:
            moe.validate()

        self.blocks = []
        self.layer_shapes = [(tokens, config.dim)]
        if config.block_type == "tokenmixer_large":
            for _ in range(config.layers):
                self.blocks.append(BlockParams.initialize(tokens, config, moe, rng, dtype))
                self.layer_shapes.append((tokens, config.dim))
        else:
            heads = config.rankmixer_head_count(tokens)
            layer_tokens, width = tokens, config.dim
            for _ in range(config.layers):
                mix_config = MixConfig(heads, config.mix_strategy, config.mix_seed)
                out_width = mix_config.width(layer_tokens, width)
                out_tokens = mix_config.positions(layer_tokens)
                net = make_token_net("mixing", out_tokens, out_width, config, moe, rng, dtype)
                gamma = Tensor(np.ones(out_width, dtype=dtype), requires_grad=True)
                self.blocks.append(RankMixerParams(net, gamma, config.residual, config.rms_eps, mix_config))
                layer_tokens, width = out_tokens, out_width
                self.layer_shapes.append((layer_tokens, width))

        self.junctions = config.junctions()
        self.head = LinearHead(self.layer_shapes[-1][1], rng, dtype)
        self.aux_heads = {
            layer: LinearHead(self.layer_shapes[layer][1], rng, dtype) for layer in config.resolved_aux_layers()
        }

    @property
    def tokens(self) -> int:
        return self.tokenizer.tokens

    def block_step(self, layer: int, x: Tensor) -> Tensor:
        """Layer `layer` (1-based) without interval residuals."""
        params = self.blocks[layer - 1]
        if isinstance(params, RankMixerParams):
            return rankmixer_block_forward(x, params)
        return block_forward(x, params, self.config.mix_config)

    def forward_tokens(self, x: Tensor) -> ModelOutput:
        """Run the stack on a (B, T, D) token matrix."""
        targets = {target: source for source, target in self.junctions}
        states = [x]
        for layer in range(1, len(self.blocks) + 1):
            y = self.block_step(layer, states[-1])
            if layer in targets:
                y = y + states[targets[layer]]
            states.append(y)
        aux_logits = {
            layer: self.aux_logits(layer, mean_pool(states[layer])) for layer in self.aux_heads
        }
        return ModelOutput(logits=self.head(mean_pool(states[-1])), aux_logits=aux_logits, layers=states)

    def aux_logits(self, layer: int, pooled: Tensor) -> Tensor:
        """Aux head of `layer` on a pooled representation (detached if so configured)."""
        if self.config.aux_detached:
            pooled = pooled.detach()
        return self.aux_heads[layer](pooled)

    def forward(self, ids: np.ndarray) -> ModelOutput:
        """Feature ids (B, F) to logits."""
        return self.forward_tokens(self.tokenizer.forward(ids))

    def loss(self, output: ModelOutput, labels: np.ndarray) -> Tensor:
        """BCE(final) + lambda * sum of BCE(aux)."""
        labels = np.asarray(labels, dtype=self.dtype)
        total = bce_with_logits(output.logits, labels)
        for layer in sorted(output.aux_logits):
            total = total + scale(bce_with_logits(output.aux_logits[layer], labels), self.config.aux_weight)
        return total

    def token_nets(self) -> list:
        nets = []
        for params in self.blocks:
            if isinstance(params, RankMixerParams):
                nets.append(params.net)
            else:
                nets.extend([params.mixing_net, params.reverting_net])
        return nets

    def moe_layers(self) -> list:
        """Every S-P MoE stage of the stack in layer order."""
        return [net for net in self.token_nets() if isinstance(net, SpMoe)]

    def clone(self) -> "TokenMixerModel":
        """A deep copy of the model; the copy starts without the original's routing logs."""
        memo = {id(net.routing_log): None for net in self.moe_layers() if net.routing_log is not None}
        return copy.deepcopy(self, memo)

    def named_parameters(self) -> dict:
        """Stable parameter names, used by checkpoints."""
        named = {f"tokenizer.table.{name}": table for name, table in self.tokenizer.tables.items()}
        for g, projection in enumerate(self.tokenizer.group_projections):
            named.update({f"tokenizer.group{g}.{i}": w for i, w in enumerate(projection)})
        named.update({f"tokenizer.global.{i}": w for i, w in enumerate(self.tokenizer.global_projection)})
        for layer, params in enumerate(self.blocks, start=1):
            if isinstance(params, RankMixerParams):
                named.update({f"block{layer}.net.{i}": p for i, p in enumerate(params.net.parameters())})
                named[f"block{layer}.gamma"] = params.gamma
            else:
                named.update({f"block{layer}.mixing.{i}": p for i, p in enumerate(params.mixing_net.parameters())})
                named.update({f"block{layer}.reverting.{i}": p for i, p in enumerate(params.reverting_net.parameters())})
                named.update({f"block{layer}.gamma.{site}": g for site, g in params.gammas.items()})
        named["head.weight"], named["head.bias"] = self.head.weight, self.head.bias
        for layer, head in self.aux_heads.items():
            named[f"aux{layer}.weight"], named[f"aux{layer}.bias"] = head.weight, head.bias
        return named

    def embedding_parameters(self) -> list:
        return self.tokenizer.embedding_parameters()

    def dense_parameters(self) -> list:
        embeddings = {id(p) for p in self.embedding_parameters()}
        return [p for p in self.named_parameters().values() if id(p) not in embeddings]

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def parameter_count(self) -> tuple:
        """(total, activated) dense parameters; embedding tables are excluded."""
        total = sum(p.size for p in self.dense_parameters())
        inactive = 0
        for net in self.token_nets():
            net_total, net_activated = net.parameter_count()
            inactive += net_total - net_activated
        return total, total - inactive


def model_forward(x: Tensor, model: TokenMixerModel) -> tuple:
    """(final logits, aux logits in layer order) for a (B, T, D) token matrix."""
    output = model.forward_tokens(x)
    return output.logits, [output.aux_logits[layer] for layer in sorted(output.aux_logits)]
