from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from typing import Optional
import logging

import numpy as np

from src.model.block import MixConfig, ModelConfig, mix, revert
from src.model.feedforward import pswiglu
from src.model.gradcheck import grad_check, grad_check_parameters
from src.model.moe import MoeConfig
from src.model.tensor import (
    Tensor, bce_with_logits, chunk, concat, gather, matmul, reduce_mean, reduce_sum, relu,
    reshape, rmsnorm, sigmoid, softmax, swish, transpose
)
from src.model.tokenizer import FeatureSpec
from src.model.tokenmixer import TokenMixerModel

PRIMITIVE_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-4
FD_STEP = 1e-5


@dataclass
class GradCheckRow:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


@dataclass
class GradCheckReport:
    """Finite-difference checks of every primitive and of toy models."""
    rows: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows)

    def to_dict(self) -> dict:
        return {
            "rows": [dict(asdict(row), passed=row.passed) for row in self.rows],
            "passed": self.passed
        }


def _weighted(y: Tensor, seed: int = 1) -> Tensor:
    """A scalar that depends on every element of `y` differently."""
    weights = np.random.default_rng(seed).standard_normal(y.shape)
    return reduce_sum(y * Tensor(weights))


def primitive_cases(rng: np.random.Generator) -> dict:
    """name -> (scalar function, input) for every differentiable primitive."""
    other = Tensor(rng.standard_normal((3, 4)))
    right = Tensor(rng.standard_normal((4, 2)))
    gamma = Tensor(rng.standard_normal(4))
    weights = Tensor(rng.standard_normal((2, 4, 6)))
    down = Tensor(rng.standard_normal((2, 6, 4)))
    labels = (rng.random(5) > 0.5).astype(np.float64)
    # relu is checked away from its kink
    away_from_zero = rng.standard_normal((3, 4))
    away_from_zero += np.sign(away_from_zero) * 0.1
    return {
        "add": (lambda x: _weighted(x + other), Tensor(rng.standard_normal((3, 4)))),
        "mul": (lambda x: _weighted(x * other), Tensor(rng.standard_normal((3, 4)))),
        "matmul": (lambda x: _weighted(matmul(x, right)), Tensor(rng.standard_normal((3, 4)))),
        "sigmoid": (lambda x: _weighted(sigmoid(x)), Tensor(rng.standard_normal((3, 4)))),
        "swish": (lambda x: _weighted(swish(x)), Tensor(rng.standard_normal((3, 4)))),
        "relu": (lambda x: _weighted(relu(x)), Tensor(away_from_zero)),
        "softmax": (lambda x: _weighted(softmax(x, axis=-1)), Tensor(rng.standard_normal((3, 4)))),
        "rmsnorm": (lambda x: _weighted(rmsnorm(x, gamma, 1e-6)), Tensor(rng.standard_normal((3, 4)))),
        "mean": (lambda x: _weighted(reduce_mean(x, axis=1)), Tensor(rng.standard_normal((3, 4)))),
        "transpose": (lambda x: _weighted(transpose(x, (1, 0))), Tensor(rng.standard_normal((3, 4)))),
        "reshape": (lambda x: _weighted(reshape(x, (4, 3))), Tensor(rng.standard_normal((3, 4)))),
        "concat_split": (lambda x: _weighted(concat(list(reversed(chunk(x, 2, axis=1))), axis=1)),
                         Tensor(rng.standard_normal((3, 4)))),
        "gather": (lambda x: _weighted(gather(x, np.array([2, 0, 2, 1]), axis=0)), Tensor(rng.standard_normal((3, 4)))),
        "bce_with_logits": (lambda x: bce_with_logits(x, labels), Tensor(rng.standard_normal(5))),
        "pswiglu": (lambda x: _weighted(pswiglu(x, weights, Tensor(weights.data[::-1].copy()), down)),
                    Tensor(rng.standard_normal((3, 2, 4)))),
        "mix_revert": (lambda x: _weighted(revert(swish(mix(x, MixConfig(2))), MixConfig(2), 3)),
                       Tensor(rng.standard_normal((2, 3, 4)))),
    }


def toy_features() -> list:
    return [FeatureSpec(name=f"f{g}", cardinality=5, emb_dim=3, group=g) for g in range(3)]


def toy_model(moe: MoeConfig = MoeConfig(), seed: int = 0) -> TokenMixerModel:
    """A 64-bit three-layer TokenMixer-Large small enough for coordinate-wise differences."""
    config = ModelConfig(dim=4, heads=2, expansion=2, layers=3, interval=2, init_scales=(1.0, 1.0, 1.0))
    return TokenMixerModel(toy_features(), config, moe, seed=seed, dtype=np.float64)


def toy_batch(seed: int = 0) -> tuple:
    ids = np.random.default_rng(seed).integers(0, 5, size=(6, 3))
    return ids, np.array([0, 1, 1, 0, 1, 0])


def toy_routing_margin(moe: MoeConfig, seed: int = 0) -> float:
    """Smallest gap between the last selected and the first rejected router score on the toy batch.

    A finite-difference step below this gap cannot flip an expert selection.
    """
    model = toy_model(moe, seed)
    logs = [net.start_routing_log() for net in model.moe_layers()]
    model.forward(toy_batch(seed)[0])
    return min((log.min_margin for log in logs), default=np.inf)


def toy_model_check(moe: MoeConfig = MoeConfig(), seed: int = 0, coordinates_per_tensor: Optional[int] = None) -> float:
    """Full-model gradient check of a 64-bit toy TokenMixer-Large over all of its parameters."""
    model = toy_model(moe, seed)
    ids, labels = toy_batch(seed)
    return grad_check_parameters(
        lambda: model.loss(model.forward(ids), labels),
        model.parameters(),
        eps=FD_STEP,
        coordinates_per_tensor=coordinates_per_tensor,
        seed=seed
    )


# name -> expert layout; only layouts with k' >= 2 routed experts put gradient on the router
TOY_MOE_LAYOUTS = {
    "toy_moe_model": MoeConfig(enabled=True, experts=2, active=2, shared=True),
    "toy_moe_router": MoeConfig(enabled=True, experts=4, active=3, shared=True),
    "toy_moe_router_no_shared": MoeConfig(enabled=True, experts=4, active=2, shared=False),
}


class GradCheckService:
    """Runs the primitive and toy-model gradient checks."""
    def __init__(self, seed: int = 0, coordinates_per_tensor: Optional[int] = None) -> None:
        self.seed = seed
        self.coordinates_per_tensor = coordinates_per_tensor

    def __check(self, name: str, check: Callable[[], float], tolerance: float) -> GradCheckRow:
        row = GradCheckRow(name=name, error=check(), tolerance=tolerance)
        if not row.passed:
            logging.error(f"Gradient check '{name}' failed: relative error {row.error:.3e} >= {tolerance:.0e}")
        return row

    def run(self) -> GradCheckReport:
        rng = np.random.default_rng(self.seed)
        report = GradCheckReport()
        for name, (f, x) in primitive_cases(rng).items():
            report.rows.append(self.__check(name, lambda: grad_check(f, x), PRIMITIVE_TOLERANCE))
        report.rows.append(self.__check(
            "toy_model",
            lambda: toy_model_check(seed=self.seed, coordinates_per_tensor=self.coordinates_per_tensor),
            MODEL_TOLERANCE
        ))
        for name, moe in TOY_MOE_LAYOUTS.items():
            margin = toy_routing_margin(moe, self.seed)
            if margin <= FD_STEP:
                logging.warning(f"Gradient check '{name}': routing margin {margin:.3e} is within the step {FD_STEP:.0e}")
            report.rows.append(self.__check(
                name,
                lambda: toy_model_check(moe, seed=self.seed, coordinates_per_tensor=self.coordinates_per_tensor),
                MODEL_TOLERANCE
            ))
        logging.info(f"Gradient checks: {sum(row.passed for row in report.rows)}/{len(report.rows)} passed")
        return report
