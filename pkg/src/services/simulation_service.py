from dataclasses import asdict, dataclass
from typing import Optional
import logging

import numpy as np
from opentelemetry.metrics._internal.instrument import Histogram

from src.model.block import ModelConfig
from src.model.tensor import Tensor
from src.model.tokenizer import FeatureSpec
from src.model.tokenmixer import TokenMixerModel
from src.parallel.token_parallel import ShardedTensor, run_parallel

EQUIVALENCE_TOLERANCE = 1e-10


@dataclass
class SimulationReport:
    """Token Parallel run against the single-device model."""
    devices: int
    layers: int
    tokens: int
    dim: int
    heads: int
    naive: bool
    max_abs_diff: float
    all2all_count: int
    expected_all2all: int
    all2all_bytes: int
    events: list

    @property
    def passed(self) -> bool:
        return self.max_abs_diff < EQUIVALENCE_TOLERANCE and self.all2all_count == self.expected_all2all

    def to_dict(self) -> dict:
        content = asdict(self)
        content["passed"] = self.passed
        return content


def toy_model(tokens: int, dim: int, heads: int, layers: int, seed: int = 0) -> TokenMixerModel:
    """A 64-bit TokenMixer-Large with one feature per group and a global token."""
    features = [FeatureSpec(name=f"f{g}", cardinality=8, emb_dim=4, group=g) for g in range(tokens - 1)]
    config = ModelConfig(dim=dim, heads=heads, expansion=2, layers=layers, init_scales=(1.0, 1.0, 1.0))
    return TokenMixerModel(features, config, seed=seed, dtype=np.float64)


class SimulationService:
    """Checks the Token Parallel plan: numerical equivalence and exchange count."""
    def __init__(self, histogram: Optional[Histogram] = None, threads: bool = False) -> None:
        self.histogram = histogram
        self.threads = threads

    def run(
            self,
            devices: int,
            layers: int,
            tokens: int = 4,
            dim: int = 8,
            heads: int = 4,
            naive: bool = False,
            batch: Optional[int] = None,
            seed: int = 0
            ) -> SimulationReport:
        """Simulate a toy model over `devices` devices and compare with the serial forward pass.

        Raises
        ------
        ShardingError / LayoutError: if the dimensions do not shard over the devices.
        """
        model = toy_model(tokens, dim, heads, layers, seed)
        batch = 2 * devices if batch is None else batch
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((batch, tokens, dim)))

        serial = model.forward_tokens(x)
        result = run_parallel(
            model, ShardedTensor.shard(x, 0, devices, "batch"), devices,
            naive=naive, threads=self.threads, histogram=self.histogram
        )
        diffs = [float(np.max(np.abs(serial.logits.data - result.logits.data)))]
        diffs.append(float(np.max(np.abs(serial.layers[-1].data - result.output.unshard().data))))
        for layer in serial.aux_logits:
            diffs.append(float(np.max(np.abs(serial.aux_logits[layer].data - result.aux_logits[layer].data))))

        report = SimulationReport(
            devices=devices,
            layers=layers,
            tokens=tokens,
            dim=dim,
            heads=heads,
            naive=naive,
            max_abs_diff=max(diffs),
            all2all_count=result.log.all2all_count,
            expected_all2all=4 * layers if naive else 2 * layers + 1,
            all2all_bytes=result.log.all2all_bytes,
            events=result.log.to_records()
        )
        logging.info(
            f"Token Parallel N={devices} L={layers} ({'naive' if naive else 'optimized'}): "
            f"{report.all2all_count} all2all events, max abs diff {report.max_abs_diff:.3e}"
        )
        return report
