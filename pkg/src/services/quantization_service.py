import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from src.dao.synthetic_data import Dataset
from src.model.feedforward import TokenNet
from src.model.fp8 import InvalidParametersError, fake_quantize, fp8_activations
from src.model.moe import SpMoe
from src.model.tokenmixer import TokenMixerModel
from src.services.metrics import auc


@dataclass
class FidelityReport:
    """Full-precision versus simulated FP8 inference on one dataset."""
    granularity: str
    examples: int
    layer_deviations: list
    score_max_abs_deviation: float
    auc_full: float
    auc_fp8: float

    @property
    def auc_delta(self) -> float:
        return self.auc_fp8 - self.auc_full

    def to_dict(self) -> dict:
        content = asdict(self)
        content["auc_delta"] = self.auc_delta
        return content


def _quantized_weights(net: TokenNet) -> list:
    """The weights stored in FP8: every SwiGLU/FFN matrix; routers stay in high precision."""
    if isinstance(net, SpMoe):
        weights = net.routed.parameters()
        return weights + (net.shared.parameters() if net.shared is not None else [])
    return net.parameters()


def _fake_quantize_matrices(data: np.ndarray, granularity: str) -> np.ndarray:
    """Quantize every trailing 2D matrix of a stacked weight with its own scale."""
    matrices = data.reshape((-1,) + data.shape[-2:])
    return np.stack([fake_quantize(m, granularity) for m in matrices]).reshape(data.shape)


def check_parameters(model: TokenMixerModel) -> None:
    """Raise InvalidParametersError if any parameter holds a non-finite value."""
    for name, param in model.named_parameters().items():
        if not np.all(np.isfinite(param.data)):
            raise InvalidParametersError(f"Parameter '{name}' holds non-finite values.")


def quantize_weights(model: TokenMixerModel, granularity: str = "tensor") -> TokenMixerModel:
    """A copy of `model` whose per-position network weights went through an E4M3 round trip."""
    check_parameters(model)
    quantized = model.clone()
    for net in quantized.token_nets():
        for weight in _quantized_weights(net):
            weight.data[...] = _fake_quantize_matrices(weight.data, granularity)
    return quantized


def _relative_deviation(reference: np.ndarray, other: np.ndarray) -> float:
    peak = float(np.max(np.abs(reference))) if reference.size else 0.0
    return float(np.max(np.abs(reference - other))) / max(peak, 1e-12) if reference.size else 0.0


def fp8_model_forward(
        model: TokenMixerModel,
        ids: np.ndarray,
        granularity: str = "tensor",
        enabled: bool = True,
        quantized: Optional[TokenMixerModel] = None
        ) -> tuple:
    """Logits of the simulated FP8 inference path and its deviation from full precision.

    Weights are pre-quantized; activations are quantized where they enter a
    per-position network (the permute boundary of a MoE) and where they enter the
    down projection. The residual stream, norms, tokenizer and heads stay in high
    precision. With `enabled` false both paths are the full-precision model.

    Parameters
    ----------
    quantized: an already weight-quantized copy of `model`, to avoid quantizing per batch.

    Returns
    -------
    (fp8 logits, {"layer_deviations": [...], "score_max_abs_deviation": float}, full-precision logits)

    Raises
    ------
    InvalidParametersError: if the model holds non-finite parameters.
    """
    check_parameters(model)
    full = model.forward(ids)
    if enabled:
        quantized = quantize_weights(model, granularity) if quantized is None else quantized
        with fp8_activations(granularity):
            low = quantized.forward(ids)
    else:
        low = model.forward(ids)
    deviations = [_relative_deviation(a.data, b.data) for a, b in zip(full.layers, low.layers)]
    report = {
        "layer_deviations": deviations,
        "score_max_abs_deviation": float(np.max(np.abs(full.logits.data - low.logits.data)))
    }
    return low.logits.data, report, full.logits.data


class QuantizationService:
    """Paired full-precision / FP8 evaluation of a trained model."""
    def __init__(self, granularity: str = "tensor", batch_size: int = 512) -> None:
        self.granularity = granularity
        self.batch_size = batch_size

    def evaluate(self, model: TokenMixerModel, dataset: Dataset, enabled: bool = True) -> FidelityReport:
        """Per-layer worst relative deviation, worst score deviation and the AUC of both paths."""
        quantized = quantize_weights(model, self.granularity) if enabled else None
        full_logits, fp8_logits = [], []
        layer_deviations, score_deviation = None, 0.0
        for start in range(0, len(dataset), self.batch_size):
            ids = dataset.ids[start:start + self.batch_size]
            low, report, full = fp8_model_forward(model, ids, self.granularity, enabled, quantized)
            fp8_logits.append(low)
            full_logits.append(full)
            deviations = report["layer_deviations"]
            layer_deviations = deviations if layer_deviations is None else list(np.maximum(layer_deviations, deviations))
            score_deviation = max(score_deviation, report["score_max_abs_deviation"])
        report = FidelityReport(
            granularity=self.granularity,
            examples=len(dataset),
            layer_deviations=[float(d) for d in layer_deviations],
            score_max_abs_deviation=score_deviation,
            auc_full=auc(np.concatenate(full_logits), dataset.labels),
            auc_fp8=auc(np.concatenate(fp8_logits), dataset.labels)
        )
        logging.info(
            f"FP8 ({self.granularity}) AUC {report.auc_fp8:.5f} vs full precision {report.auc_full:.5f}, "
            f"worst score deviation {report.score_max_abs_deviation:.3e}"
        )
        return report
