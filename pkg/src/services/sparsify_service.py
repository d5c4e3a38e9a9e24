from dataclasses import asdict, dataclass
from typing import Union
import logging

import numpy as np

from src.dao.synthetic_data import Dataset
from src.model.block import BlockParams
from src.model.feedforward import PerTokenSwiGLU
from src.model.moe import MoeConfig, split_dense
from src.model.tensor import Tensor
from src.model.tokenmixer import TokenMixerModel
from src.services.metrics import auc


class SparsifyException(Exception):
    """Base class for Exceptions of SparsifyService"""
    def __init__(self, message: str):
        """Base class for Exceptions of SparsifyService"""
        super().__init__(message)


@dataclass
class SparsifyReport:
    """A dense model split into S-P MoE stages, evaluated without retraining."""
    experts: int
    active: int
    alpha: float
    split_nets: int
    equivalence_error: float
    score_max_abs_deviation: float
    auc_dense: float
    auc_sparse: float
    parameters_dense: int
    parameters_activated: int

    def to_dict(self) -> dict:
        return asdict(self)


class SparsifyService:
    """First enlarge, then sparse: turns every per-token SwiGLU of a trained model into an S-P MoE."""
    def __init__(self, experts: int = 4, active: int = 2, shared: bool = True, alpha: Union[str, float] = "auto") -> None:
        self.moe = MoeConfig(enabled=True, experts=experts, active=active, shared=shared, alpha=alpha)
        self.moe.validate()

    def sparsify(self, model: TokenMixerModel) -> TokenMixerModel:
        """A copy of `model` whose per-token SwiGLU stages are split into experts.

        Raises
        ------
        SparsifyException: if the model has no per-token SwiGLU stage.
        ExpertSplitError: if a hidden width is not divisible by the expert count.
        """
        sparse = model.clone()
        split = 0
        for params in sparse.blocks:
            if not isinstance(params, BlockParams):
                continue
            for stage in ("mixing_net", "reverting_net"):
                net = getattr(params, stage)
                if isinstance(net, PerTokenSwiGLU):
                    setattr(params, stage, split_dense(net, self.moe.experts, self.moe.active, self.moe.shared, self.moe.alpha))
                    split += 1
        if split == 0:
            raise SparsifyException("The model has no per-token SwiGLU stage to split.")
        sparse.moe = self.moe
        return sparse

    def equivalence_error(self, dense: TokenMixerModel, sparse: TokenMixerModel, batch: int = 16, seed: int = 0) -> float:
        """Worst |dense(x) - sum of all experts(x)| over every split stage, on random inputs."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for dense_net, sparse_net in zip(dense.token_nets(), sparse.token_nets()):
            if not isinstance(dense_net, PerTokenSwiGLU):
                continue
            x = Tensor(rng.standard_normal((batch, dense_net.positions, dense_net.width)), dtype=dense_net.w_up.dtype)
            diff = np.abs(dense_net.forward(x).data - sparse_net.expert_sum(x).data)
            worst = max(worst, float(diff.max()))
        return worst

    def evaluate(self, model: TokenMixerModel, dataset: Dataset, batch_size: int = 512) -> tuple:
        """(sparse model, SparsifyReport) for `model` on `dataset`."""
        sparse = self.sparsify(model)
        dense_logits, sparse_logits = [], []
        for start in range(0, len(dataset), batch_size):
            ids = dataset.ids[start:start + batch_size]
            dense_logits.append(model.forward(ids).logits.data)
            sparse_logits.append(sparse.forward(ids).logits.data)
        dense_logits, sparse_logits = np.concatenate(dense_logits), np.concatenate(sparse_logits)
        total, activated = sparse.parameter_count()
        report = SparsifyReport(
            experts=self.moe.experts,
            active=self.moe.active,
            alpha=self.moe.resolved_alpha,
            split_nets=len(sparse.moe_layers()),
            equivalence_error=self.equivalence_error(model, sparse),
            score_max_abs_deviation=float(np.max(np.abs(dense_logits - sparse_logits))),
            auc_dense=auc(dense_logits, dataset.labels),
            auc_sparse=auc(sparse_logits, dataset.labels),
            parameters_dense=total,
            parameters_activated=activated
        )
        logging.info(
            f"Split into {report.experts} experts ({report.active} active): equivalence error "
            f"{report.equivalence_error:.3e}, AUC {report.auc_sparse:.5f} vs dense {report.auc_dense:.5f}"
        )
        return sparse, report
