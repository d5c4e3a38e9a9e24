from concurrent.futures import ThreadPoolExecutor
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from typing import Optional
import logging

import numpy as np

from src.dao.experiment_config import ExperimentConfig, UnknownToggleError
from src.dao.run_record_repository import RunRecordRepository
from src.services.training_service import TrainingService

MOE_1_2 = {"moe.enabled": True, "moe.experts": 4, "moe.active": 2}
MOE_1_4 = {"moe.enabled": True, "moe.experts": 8, "moe.active": 2}
MOE_1_8 = {"moe.enabled": True, "moe.experts": 16, "moe.active": 2}
RANKMIXER = {"model.block_type": "rankmixer", "model.interval_residuals": False}

PRESETS = {
    # components
    "no_global_token": {"model.global_token": False},
    "no_mixing_reverting": {"model.mix_strategy": "none"},
    "no_residual": {"model.residual": False},
    "no_interval_residual_aux": {"model.interval_residuals": False, "model.aux_weight": 0.0},
    "shared_swiglu": {"model.token_net": "shared_swiglu"},
    "pertoken_ffn": {"model.token_net": "pertoken_ffn"},
    # RankMixer baselines
    "rankmixer": {**RANKMIXER, "model.rankmixer_heads": "tokens"},
    "rankmixer_no_otr": {**RANKMIXER, "model.rankmixer_heads": "half_tokens"},
    "rankmixer_no_sr_otr": {**RANKMIXER, "model.rankmixer_heads": "half_tokens", "model.residual": False},
    # S-P MoE
    "moe_1_2": dict(MOE_1_2),
    "moe_1_4": dict(MOE_1_4),
    "moe_1_8": dict(MOE_1_8),
    "moe_no_shared": {**MOE_1_2, "moe.shared": False},
    "moe_no_gate_scaling": {**MOE_1_2, "moe.alpha": 1.0},
    "moe_no_small_init": {**MOE_1_2, "model.init_scales": [1.0, 1.0, 1.0]},
    "moe_global_scope": {**MOE_1_2, "moe.expert_scope": "global"},
    "increase_variance": {**MOE_1_2, "moe.alpha": 1.0, "moe.init_variance": 4.0},
    # norm placement
    "norm_pre": {"model.norm": "pre"},
    "norm_post": {"model.norm": "post"},
    "norm_sandwich": {"model.norm": "sandwich"},
    # mixing strategy
    "mix_vertical": {"model.mix_strategy": "vertical"},
    "mix_diagonal": {"model.mix_strategy": "diagonal"},
    "mix_random": {"model.mix_strategy": "random"},
    "mix_half_tokens": {"model.mix_strategy": "half_tokens"},
    # down-matrix small init
    "init_1_1_1": {"model.init_scales": [1.0, 1.0, 1.0]},
    "small_init_001": {"model.init_scales": [1.0, 1.0, 0.01]},
    "small_init_01": {"model.init_scales": [1.0, 1.0, 0.1]},
    "small_init_001_all": {"model.init_scales": [0.01, 0.01, 0.01]},
    "small_init_001_reverse": {"model.init_scales": [0.01, 0.01, 1.0]},
}
PRESETS.update({f"moe_1_2_alpha_{a}": {**MOE_1_2, "moe.alpha": float(a)} for a in (1, 2, 3, 4)})
PRESETS.update({f"moe_1_4_alpha_{a}": {**MOE_1_4, "moe.alpha": float(a)} for a in (1, 2, 4, 6, 8)})


@dataclass(frozen=True)
class TableGroup:
    """A reference configuration and the presets compared against it."""
    base: dict
    presets: tuple


TABLES = {
    "rankmixer_components": TableGroup({}, ("rankmixer_no_sr_otr", "rankmixer_no_otr", "rankmixer")),
    "block_components": TableGroup({}, (
        "no_global_token", "no_mixing_reverting", "no_residual",
        "no_interval_residual_aux", "shared_swiglu", "pertoken_ffn"
    )),
    "moe_components": TableGroup(MOE_1_2, ("moe_no_shared", "moe_no_gate_scaling", "moe_no_small_init", "moe_global_scope")),
    "norm_placement": TableGroup({"model.norm": "pre"}, ("norm_post", "norm_sandwich")),
    "mix_strategies": TableGroup({"model.mix_strategy": "vertical"}, ("mix_diagonal", "mix_random", "mix_half_tokens")),
    "moe_alpha": TableGroup({}, tuple(name for name in PRESETS if "_alpha_" in name)),
    "init_scales": TableGroup({"model.init_scales": [1.0, 1.0, 1.0]}, (
        "small_init_001", "small_init_01", "small_init_001_all", "small_init_001_reverse"
    )),
    "expert_variance": TableGroup(MOE_1_2, ("increase_variance",)),
}


class AblationException(Exception):
    """Base class for Exceptions of AblationService"""
    def __init__(self, message: str):
        """Base class for Exceptions of AblationService"""
        super().__init__(message)


@dataclass
class AblationRow:
    name: str
    deltas: dict
    aucs: list
    mean_auc: float
    delta_auc: float


@dataclass
class AblationReport:
    """Per-seed AUC of a base run and its variants, with the mean AUC difference to the base."""
    base: str
    seeds: list
    rows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, content: dict) -> "AblationReport":
        return cls(
            base=content["base"],
            seeds=list(content["seeds"]),
            rows=[AblationRow(**row) for row in content["rows"]]
        )


def resolve_presets(names: Sequence[str]) -> dict:
    """Deltas of every named preset, in order.

    Raises
    ------
    UnknownToggleError: if a name is neither a preset nor a table group.
    """
    matrix = {}
    for name in names:
        if name in TABLES:
            matrix.update({preset: PRESETS[preset] for preset in TABLES[name].presets})
        elif name in PRESETS:
            matrix[name] = PRESETS[name]
        else:
            raise UnknownToggleError(f"Unknown preset '{name}'.")
    return matrix


class AblationService:
    """Trains a base configuration and its variants with common seeds."""
    def __init__(self, config: ExperimentConfig, workers: int = 1, output_dir: Optional[str] = None) -> None:
        """
        Parameters
        ----------
        config: the base experiment.
        workers: runs trained at the same time, one thread each.
        output_dir: where each run writes its metrics and report; nothing is written without it.
        """
        if workers < 1:
            raise AblationException(f"At least one worker is required, got {workers}.")
        self.config = config
        self.workers = workers
        self.output_dir = output_dir

    def __train(self, job: tuple) -> float:
        name, config, seed = job
        run_records = None
        if self.output_dir is not None:
            run_records = RunRecordRepository(f"{self.output_dir}/{name}/seed-{seed}")
        report, _ = TrainingService(config, run_records=run_records).train()
        logging.info(f"Ablation run '{name}' seed {seed}: AUC {report.final_auc:.5f}")
        return report.final_auc

    def run_ablation(self, matrix: dict, seeds: Sequence[int] = (0,), base: Optional[dict] = None) -> AblationReport:
        """Train the base and every variant of `matrix` once per seed.

        Parameters
        ----------
        matrix: variant name -> dotted-key deltas applied on top of the base.
        seeds: each seed sets both the parameter initialization and the batch order.
        base: deltas turning the configured experiment into the reference run.

        Raises
        ------
        UnknownToggleError: if a delta names a setting that does not exist.
        """
        base_config = self.config.with_overrides(base or {})
        variants = {"base": base_config}
        variants.update({name: base_config.with_overrides(deltas) for name, deltas in matrix.items()})

        jobs = [
            (name, config.with_overrides({"experiment.seed": seed, "train.seed": seed}), seed)
            for name, config in variants.items() for seed in seeds
        ]
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            aucs = list(executor.map(self.__train, jobs))

        report = AblationReport(base=base_config.name, seeds=list(seeds))
        for index, name in enumerate(variants):
            values = aucs[index * len(seeds):(index + 1) * len(seeds)]
            report.rows.append(AblationRow(
                name=name,
                deltas={} if name == "base" else dict(matrix[name]),
                aucs=values,
                mean_auc=float(np.mean(values)),
                delta_auc=0.0
            ))
        for row in report.rows:
            row.delta_auc = row.mean_auc - report.rows[0].mean_auc
        return report

    def run_table(self, table: str, seeds: Sequence[int] = (0,)) -> AblationReport:
        """Reproduce one of the ablation tables at desk scale.

        Raises
        ------
        UnknownToggleError: if `table` names no table group.
        """
        if table not in TABLES:
            raise UnknownToggleError(f"Unknown table group '{table}', expected one of {tuple(TABLES)}.")
        group = TABLES[table]
        return self.run_ablation({name: PRESETS[name] for name in group.presets}, seeds, base=group.base)
