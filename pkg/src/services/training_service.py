from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from typing import Optional
import logging

import numpy as np
from opentelemetry.metrics._internal.instrument import Histogram

from src.dao.experiment_config import ExperimentConfig, TrainConfig
from src.dao.run_record_repository import RunRecordRepository
from src.dao.synthetic_data import Dataset, generate_splits, oracle_ceiling_auc
from src.model.tensor import NumericError, Tape, Tensor, concat
from src.model.tokenmixer import ModelOutput, TokenMixerModel
from src.parallel.token_parallel import ShardedTensor, run_parallel
from src.services.metrics import auc, flops_count, logloss
from src.telemetry import timer

ADAGRAD_EPS = 1e-10


class TrainingException(Exception):
    """Base class for Exceptions of TrainingService"""
    def __init__(self, message: str):
        """Base class for Exceptions of TrainingService"""
        super().__init__(message)

class TrainingDivergedError(TrainingException):
    """The loss became non-finite; carries the activation norm of every layer."""
    def __init__(self, message: str, layer_norms: Sequence[float] = ()):
        super().__init__(f"{message} Layer activation norms: {[round(n, 4) for n in layer_norms]}")
        self.layer_norms = list(layer_norms)


@dataclass
class AdagradState:
    """Squared-gradient accumulators keyed by parameter."""
    eps: float = ADAGRAD_EPS
    accumulators: dict = field(default_factory=dict)
    rejected_steps: int = 0

    def accumulator(self, param: Tensor) -> np.ndarray:
        if param not in self.accumulators:
            self.accumulators[param] = np.zeros(param.shape, dtype=np.float64)
        elif self.accumulators[param].shape != param.shape:
            raise TrainingException(
                f"Accumulator of shape {self.accumulators[param].shape} does not match parameter {param.shape}."
            )
        return self.accumulators[param]


def adagrad_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdagradState, lr: float) -> bool:
    """acc += g^2; p -= lr * g / sqrt(acc + eps), for every parameter at once.

    A step with any non-finite gradient is rejected as a whole: nothing is
    updated and `state.rejected_steps` grows.

    Returns
    -------
    True if the step was applied.
    """
    if any(g is not None and not np.all(np.isfinite(g)) for g in grads):
        state.rejected_steps += 1
        logging.warning(f"Rejected an optimizer step with non-finite gradients ({state.rejected_steps} so far).")
        return False
    for param, grad in zip(params, grads):
        if grad is None:
            continue
        acc = state.accumulator(param)
        acc += np.square(grad, dtype=np.float64)
        param.data -= (lr * grad / np.sqrt(acc + state.eps)).astype(param.dtype)
    return True


@dataclass
class RunReport:
    """Outcome of one training run; contains nothing that depends on wall-clock time."""
    name: str
    fingerprint: str
    seed: int
    trajectory: list
    final_auc: float
    final_logloss: float
    oracle_auc: float
    ceiling_auc: float
    parameters_total: int
    parameters_activated: int
    flops_per_batch: int
    steps: int
    rejected_steps: int
    epoch_losses: list

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, content: dict) -> "RunReport":
        return cls(**content)


def layer_norms(model: TokenMixerModel, ids: np.ndarray) -> list:
    """Frobenius norm of X_0..X_L for `ids`, NaN from the first layer that fails."""
    norms = []
    try:
        states = [model.tokenizer.forward(ids)]
        norms.append(float(np.linalg.norm(states[0].data)))
        targets = {target: source for source, target in model.junctions}
        for layer in range(1, len(model.blocks) + 1):
            y = model.block_step(layer, states[-1])
            if layer in targets:
                y = y + states[targets[layer]]
            states.append(y)
            norms.append(float(np.linalg.norm(y.data)))
    except NumericError:
        norms.append(float("nan"))
    return norms


class TrainingService:
    """Trains a TokenMixer-Large model on synthetic data with Adagrad."""
    def __init__(
            self,
            config: ExperimentConfig,
            run_records: Optional[RunRecordRepository] = None,
            histogram: Optional[Histogram] = None,
            comm_histogram: Optional[Histogram] = None
            ) -> None:
        """
        Parameters
        ----------
        config: the experiment.
        run_records: where eval points and the report go; nothing is written without it.
        histogram: optional histogram receiving the duration of every optimizer step.
        comm_histogram: optional histogram receiving the bytes of simulated all-to-all exchanges.
        """
        self.config = config
        self.run_records = run_records
        self.histogram = histogram
        self.comm_histogram = comm_histogram

    @property
    def train_config(self) -> TrainConfig:
        return self.config.train_config

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

    def build_model(self) -> TokenMixerModel:
        """A freshly initialized model of the experiment."""
        return TokenMixerModel(
            self.config.features,
            self.config.model_config,
            self.config.moe_config,
            seed=self.config.seed,
            dtype=self.config.dtype
        )

    def forward(self, model: TokenMixerModel, ids: np.ndarray) -> ModelOutput:
        """Serial forward pass, or the token-parallel one when train.token_parallel > 1.

        Rows beyond the largest multiple of the device count run serially.
        """
        devices = self.train_config.token_parallel
        if devices == 1:
            return model.forward(ids)
        sharded_rows = ids.shape[0] - ids.shape[0] % devices
        if sharded_rows == 0:
            return model.forward(ids)
        x = model.tokenizer.forward(ids[:sharded_rows])
        result = run_parallel(
            model,
            ShardedTensor.shard(x, 0, devices, "batch"),
            devices,
            threads=self.train_config.parallel_threads,
            histogram=self.comm_histogram
        )
        output = result.to_model_output()
        if sharded_rows == ids.shape[0]:
            return output
        rest = model.forward(ids[sharded_rows:])
        return ModelOutput(
            logits=concat([output.logits, rest.logits], axis=0),
            aux_logits={
                layer: concat([output.aux_logits[layer], rest.aux_logits[layer]], axis=0)
                for layer in output.aux_logits
            }
        )

    @timer(record_to_histogram, "train", method="step")
    def step(
            self,
            model: TokenMixerModel,
            ids: np.ndarray,
            labels: np.ndarray,
            dense_state: AdagradState,
            sparse_state: AdagradState
            ) -> float:
        """One forward, backward and Adagrad update; returns the batch loss.

        Raises
        ------
        TrainingDivergedError: if the forward pass produces a non-finite value.
        """
        dense, sparse = model.dense_parameters(), model.embedding_parameters()
        try:
            with Tape() as tape:
                loss = model.loss(self.forward(model, ids), labels)
                grads = tape.backward(loss, leaves=dense + sparse)
        except NumericError as e:
            raise TrainingDivergedError(f"Training diverged: {e}.", layer_norms(model, ids))
        adagrad_step(dense, [grads[p] for p in dense], dense_state, self.train_config.dense_lr)
        adagrad_step(sparse, [grads[p] for p in sparse], sparse_state, self.train_config.sparse_lr)
        return loss.item()

    def predict(self, model: TokenMixerModel, dataset: Dataset) -> np.ndarray:
        """Final-head logits of every example, evaluated batch by batch without a tape."""
        batch = self.train_config.batch_size
        logits = [
            self.forward(model, dataset.ids[start:start + batch]).logits.data
            for start in range(0, len(dataset), batch)
        ]
        return np.concatenate(logits).astype(np.float64)

    def evaluate(self, model: TokenMixerModel, dataset: Dataset) -> dict:
        """logloss and AUC of the model on `dataset`."""
        logits = self.predict(model, dataset)
        return {"eval_logloss": logloss(logits, dataset.labels), "eval_auc": auc(logits, dataset.labels)}

    def __eval_point(self, model: TokenMixerModel, eval_data: Dataset, epoch: int, step: int, train_loss: float) -> dict:
        point = {"epoch": epoch, "step": step, "train_loss": train_loss}
        point.update(self.evaluate(model, eval_data))
        logging.info(
            f"epoch {epoch} step {step}: train loss {train_loss:.5f}, "
            f"eval logloss {point['eval_logloss']:.5f}, eval AUC {point['eval_auc']:.5f}"
        )
        if self.run_records is not None:
            self.run_records.append(point)
        return point

    def train(
            self,
            model: Optional[TokenMixerModel] = None,
            train_data: Optional[Dataset] = None,
            eval_data: Optional[Dataset] = None
            ) -> tuple:
        """Run the full loop: shuffled batches, Adagrad updates and periodic evaluation.

        Evaluation happens every `eval_every` steps, or after every epoch when it is 0.
        Incomplete trailing batches are dropped.

        Returns
        -------
        (RunReport, trained model)

        Raises
        ------
        TrainingDivergedError: if the loss becomes non-finite.
        """
        train_config = self.train_config
        if train_data is None or eval_data is None:
            train_data, eval_data = generate_splits(self.config.synthetic_spec)
        model = self.build_model() if model is None else model
        rng = np.random.default_rng(train_config.seed)
        dense_state, sparse_state = AdagradState(), AdagradState()

        batch = min(train_config.batch_size, len(train_data))
        batches = len(train_data) // batch
        trajectory, epoch_losses = [], []
        step = 0
        for epoch in range(1, train_config.epochs + 1):
            order = rng.permutation(len(train_data))
            losses = []
            for b in range(batches):
                rows = order[b * batch:(b + 1) * batch]
                losses.append(self.step(model, train_data.ids[rows], train_data.labels[rows], dense_state, sparse_state))
                step += 1
                if train_config.eval_every and step % train_config.eval_every == 0:
                    trajectory.append(self.__eval_point(model, eval_data, epoch, step, losses[-1]))
            epoch_losses.append(float(np.mean(losses)))
            if not train_config.eval_every:
                trajectory.append(self.__eval_point(model, eval_data, epoch, step, epoch_losses[-1]))
        if not trajectory or trajectory[-1]["step"] != step:
            trajectory.append(self.__eval_point(model, eval_data, train_config.epochs, step, epoch_losses[-1]))

        total, activated = model.parameter_count()
        report = RunReport(
            name=self.config.name,
            fingerprint=self.config.fingerprint,
            seed=self.config.seed,
            trajectory=trajectory,
            final_auc=trajectory[-1]["eval_auc"],
            final_logloss=trajectory[-1]["eval_logloss"],
            oracle_auc=auc(eval_data.scores, eval_data.labels),
            ceiling_auc=oracle_ceiling_auc(eval_data),
            parameters_total=total,
            parameters_activated=activated,
            flops_per_batch=flops_count(
                self.config.features, self.config.model_config, self.config.moe_config, train_config.batch_size
            ),
            steps=step,
            rejected_steps=dense_state.rejected_steps + sparse_state.rejected_steps,
            epoch_losses=epoch_losses
        )
        if self.run_records is not None:
            self.run_records.save_report(report.to_dict())
        logging.info(f"Run '{report.name}' finished: AUC {report.final_auc:.5f} (oracle {report.oracle_auc:.5f}).")
        return report, model
