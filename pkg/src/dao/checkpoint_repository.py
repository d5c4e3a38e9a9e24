from dataclasses import dataclass
from typing import Optional
import json
import logging
import os

import numpy as np
from opentelemetry.metrics._internal.instrument import Histogram

from src.dao.experiment_config import ExperimentConfig
from src.model.tokenmixer import TokenMixerModel
from src.telemetry import timer


class CheckpointRepositoryException(Exception):
    """Base class for Exceptions of CheckpointRepository"""
    def __init__(self, message: str):
        """Base class for Exceptions of CheckpointRepository"""
        super().__init__(message)


@dataclass
class Checkpoint:
    """A restored model with the experiment it was trained under."""
    model: TokenMixerModel
    config: ExperimentConfig
    step: int


class CheckpointRepository():
    """Stores model parameters as .npz files with a JSON sidecar."""
    def __init__(self, directory: str, histogram: Optional[Histogram] = None) -> None:
        """
        Parameters
        ----------
        directory: where checkpoints are written; created on first save.
        histogram: optional histogram telemetry object for registering telemetry data.
        """
        self.__directory = directory
        self.histogram = histogram

    @property
    def directory(self) -> str:
        """The checkpoint directory."""
        return self.__directory

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

    @timer(record_to_histogram, "checkpoint", method="save")
    def save(self, model: TokenMixerModel, config: ExperimentConfig, step: int, name: str = "model") -> str:
        """Write `<name>.npz` and `<name>.json`.

        Returns
        -------
        The path of the .npz file.
        """
        os.makedirs(self.directory, exist_ok=True)
        path = os.path.join(self.directory, f"{name}.npz")
        np.savez(path, **{key: param.data for key, param in model.named_parameters().items()})
        sidecar = {
            "experiment": config.to_dict(),
            "fingerprint": config.fingerprint,
            "step": step
        }
        with open(self.__sidecar(path), mode="w", encoding="utf-8") as target:
            json.dump(sidecar, target, indent=2, sort_keys=True)
        logging.info(f"Checkpoint of step {step} written to {path}.")
        return path

    @timer(record_to_histogram, "checkpoint", method="load")
    def load(self, path: str) -> Checkpoint:
        """Rebuild the model of a checkpoint and copy its parameters in.

        Raises
        ------
        CheckpointRepositoryException: if a file is missing or the parameters do not fit the model.
        """
        try:
            with open(self.__sidecar(path), mode="r", encoding="utf-8") as source:
                sidecar = json.load(source)
            arrays = np.load(path)
        except (OSError, ValueError) as e:
            raise CheckpointRepositoryException(f"Cannot read checkpoint '{path}': {e}")

        config = ExperimentConfig.from_dict(sidecar["experiment"])
        if config.fingerprint != sidecar["fingerprint"]:
            raise CheckpointRepositoryException(f"Checkpoint '{path}' has a fingerprint that does not match its experiment.")
        model = TokenMixerModel(
            config.features, config.model_config, config.moe_config, seed=config.seed, dtype=config.dtype
        )
        with arrays:
            named = model.named_parameters()
            if set(arrays.files) != set(named):
                raise CheckpointRepositoryException(
                    f"Checkpoint '{path}' holds {sorted(set(arrays.files) ^ set(named))} that the model does not match."
                )
            for key, param in named.items():
                if arrays[key].shape != param.shape:
                    raise CheckpointRepositoryException(
                        f"Parameter '{key}' has shape {arrays[key].shape} in the checkpoint, {param.shape} in the model."
                    )
                param.data[...] = arrays[key]
        return Checkpoint(model=model, config=config, step=sidecar["step"])

    @staticmethod
    def __sidecar(path: str) -> str:
        return os.path.splitext(path)[0] + ".json"
