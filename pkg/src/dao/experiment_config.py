import copy
import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from typing import Any, Optional

import tomli_w

from src.dao.synthetic_data import SyntheticSpec
from src.model.block import ModelConfig
from src.model.fp8 import GRANULARITIES
from src.model.moe import MoeConfig
from src.model.tensor import TensorException, resolve_precision
from src.model.tokenizer import FeatureSpec


class ExperimentConfigException(Exception):
    """Base class for Exceptions of ExperimentConfig"""
    def __init__(self, message: str):
        """Base class for Exceptions of ExperimentConfig"""
        super().__init__(message)

class ConfigError(ExperimentConfigException):
    """The experiment file is malformed or holds an invalid value."""

class UnknownToggleError(ExperimentConfigException):
    """An override names a setting that does not exist."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings of a training run."""
    dense_lr: float = 0.01
    sparse_lr: float = 0.05
    batch_size: int = 256
    epochs: int = 2
    eval_every: int = 0
    token_parallel: int = 1
    parallel_threads: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.dense_lr < 0 or self.sparse_lr < 0:
            raise ConfigError(f"Learning rates must be non-negative, got {self.dense_lr} and {self.sparse_lr}.")
        if self.batch_size < 1 or self.epochs < 1 or self.token_parallel < 1 or self.eval_every < 0:
            raise ConfigError("batch_size, epochs and token_parallel must be positive, eval_every non-negative.")


@dataclass(frozen=True)
class QuantConfig:
    """Scale granularity of simulated FP8 inference."""
    granularity: str = "tensor"


DEFAULTS = {
    "experiment": {
        "name": "desk-default",
        "seed": 7,
        "precision": "float32",
        "output_dir": "runs"
    },
    "model": {
        "dim": 64,
        "heads": 8,
        "expansion": 2,
        "layers": 4,
        "interval": 2,
        "interval_residuals": True,
        "aux_weight": 0.1,
        "aux_layers": [],
        "aux_detached": False,
        "norm": "pre",
        "mix_strategy": "vertical",
        "mix_seed": 0,
        "global_token": True,
        "residual": True,
        "token_net": "pertoken_swiglu",
        "block_type": "tokenmixer_large",
        "rankmixer_heads": "tokens",
        "init_scales": [1.0, 1.0, 0.01],
        "tokenizer_layers": 1,
        "rms_eps": 1e-6
    },
    "moe": {
        "enabled": False,
        "stages": ["mixing", "reverting"],
        "experts": 4,
        "active": 2,
        "shared": True,
        "alpha": "auto",
        "expert_scope": "pertoken",
        "dispatch": "grouped",
        "init_variance": 1.0
    },
    "data": {
        "train_examples": 8192,
        "eval_examples": 4096,
        "noise": 0.0,
        "main_scale": 1.0,
        "cross_pairs": 6,
        "cross_scale": 1.5,
        "intercept": 0.0,
        "users": 0,
        "seed": 11
    },
    "train": {
        "dense_lr": 0.01,
        "sparse_lr": 0.05,
        "batch_size": 256,
        "epochs": 2,
        "eval_every": 0,
        "token_parallel": 1,
        "parallel_threads": False,
        "seed": 0
    },
    "quant": {
        "granularity": "tensor"
    }
}

FEATURE_KEYS = ("name", "cardinality", "emb_dim", "group")


def _merge(content: dict) -> dict:
    """Defaults overlaid with `content`, rejecting unknown sections and keys."""
    merged = copy.deepcopy(DEFAULTS)
    for section, values in content.items():
        if section == "features":
            continue
        if section not in DEFAULTS:
            raise ConfigError(f"Unknown section [{section}] in the experiment file.")
        if not isinstance(values, dict):
            raise ConfigError(f"Section [{section}] must be a table.")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"Unknown setting '{key}' in section [{section}].")
            merged[section][key] = value
    features = content.get("features")
    if not features:
        raise ConfigError("The experiment file declares no [[features]].")
    for feature in features:
        if set(feature) != set(FEATURE_KEYS):
            raise ConfigError(f"A feature needs exactly the keys {FEATURE_KEYS}, got {sorted(feature)}.")
    merged["features"] = [{key: feature[key] for key in FEATURE_KEYS} for feature in features]
    return merged


class ExperimentConfig():
    """ Reads and manages the experiment file."""

    def __init__(self, experiment_file: Optional[str] = 'configs/desk_default.toml', content: Optional[dict] = None) -> None:
        """ Open the experiment file (or take already parsed content), then validate it.

        Raises
        ------
        ConfigError: for malformed files, unknown settings or invalid values.
        ModelConfigError / MixConfigError / MoeException: for an inconsistent model.
        """
        if content is None:
            try:
                with open(experiment_file, mode="rb") as source:
                    content = tomllib.load(source)
            except (OSError, tomllib.TOMLDecodeError) as e:
                raise ConfigError(f"Cannot read experiment file '{experiment_file}': {e}")
        self.__SETTINGS = _merge(content)
        self.validate()

    @classmethod
    def from_dict(cls, content: dict) -> "ExperimentConfig":
        return cls(experiment_file=None, content=copy.deepcopy(content))

    @property
    def settings(self) -> dict:
        """ All of the settings, defaults included."""
        return copy.deepcopy(self.__SETTINGS)

    @property
    def name(self) -> str:
        """ The name of the experiment."""
        return self.__SETTINGS['experiment']['name']

    @property
    def seed(self) -> int:
        """ The seed every model parameter is drawn from."""
        return self.__SETTINGS['experiment']['seed']

    @property
    def dtype(self) -> type:
        """ The numpy precision of the run."""
        return resolve_precision(self.__SETTINGS['experiment']['precision'])

    @property
    def output_dir(self) -> str:
        """ Where runs write checkpoints, metrics and reports."""
        return self.__SETTINGS['experiment']['output_dir']

    @property
    def features(self) -> tuple:
        """ The feature layout."""
        return tuple(FeatureSpec(**feature) for feature in self.__SETTINGS['features'])

    @property
    def tokens(self) -> int:
        """ The token count T of the layout."""
        groups = len({feature["group"] for feature in self.__SETTINGS['features']})
        return groups + (1 if self.__SETTINGS['model']['global_token'] else 0)

    @property
    def model_config(self) -> ModelConfig:
        """ The model section as a ModelConfig."""
        model = dict(self.__SETTINGS['model'])
        model["aux_layers"] = tuple(model["aux_layers"]) if model["aux_layers"] else None
        model["init_scales"] = tuple(model["init_scales"])
        return ModelConfig(**model)

    @property
    def moe_config(self) -> MoeConfig:
        """ The moe section as a MoeConfig."""
        moe = dict(self.__SETTINGS['moe'])
        moe["stages"] = tuple(moe["stages"])
        return MoeConfig(**moe)

    @property
    def synthetic_spec(self) -> SyntheticSpec:
        """ The data section and the feature layout as a SyntheticSpec."""
        return SyntheticSpec(features=self.features, **self.__SETTINGS['data'])

    @property
    def train_config(self) -> TrainConfig:
        """ The train section as a TrainConfig."""
        return TrainConfig(**self.__SETTINGS['train'])

    @property
    def quant_config(self) -> QuantConfig:
        """ The quant section as a QuantConfig."""
        return QuantConfig(**self.__SETTINGS['quant'])

    def validate(self) -> None:
        """ Build every typed view once so that invalid values fail at load time."""
        try:
            features = self.features
            model_config, moe_config = self.model_config, self.moe_config
            synthetic_spec, train_config = self.synthetic_spec, self.train_config
            self.dtype
        except (TypeError, ValueError, TensorException) as e:
            raise ConfigError(f"Invalid experiment file: {e}")
        model_config.validate(self.tokens)
        if moe_config.enabled:
            moe_config.validate()
        synthetic_spec.validate()
        train_config.validate()
        if train_config.dense_lr <= 0 or train_config.sparse_lr <= 0:
            raise ConfigError("Learning rates in an experiment file must be positive.")
        if self.quant_config.granularity not in GRANULARITIES:
            raise ConfigError(f"Unknown FP8 granularity '{self.quant_config.granularity}'.")
        if len({f.name for f in features}) != len(features):
            raise ConfigError("Feature names must be unique.")

    def to_dict(self) -> dict:
        """ The full settings, suitable for TOML or JSON."""
        return self.settings

    def dump(self, path: str) -> None:
        """ Write the full settings as a TOML experiment file."""
        with open(path, mode="wb") as target:
            tomli_w.dump(self.__SETTINGS, target)

    @property
    def fingerprint(self) -> str:
        """ SHA-256 of the canonical JSON form of the settings."""
        canonical = json.dumps(self.__SETTINGS, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, deltas: dict[str, Any]) -> "ExperimentConfig":
        """ A new configuration with dotted-key overrides applied, e.g. {"model.norm": "post"}.

        Raises
        ------
        UnknownToggleError: if a key does not name an existing setting.
        """
        content = self.settings
        for key, value in deltas.items():
            section, _, setting = key.partition(".")
            if section not in DEFAULTS or setting not in DEFAULTS[section]:
                raise UnknownToggleError(f"Unknown toggle '{key}'.")
            content[section][setting] = copy.deepcopy(value)
        return ExperimentConfig.from_dict(content)
