from collections.abc import Sequence
from dataclasses import dataclass
from typing import Optional
import logging

import numpy as np

from src.model.tokenizer import FeatureSpec


class SyntheticDataException(Exception):
    """Base class for Exceptions of SyntheticData"""
    def __init__(self, message: str):
        """Base class for Exceptions of SyntheticData"""
        super().__init__(message)

class DatasetError(SyntheticDataException):
    """The synthetic dataset cannot be generated as specified."""


POSITIVE_RATE_BOUNDS = (0.05, 0.95)


@dataclass(frozen=True)
class SyntheticSpec:
    """Feature layout and planted logistic model of a synthetic CTR dataset.

    The planted logit is an intercept plus one main effect per (feature, id) plus
    `cross_pairs` interaction tables, each over two features of different groups.
    `noise` is the standard deviation of Gaussian noise added to the logit before
    the Bernoulli draw.
    """
    features: tuple
    train_examples: int = 8192
    eval_examples: int = 4096
    noise: float = 0.0
    main_scale: float = 1.0
    cross_pairs: int = 6
    cross_scale: float = 1.5
    intercept: float = 0.0
    users: int = 0
    seed: int = 11

    def validate(self) -> None:
        """Raise DatasetError for an unusable feature layout or planted model."""
        if not self.features:
            raise DatasetError("A synthetic dataset needs at least one feature.")
        if self.train_examples < 1 or self.eval_examples < 1:
            raise DatasetError(
                f"Example counts must be positive, got {self.train_examples} and {self.eval_examples}."
            )
        if self.noise < 0 or self.main_scale < 0 or self.cross_scale < 0:
            raise DatasetError("noise, main_scale and cross_scale must be non-negative.")
        if self.cross_pairs < 0 or self.users < 0:
            raise DatasetError("cross_pairs and users must be non-negative.")
        if self.cross_pairs > len(cross_group_pairs(self.features)):
            raise DatasetError(
                f"{self.cross_pairs} cross pairs requested but the layout only has "
                f"{len(cross_group_pairs(self.features))} pairs of features from different groups."
            )


def cross_group_pairs(features: Sequence[FeatureSpec]) -> list:
    """Every (i, j), i < j, of feature columns that belong to different groups."""
    return [
        (i, j)
        for i in range(len(features))
        for j in range(i + 1, len(features))
        if features[i].group != features[j].group
    ]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


class PlantedModel:
    """The ground-truth scorer drawn from a SyntheticSpec's seed."""
    def __init__(self, spec: SyntheticSpec) -> None:
        spec.validate()
        rng = np.random.default_rng(spec.seed)
        features = spec.features
        self.intercept = spec.intercept
        main_std = spec.main_scale / np.sqrt(len(features))
        self.main_effects = [rng.standard_normal(f.cardinality) * main_std for f in features]
        candidates = cross_group_pairs(features)
        chosen = rng.choice(len(candidates), size=spec.cross_pairs, replace=False) if spec.cross_pairs else []
        self.pairs = [candidates[c] for c in sorted(chosen)]
        cross_std = spec.cross_scale / np.sqrt(max(spec.cross_pairs, 1))
        self.cross_effects = [
            rng.standard_normal((features[i].cardinality, features[j].cardinality)) * cross_std
            for i, j in self.pairs
        ]

    def main_score(self, ids: np.ndarray) -> np.ndarray:
        """Sum of the per-feature main effects only."""
        return sum(effect[ids[:, column]] for column, effect in enumerate(self.main_effects))

    def score(self, ids: np.ndarray, intercept: Optional[float] = None) -> np.ndarray:
        """The planted logit of every row of `ids`, optionally with another intercept."""
        total = (self.intercept if intercept is None else intercept) + self.main_score(ids)
        for (i, j), table in zip(self.pairs, self.cross_effects):
            total = total + table[ids[:, i], ids[:, j]]
        return total


@dataclass(frozen=True)
class Dataset:
    """Feature ids (n, F), binary labels, planted scores and the optional user field."""
    ids: np.ndarray
    labels: np.ndarray
    scores: np.ndarray
    noise: float
    intercept: float
    users: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def positive_rate(self) -> float:
        return float(self.labels.mean())

    def subset(self, rows: np.ndarray) -> "Dataset":
        return Dataset(
            ids=self.ids[rows],
            labels=self.labels[rows],
            scores=self.scores[rows],
            noise=self.noise,
            intercept=self.intercept,
            users=None if self.users is None else self.users[rows]
        )


def _effective_probability(scores: np.ndarray, noise: float) -> np.ndarray:
    """P(label = 1 | score) once the Gaussian logit noise is integrated out (probit approximation)."""
    return _sigmoid(scores / np.sqrt(1.0 + np.pi * noise ** 2 / 8.0))


def _balanced_intercept_shift(scores: np.ndarray, noise: float) -> float:
    """Shift of the logit that brings the expected positive rate to one half."""
    low, high = -50.0, 50.0
    for _ in range(100):
        middle = (low + high) / 2
        if _effective_probability(scores + middle, noise).mean() < 0.5:
            low = middle
        else:
            high = middle
    return (low + high) / 2


def generate(spec: SyntheticSpec, seed: int, examples: Optional[int] = None) -> Dataset:
    """Draw `examples` labelled rows (default: spec.train_examples) from the planted model.

    The planted model depends only on spec.seed, the rows only on `seed`, so one
    spec with two seeds yields a train and an eval split of the same task. A
    positive rate outside (0.05, 0.95) triggers a regeneration with the intercept
    moved to balance the classes.

    Raises
    ------
    DatasetError: if the spec is invalid or the classes cannot be balanced.
    """
    spec.validate()
    count = spec.train_examples if examples is None else examples
    if count < 1:
        raise DatasetError(f"Cannot generate {count} examples.")
    planted = PlantedModel(spec)
    rng = np.random.default_rng(seed)
    ids = np.stack([rng.integers(0, f.cardinality, size=count) for f in spec.features], axis=1).astype(np.int64)
    users = rng.integers(0, spec.users, size=count).astype(np.int64) if spec.users else None
    noise = rng.standard_normal(count) * spec.noise
    draws = rng.random(count)

    scores = planted.score(ids)
    labels = (draws < _sigmoid(scores + noise)).astype(np.int64)
    rate = labels.mean()
    intercept = planted.intercept
    if not POSITIVE_RATE_BOUNDS[0] < rate < POSITIVE_RATE_BOUNDS[1]:
        intercept = planted.intercept + _balanced_intercept_shift(scores, spec.noise)
        logging.warning(
            f"Positive rate {rate:.4f} is degenerate, regenerating labels with intercept {intercept:.4f}."
        )
        scores = planted.score(ids, intercept)
        labels = (draws < _sigmoid(scores + noise)).astype(np.int64)
        rate = labels.mean()
        if not POSITIVE_RATE_BOUNDS[0] < rate < POSITIVE_RATE_BOUNDS[1]:
            raise DatasetError(f"Positive rate {rate:.4f} stays degenerate after adjusting the intercept.")
    return Dataset(ids=ids, labels=labels, scores=scores, noise=spec.noise, intercept=intercept, users=users)


def generate_splits(spec: SyntheticSpec) -> tuple:
    """(train, eval) datasets of the spec's sizes, drawn from seeds derived from spec.seed."""
    train = generate(spec, seed=spec.seed + 1, examples=spec.train_examples)
    evaluation = generate(spec, seed=spec.seed + 2, examples=spec.eval_examples)
    return train, evaluation


def oracle_ceiling_auc(dataset: Dataset) -> float:
    """Expected AUC of the planted score over the label randomness, in O(n log n).

    Each row is a positive with probability p_i (its noise-integrated label
    probability). The ceiling is E[correctly ordered pairs] / E[positive-negative
    pairs], ties counted one half.
    """
    p = _effective_probability(dataset.scores, dataset.noise)
    q = 1.0 - p
    order = np.argsort(dataset.scores, kind="stable")
    scores, p, q = dataset.scores[order], p[order], q[order]
    _, starts, counts = np.unique(scores, return_index=True, return_counts=True)
    group_q = np.add.reduceat(q, starts)
    below = np.concatenate([[0.0], np.cumsum(group_q)[:-1]])
    group_of = np.repeat(np.arange(starts.size), counts)
    ordered = p * (below[group_of] + 0.5 * (group_q[group_of] - q))
    pairs = p.sum() * q.sum() - (p * q).sum()
    if pairs <= 0:
        raise DatasetError("The planted model puts all mass on one class.")
    return float(ordered.sum() / pairs)
