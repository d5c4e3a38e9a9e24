from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from src.model.feedforward import xavier_normal
from src.model.tensor import Tensor, concat, gather, matmul, reduce_mean, reshape, swish


class TokenizerException(Exception):
    """Base class for Exceptions of Tokenizer"""
    def __init__(self, message: str):
        """Base class for Exceptions of Tokenizer"""
        super().__init__(message)

class EmbeddingLookupError(TokenizerException):
    """A feature id is outside the vocabulary of its feature."""

class MissingFeatureError(TokenizerException):
    """An embedding needed by a group is not present."""

class WidthMismatchError(TokenizerException):
    """An embedding or feature layout does not match the tokenizer."""


@dataclass(frozen=True)
class FeatureSpec:
    """One sparse categorical feature and the semantic group it belongs to."""
    name: str
    cardinality: int
    emb_dim: int
    group: int

    def __post_init__(self) -> None:
        if self.cardinality < 1 or self.emb_dim < 1 or self.group < 0:
            raise WidthMismatchError(
                f"Feature '{self.name}' needs cardinality >= 1, emb_dim >= 1 and group >= 0, "
                f"got {self.cardinality}, {self.emb_dim}, {self.group}."
            )


class Tokenizer:
    """Turns feature ids into T dimension-aligned tokens.

    Every semantic group is projected from the concat of its features' embeddings
    to width D by a bias-free MLP. The optional global token is projected from the
    concat of all embeddings and always sits at token 0.
    """
    def __init__(
            self,
            features: Sequence[FeatureSpec],
            dim: int,
            rng: np.random.Generator,
            dtype: type = np.float64,
            global_token: bool = True,
            layers: int = 1,
            embedding_std: float = 0.1
            ) -> None:
        """Build the embedding tables and projections.

        Parameters
        ----------
        features: the feature layout; group ids must be exactly 0..G-1.
        dim: the token width D.
        rng: source of the initial weights.
        dtype: numpy precision of every parameter.
        global_token: whether token 0 is the global token.
        layers: 1 for a single linear projection, 2 for linear-Swish-linear.
        embedding_std: standard deviation of the initial embedding rows.
        """
        if not features:
            raise WidthMismatchError("At least one feature is required.")
        group_ids = sorted({feature.group for feature in features})
        if group_ids != list(range(len(group_ids))):
            raise WidthMismatchError(f"Group ids must be contiguous from 0, got {group_ids}.")
        if layers not in (1, 2):
            raise WidthMismatchError(f"Tokenizer projections have 1 or 2 layers, got {layers}.")

        self.__features = tuple(features)
        self.__dim = dim
        self.__global_token = global_token
        self.__groups = [[f for f in features if f.group == g] for g in group_ids]
        self.tables = {
            f.name: Tensor(rng.standard_normal((f.cardinality, f.emb_dim)) * embedding_std, requires_grad=True, dtype=dtype)
            for f in features
        }
        self.group_projections = [
            self.__projection(sum(f.emb_dim for f in group), layers, rng, dtype) for group in self.__groups
        ]
        self.global_projection = (
            self.__projection(sum(f.emb_dim for f in features), layers, rng, dtype) if global_token else []
        )

    def __projection(self, width: int, layers: int, rng: np.random.Generator, dtype: type) -> list:
        shapes = [(width, self.__dim)] + [(self.__dim, self.__dim)] * (layers - 1)
        return [Tensor(xavier_normal(shape, 1.0, rng, dtype), requires_grad=True) for shape in shapes]

    @property
    def features(self) -> tuple:
        """The feature layout."""
        return self.__features

    @property
    def dim(self) -> int:
        """The token width D."""
        return self.__dim

    @property
    def tokens(self) -> int:
        """Token count T: one per group plus the global token."""
        return len(self.__groups) + (1 if self.__global_token else 0)

    def embedding_parameters(self) -> list:
        """The embedding tables, trained with the sparse learning rate."""
        return list(self.tables.values())

    def dense_parameters(self) -> list:
        """The projection weights."""
        params = [w for projection in self.group_projections for w in projection]
        return params + list(self.global_projection)

    def embed(self, ids: np.ndarray) -> dict:
        """Look up one embedding per feature.

        Parameters
        ----------
        ids: integer array (B, F), column i holding ids of feature i.

        Returns
        -------
        Mapping from feature name to a (B, d_i) tensor.

        Raises
        ------
        EmbeddingLookupError naming the feature and the first offending id.
        """
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[1] != len(self.__features):
            raise WidthMismatchError(f"Expected ids of shape (B, {len(self.__features)}), got {ids.shape}.")
        embeddings = {}
        for column, feature in enumerate(self.__features):
            values = ids[:, column]
            bad = (values < 0) | (values >= feature.cardinality)
            if bad.any():
                raise EmbeddingLookupError(
                    f"Feature '{feature.name}' has no id {int(values[bad][0])} (cardinality {feature.cardinality})."
                )
            embeddings[feature.name] = gather(self.tables[feature.name], values, axis=0)
        return embeddings

    def tokenize(self, embeddings: Mapping) -> Tensor:
        """Project embeddings to the (B, T, D) token matrix, global token first."""
        batch = None
        for feature in self.__features:
            if feature.name not in embeddings:
                raise MissingFeatureError(f"Embedding of feature '{feature.name}' is missing.")
            embedding = embeddings[feature.name]
            if embedding.shape[-1] != feature.emb_dim or (batch is not None and embedding.shape[0] != batch):
                raise WidthMismatchError(
                    f"Embedding of '{feature.name}' has shape {embedding.shape}, expected (B, {feature.emb_dim})."
                )
            batch = embedding.shape[0]

        tokens = []
        if self.__global_token:
            everything = concat([embeddings[f.name] for f in self.__features], axis=1)
            tokens.append(self.__project(everything, self.global_projection))
        for group, projection in zip(self.__groups, self.group_projections):
            group_input = concat([embeddings[f.name] for f in group], axis=1)
            tokens.append(self.__project(group_input, projection))
        return concat([reshape(token, (batch, 1, self.__dim)) for token in tokens], axis=1)

    @staticmethod
    def __project(x: Tensor, projection: list) -> Tensor:
        out = matmul(x, projection[0])
        for weight in projection[1:]:
            out = matmul(swish(out), weight)
        return out

    def forward(self, ids: np.ndarray) -> Tensor:
        """embed then tokenize."""
        return self.tokenize(self.embed(ids))


def mean_pool(tokens: Tensor) -> Tensor:
    """Mean over the token axis of a (B, T, W) matrix."""
    return reduce_mean(tokens, axis=1)
