"""Object encoding/decoding and per-object predicate encoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import (
    Affine,
    DimensionError,
    Stack,
    Tensor,
    concat,
    embedding_lookup,
    parameter,
    softmax,
    uniform_init,
)


@dataclass
class EncoderDims:
    d_v: int = 32
    d_s: int = 16
    d_g: int = 16
    d_o: int = 64
    d_p: int = 64
    num_object_classes: int = 20


@dataclass
class EncoderParams:
    spatial_embed: Affine
    semantic_table: Tensor
    object_encoder: Stack
    object_classifier: Affine
    predicate_encoder: Stack

    @classmethod
    def create(cls, rng: np.random.Generator, dims: EncoderDims, activation: str = "relu") -> "EncoderParams":
        d = dims
        return cls(
            spatial_embed=Affine.create(rng, 4, d.d_s, "enc.spatial"),
            semantic_table=parameter(uniform_init(rng, (d.num_object_classes, d.d_g), d.d_g), "enc.semantic"),
            object_encoder=Stack.create(rng, [d.d_v + d.d_s + d.d_g, d.d_o, d.d_o], "enc.object", activation),
            object_classifier=Affine.create(rng, d.d_o, d.num_object_classes, "enc.object_cls"),
            predicate_encoder=Stack.create(rng, [d.d_g + d.d_o + d.d_v, d.d_p, d.d_p], "enc.predicate", activation),
        )

    def parameters(self) -> list[Tensor]:
        return [
            *self.spatial_embed.parameters(),
            self.semantic_table,
            *self.object_encoder.parameters(),
            *self.object_classifier.parameters(),
            *self.predicate_encoder.parameters(),
        ]


def embed_spatial(params: EncoderParams, bboxes) -> Tensor:
    """Lift (x1, y1, x2, y2) boxes of shape (n, 4) to spatial features."""
    return params.spatial_embed(bboxes)


def semantic_features(params: EncoderParams, labels) -> Tensor:
    return embedding_lookup(params.semantic_table, labels)


def encode_object(params: EncoderParams, visual, spatial, semantic) -> Tensor:
    x = concat([visual, spatial, semantic])
    if x.shape[1] != params.object_encoder.d_in:
        raise DimensionError(f"object encoder expects {params.object_encoder.d_in} inputs, got {x.shape[1]}")
    return params.object_encoder(x)


def decode_object(params: EncoderParams, refined) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Returns (logits, class distribution, refined labels)."""
    logits = params.object_classifier(refined)
    probs = softmax(logits.value.astype(np.float64))
    return logits, probs, probs.argmax(axis=1)


def encode_predicate(params: EncoderParams, refined_semantic, refined, visual) -> Tensor:
    x = concat([refined_semantic, refined, visual])
    if x.shape[1] != params.predicate_encoder.d_in:
        raise DimensionError(f"predicate encoder expects {params.predicate_encoder.d_in} inputs, got {x.shape[1]}")
    return params.predicate_encoder(x)
