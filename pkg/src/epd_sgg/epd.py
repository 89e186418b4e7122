"""Ensemble predicate decoding head.

Three decoder branches share the pair expansion, the decoder trunk and the
classifier; each owns a batch-norm layer. Losses are masked per decoder by
predicate subset, and inference uses a weighted sum of the branch logits.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datamodel import NO_RELATION, PredicatePartition, SubsetAssignment
from .numcore import (
    Affine,
    BatchNormState,
    DimensionError,
    Stack,
    Tensor,
    batchnorm,
    concat,
    hadamard,
    linear_combination,
    softmax,
    softmax_cross_entropy,
)

BRANCHES = ("md", "ad1", "ad2")
LAMBDA_PRESETS = {
    "best_mean": (0.5, 0.2, 0.3),
    "best_mr": (0.4, 0.2, 0.4),
}
LOSS_MODES = ("epd", "reweighted", "ce")


@dataclass
class EpdHyper:
    alpha: float = 8.0
    beta: float = 10.0
    gamma: float = 0.01
    lambdas: tuple[float, float, float] = LAMBDA_PRESETS["best_mean"]
    bn_enabled: bool = True
    shared_fpd: bool = True
    decoder_mode: str = "multi"
    loss_mode: str = "epd"

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if len(self.lambdas) != 3 or min(self.lambdas) < 0:
            raise ValueError("lambda needs three non-negative weights")
        if self.decoder_mode not in ("single", "multi"):
            raise ValueError(f"unknown decoder mode {self.decoder_mode!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        md, ad1, ad2 = self.lambdas
        if not md > ad2 > ad1:
            warnings.warn(
                f"lambda {self.lambdas} breaks the usual ordering md > ad2 > ad1",
                stacklevel=2,
            )


@dataclass
class EpdHead:
    pair_expand: Affine
    decoders: list[Stack]  # one shared stack, or three when F_p_d is unshared
    bns: dict[str, BatchNormState]
    classifier: Affine
    shared_fpd: bool = True

    @classmethod
    def create(cls, rng, d_p: int, d_v: int, d_h: int, num_classes: int,
               shared_fpd: bool = True, activation: str = "relu",
               bn_momentum: float = 0.1, bn_epsilon: float = 1e-5) -> "EpdHead":
        pair_expand = Affine.create(rng, 2 * d_p, d_v, "head.pair_expand")
        n_dec = 1 if shared_fpd else 3
        names = ["head.decoder"] if shared_fpd else [f"head.decoder_{b}" for b in BRANCHES]
        decoders = [Stack.create(rng, [d_v, d_h, d_h], names[k], activation) for k in range(n_dec)]
        bns = {b: BatchNormState.create(d_h, bn_momentum, bn_epsilon, name=f"head.bn_{b}") for b in BRANCHES}
        classifier = Affine.create(rng, d_h, num_classes, "head.classifier")
        return cls(pair_expand, decoders, bns, classifier, shared_fpd)

    def parameters(self) -> list[Tensor]:
        out = list(self.pair_expand.parameters())
        for d in self.decoders:
            out += d.parameters()
        for b in BRANCHES:
            out += [self.bns[b].gamma, self.bns[b].beta]
        out += self.classifier.parameters()
        return out

    @property
    def num_classes(self) -> int:
        return self.classifier.W.shape[1]


@dataclass
class LossBreakdown:
    l_md: float = 0.0
    l_ad1: float = 0.0
    l_ad2: float = 0.0
    l_agg: float = 0.0
    l_obj: float = 0.0
    l_total: float = 0.0
    counts: dict[str, int] = field(default_factory=dict)
    # single-decoder ablation: per-block losses and their weights
    block_losses: tuple[float, ...] = ()
    block_coefficients: tuple[float, ...] = ()

    def recompose(self, alpha: float, beta: float, gamma: float, obj_weight: float = 1.0) -> float:
        return (1 - gamma) * (self.l_md + alpha * self.l_ad1 + beta * self.l_ad2) + gamma * self.l_agg + obj_weight * self.l_obj


def decode_branches(head: EpdHead, p_i, p_j, union, hyper: EpdHyper, mode: str = "train") -> list[Tensor]:
    """Branch decoding features for md, ad1, ad2.

    The product with the union feature happens before the decoder trunk.
    Every relation passes through every branch; masking is left to the
    losses. In single-decoder mode the one branch is returned three times.
    """
    pair = concat([p_i, p_j])
    expanded = head.pair_expand(pair)
    union = union if isinstance(union, Tensor) else Tensor(union)
    if expanded.shape != union.shape:
        raise DimensionError(f"expanded pair {expanded.shape} does not match union feature {union.shape}")
    gated = hadamard(expanded, union)
    if hyper.decoder_mode == "single":
        trunk = head.decoders[0](gated)
        out = batchnorm(trunk, head.bns["md"], mode) if hyper.bn_enabled else trunk
        return [out, out, out]
    if head.shared_fpd:
        trunk = head.decoders[0](gated)
        trunks = [trunk, trunk, trunk]
    else:
        trunks = [dec(gated) for dec in head.decoders]
    if not hyper.bn_enabled:
        return trunks
    return [batchnorm(t, head.bns[b], mode) for t, b in zip(trunks, BRANCHES)]


def classify(head: EpdHead, branch_features: Sequence[Tensor]) -> list[Tensor]:
    """Shared classifier over each branch; identical branch tensors share one call."""
    cache: dict[int, Tensor] = {}
    out = []
    for f in branch_features:
        if id(f) not in cache:
            cache[id(f)] = head.classifier(f)
        out.append(cache[id(f)])
    return out


def decoder_losses(z_md, z_ad1, z_ad2, labels, assignment: SubsetAssignment) -> tuple[list[Tensor], dict[str, int]]:
    """Per-decoder mean CE over the batch rows whose label lies in that decoder's subset."""
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = z_md.shape[1]
    masks = assignment.masks(num_classes)
    losses, counts = [], {}
    for name, z, cls_mask in zip(BRANCHES, (z_md, z_ad1, z_ad2), masks):
        rows = cls_mask[labels]
        counts[name] = int(rows.sum())
        losses.append(softmax_cross_entropy(z, labels, rows))
    return losses, counts


def aggregate_logits(z_md, z_ad1, z_ad2, lambdas: Sequence[float]) -> Tensor:
    if min(lambdas) < 0:
        raise ValueError("aggregation weights must be non-negative")
    return linear_combination([z_md, z_ad1, z_ad2], lambdas)


def aggregated_loss(z_sum, labels) -> Tensor:
    return softmax_cross_entropy(z_sum, labels)


def total_loss(l_md, l_ad1, l_ad2, l_agg, alpha: float, beta: float, gamma: float,
               l_obj: Tensor | None = None, obj_weight: float = 1.0) -> Tensor:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    terms = [l_md, l_ad1, l_ad2, l_agg]
    coeffs = [1 - gamma, (1 - gamma) * alpha, (1 - gamma) * beta, gamma]
    if l_obj is not None:
        terms.append(l_obj)
        coeffs.append(obj_weight)
    return linear_combination(terms, coeffs)


def single_decoder_coefficients(alpha: float, beta: float, gamma: float) -> tuple[float, float, float]:
    return (1.0, (1 + alpha) * (1 - gamma), (1 + alpha + beta) * (1 - gamma))


def single_decoder_loss(z, labels, partition: PredicatePartition, alpha: float, beta: float, gamma: float) -> tuple[Tensor, list[Tensor], dict[str, int]]:
    """Block-reweighted loss of the one-decoder ablation.

    Head, body and tail rows each get their own batch-mean CE, weighted
    1, (1+alpha)(1-gamma) and (1+alpha+beta)(1-gamma).
    """
    labels = np.asarray(labels, dtype=np.int64)
    blocks = partition.block_array(z.shape[1])[labels]
    block_losses, counts = [], {}
    for b, name in enumerate(("head", "body", "tail")):
        rows = blocks == b
        counts[name] = int(rows.sum())
        block_losses.append(softmax_cross_entropy(z, labels, rows))
    total = linear_combination(block_losses, single_decoder_coefficients(alpha, beta, gamma))
    return total, block_losses, counts


def positive_distribution(z: np.ndarray) -> np.ndarray:
    """Softmax over the positive classes; the no-relation column is zeroed."""
    z = np.asarray(z, dtype=np.float64)
    probs = np.zeros_like(z)
    probs[:, 1:] = softmax(z[:, 1:])
    return probs


def predict(z_md, z_ad1, z_ad2, lambdas: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Ranked prediction from aggregated logits: (distribution, argmax class)."""
    z_sum = aggregate_logits(z_md, z_ad1, z_ad2, lambdas).value
    probs = positive_distribution(z_sum)
    return probs, probs[:, 1:].argmax(axis=1) + 1


PANELS = ("MD", "MD+AD1", "MD+AD1+AD2")


def combination_logits(z_md, z_ad1, z_ad2, lambdas: Sequence[float]) -> list[np.ndarray]:
    """Logits of the progressive combinations MD, MD+AD1, MD+AD1+AD2.

    Weights are renormalized over the included decoders so that the three
    softmaxes are on a comparable temperature.
    """
    lam = [float(v) for v in lambdas]
    zs = [np.asarray(getattr(z, "value", z), dtype=np.float64) for z in (z_md, z_ad1, z_ad2)]
    out = []
    for n in (1, 2, 3):
        total = sum(lam[:n])
        if total <= 0:
            out.append(zs[0])
            continue
        acc = np.zeros_like(zs[0])
        for w, z in zip(lam[:n], zs[:n]):
            acc += (w / total) * z
        out.append(acc)
    return out


def explain(z_md, z_ad1, z_ad2, lambdas: Sequence[float], top_n: int) -> list[list[list[tuple[int, float]]]]:
    """Top-n (class, score) tables per relation row for each decoder combination.

    Returns ``tables[panel][row]``.
    """
    num_classes = np.asarray(getattr(z_md, "value", z_md)).shape[1]
    if top_n < 1 or top_n > num_classes - 1:
        raise ValueError(f"top_n must lie in [1, {num_classes - 1}]")
    tables = []
    for logits in combination_logits(z_md, z_ad1, z_ad2, lambdas):
        probs = positive_distribution(logits)
        panel = []
        for row in probs:
            cls = np.arange(1, num_classes)
            order = np.lexsort((cls, -row[1:]))[:top_n]
            panel.append([(int(cls[k]), float(row[1:][k])) for k in order])
        tables.append(panel)
    return tables


def class_ranks(z_md, z_ad1, z_ad2, lambdas: Sequence[float], classes) -> np.ndarray:
    """1-based rank of ``classes[r]`` among positive classes, per panel and row."""
    classes = np.asarray(classes, dtype=np.int64)
    ranks = []
    for logits in combination_logits(z_md, z_ad1, z_ad2, lambdas):
        pos = logits[:, 1:]
        target = pos[np.arange(len(classes)), classes - 1]
        cls = np.arange(1, logits.shape[1])
        ahead = (pos > target[:, None]) | ((pos == target[:, None]) & (cls[None, :] < classes[:, None]))
        ranks.append(ahead.sum(axis=1) + 1)
    return np.stack(ranks)


__all__ = [
    "BRANCHES", "LAMBDA_PRESETS", "NO_RELATION", "PANELS",
    "EpdHead", "EpdHyper", "LossBreakdown",
    "aggregate_logits", "aggregated_loss", "class_ranks", "classify", "combination_logits",
    "decode_branches", "decoder_losses", "explain", "positive_distribution", "predict",
    "single_decoder_coefficients", "single_decoder_loss", "total_loss",
]
