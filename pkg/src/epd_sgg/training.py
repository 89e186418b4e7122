"""SGD training loop and model evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .datamodel import (
    Dataset,
    DataError,
    ImageRecord,
    PredicatePartition,
    assign_subsets,
    compute_frequency_table,
    partition_predicates,
)
from .epd import positive_distribution, predict
from .metrics import ImagePredictions, MetricsReport, evaluate, gt_triplets
from .model import RelationModel, collate
from .numcore import NumericError, sgd_step

log = logging.getLogger(__name__)


def check_compatible(cfg: RunConfig, dataset: Dataset) -> None:
    h = dataset.header
    if h.d_v != cfg.d_v:
        raise DataError(f"dataset d_v={h.d_v} but config d_v={cfg.d_v}")
    if h.num_object_classes != cfg.num_object_classes:
        raise DataError(f"dataset has {h.num_object_classes} object classes, config {cfg.num_object_classes}")
    if h.num_predicate_classes != cfg.num_predicate_classes:
        raise DataError(f"dataset has {h.num_predicate_classes} predicate classes, config {cfg.num_predicate_classes}")


def make_partition(cfg: RunConfig, train_set: Dataset) -> PredicatePartition:
    freq = compute_frequency_table(train_set)
    return partition_predicates(freq, cfg.cardinalities)


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    l_md: float
    l_ad1: float
    l_ad2: float
    l_agg: float
    l_obj: float
    l_total: float
    counts: dict[str, int] = field(default_factory=dict)
    metrics: dict | None = None

    def to_json(self) -> dict:
        out = {
            "epoch": self.epoch, "steps": self.steps,
            "l_md": self.l_md, "l_ad1": self.l_ad1, "l_ad2": self.l_ad2,
            "l_agg": self.l_agg, "l_obj": self.l_obj, "l_total": self.l_total,
            "counts": self.counts,
        }
        if self.metrics is not None:
            out["metrics"] = self.metrics
        return out


def train(model: RelationModel, train_set: Dataset, partition: PredicatePartition,
          on_epoch: Callable[[EpochRecord, RelationModel], None] | None = None) -> list[EpochRecord]:
    """Train in place for ``model.config.epochs`` epochs; returns the epoch log."""
    cfg = model.config
    check_compatible(cfg, train_set)
    assignment = assign_subsets(partition, cfg.subset_mode)
    images = [img for img in train_set.images if any(r.predicate > 0 for r in img.relations)]
    if not images:
        raise DataError("training set has no positive relations")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBA7C]))
    params = model.parameters()
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(images))
        sums = np.zeros(6)
        counts: dict[str, int] = {}
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = collate([images[i] for i in order[start:start + cfg.batch_size]], positive_only=True)
            try:
                model.zero_grad()
                fwd = model.forward(batch, mode="train")
                total, br = model.loss(fwd, batch, partition, assignment)
                total.backward()
                sgd_step(params, cfg.lr)
            except NumericError as e:
                raise NumericError(f"epoch {epoch} step {steps + 1}: {e}") from e
            sums += (br.l_md, br.l_ad1, br.l_ad2, br.l_agg, br.l_obj, br.l_total)
            for k, v in br.counts.items():
                counts[k] = counts.get(k, 0) + v
            steps += 1
        means = sums / max(steps, 1)
        rec = EpochRecord(epoch, steps, *(float(v) for v in means), counts=counts)
        log.info("epoch %d l_total=%.4f", epoch, rec.l_total)
        if on_epoch is not None:
            on_epoch(rec, model)
        history.append(rec)
    return history


def predictions_from_logits(batch, logits, lambdas, num_images: int, decoder_mode: str = "multi") -> list[ImagePredictions]:
    if decoder_mode == "single":
        probs = positive_distribution(logits[0])
    else:
        probs, _ = predict(*logits, lambdas)
    preds = []
    for i in range(num_images):
        rows = batch.image_index == i
        preds.append(ImagePredictions(batch.local_pairs[rows], probs[rows]))
    return preds


def predict_images(model: RelationModel, images: Sequence[ImageRecord],
                   lambdas: Sequence[float] | None = None) -> list[ImagePredictions]:
    lambdas = tuple(model.hyper.lambdas if lambdas is None else lambdas)
    batch, logits = model.relation_logits(list(images))
    return predictions_from_logits(batch, logits, lambdas, len(images), model.hyper.decoder_mode)


def evaluate_model(model: RelationModel, dataset: Dataset, partition: PredicatePartition | None = None,
                   ks: Sequence[int] | None = None, lambdas: Sequence[float] | None = None,
                   graph_constraint: bool | None = None) -> MetricsReport:
    cfg = model.config
    check_compatible(cfg, dataset)
    preds = predict_images(model, dataset.images, lambdas)
    gts = [gt_triplets(img) for img in dataset.images]
    return evaluate(
        gts, preds, ks or cfg.k_list, partition,
        cfg.graph_constraint if graph_constraint is None else graph_constraint,
    )
