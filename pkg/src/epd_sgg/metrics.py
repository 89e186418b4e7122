"""PredCls-style recall metrics: R@K, mR@K, group recalls and Mean."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datamodel import NO_RELATION, ImageRecord, PredicatePartition


@dataclass
class ImagePredictions:
    """Scores for every candidate pair of one image.

    ``scores[r, c]`` is the confidence of class ``c`` for ``pairs[r]``;
    column 0 (no relation) is never ranked.
    """

    pairs: np.ndarray   # [m, 2]
    scores: np.ndarray  # [m, C]


def gt_triplets(record: ImageRecord) -> np.ndarray:
    rows = [(r.subj, r.obj, r.predicate) for r in record.relations if r.predicate != NO_RELATION]
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def ranked_triplets(pred: ImagePredictions, graph_constraint: bool = True) -> np.ndarray:
    """(subj, obj, class) rows ordered by confidence, best first.

    Ties go to the smaller (subj, obj), then the smaller class.
    """
    pairs = np.asarray(pred.pairs, dtype=np.int64).reshape(-1, 2)
    scores = np.asarray(pred.scores, dtype=np.float64)
    m, C = scores.shape if scores.ndim == 2 else (0, 0)
    if m == 0 or C < 2:
        return np.zeros((0, 3), dtype=np.int64)
    pos = scores[:, 1:]
    if graph_constraint:
        cls = pos.argmax(axis=1) + 1  # argmax keeps the first (smallest) class on ties
        conf = pos[np.arange(m), cls - 1]
        s, o = pairs[:, 0], pairs[:, 1]
    else:
        cls = np.tile(np.arange(1, C), m)
        conf = pos.reshape(-1)
        s = np.repeat(pairs[:, 0], C - 1)
        o = np.repeat(pairs[:, 1], C - 1)
    order = np.lexsort((cls, o, s, -conf))
    return np.stack([s[order], o[order], cls[order]], axis=1)


def image_hits(gt: np.ndarray, pred: ImagePredictions, k: int, graph_constraint: bool = True) -> np.ndarray:
    """Boolean per ground-truth triplet: found among the top-k predictions."""
    if k < 1:
        raise ValueError("K must be >= 1")
    top = ranked_triplets(pred, graph_constraint)[:k]
    found = {tuple(int(v) for v in row) for row in top}
    return np.array([tuple(int(v) for v in row) in found for row in gt], dtype=bool)


def _exact_mean(values) -> float:
    # rational arithmetic keeps results independent of summation order
    values = list(values)
    return float(sum(values, Fraction(0)) / len(values)) if values else 0.0


def _collect(gts: Sequence[np.ndarray], preds: Sequence[ImagePredictions], k: int, graph_constraint: bool):
    if len(gts) != len(preds):
        raise ValueError("ground truth and predictions cover different numbers of images")
    return [image_hits(g, p, k, graph_constraint) for g, p in zip(gts, preds)]


def recall_at_k(gts: Sequence[np.ndarray], preds: Sequence[ImagePredictions], k: int,
                graph_constraint: bool = True) -> float:
    """Mean over images with ground truth of hits / #GT."""
    hits = _collect(gts, preds, k, graph_constraint)
    return _exact_mean(Fraction(int(h.sum()), len(h)) for h in hits if len(h) > 0)


def per_class_tallies(gts, hits) -> tuple[dict[int, int], dict[int, int]]:
    support: dict[int, int] = {}
    found: dict[int, int] = {}
    for g, h in zip(gts, hits):
        for cls, hit in zip(g[:, 2], h):
            cls = int(cls)
            support[cls] = support.get(cls, 0) + 1
            found[cls] = found.get(cls, 0) + int(hit)
    return support, found


def mean_recall_at_k(gts: Sequence[np.ndarray], preds: Sequence[ImagePredictions], k: int,
                     graph_constraint: bool = True) -> tuple[float, dict[int, float]]:
    """Unweighted mean of per-class recall (instances pooled across images)."""
    hits = _collect(gts, preds, k, graph_constraint)
    support, found = per_class_tallies(gts, hits)
    per_class = {c: Fraction(found[c], support[c]) for c in sorted(support)}
    return _exact_mean(per_class.values()), {c: float(v) for c, v in per_class.items()}


def _group_recall_exact(per_class: dict[int, Fraction], partition: PredicatePartition) -> dict[str, float | None]:
    groups: dict[str, list] = {"head": [], "body": [], "tail": []}
    names = ("head", "body", "tail")
    for c, r in per_class.items():
        groups[names[partition.block_of(c)]].append(r)
    return {g: (_exact_mean(v) if v else None) for g, v in groups.items()}


def group_recall(per_class: dict[int, float], partition: PredicatePartition) -> dict[str, float | None]:
    """Average per-class recall inside head/body/tail; None for a block without support."""
    return _group_recall_exact({c: Fraction(r) for c, r in per_class.items()}, partition)


def mean_metric(r_values: Iterable[float], mr_values: Iterable[float]) -> float:
    vals = list(r_values) + list(mr_values)
    if not vals:
        raise ValueError("Mean needs at least one R@K or mR@K value")
    return sum(vals) / len(vals)


@dataclass
class MetricsReport:
    ks: tuple[int, ...]
    r_at_k: dict[int, float]
    mr_at_k: dict[int, float]
    per_class_recall: dict[int, dict[int, float]]
    class_support: dict[int, int]
    group_recall: dict[int, dict[str, float | None]] = field(default_factory=dict)
    mean: float = 0.0
    graph_constraint: bool = True

    def to_json(self) -> dict:
        return {
            "ks": list(self.ks),
            "graph_constraint": self.graph_constraint,
            "r_at_k": {str(k): v for k, v in self.r_at_k.items()},
            "mr_at_k": {str(k): v for k, v in self.mr_at_k.items()},
            "mean": self.mean,
            "group_recall": {str(k): v for k, v in self.group_recall.items()},
            "per_class_recall": {str(k): {str(c): r for c, r in v.items()} for k, v in self.per_class_recall.items()},
            "class_support": {str(c): n for c, n in self.class_support.items()},
        }

    def write(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if csv_path is not None:
            self.write_csv(csv_path)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["class", "count"] + [f"recall@{k}" for k in self.ks])
            for c in sorted(self.class_support):
                w.writerow([c, self.class_support[c]] + [repr(self.per_class_recall[k].get(c, 0.0)) for k in self.ks])
            w.writerow([])
            w.writerow(["metric"] + [f"@{k}" for k in self.ks])
            w.writerow(["R"] + [repr(self.r_at_k[k]) for k in self.ks])
            w.writerow(["mR"] + [repr(self.mr_at_k[k]) for k in self.ks])
            for g in ("head", "body", "tail"):
                w.writerow([f"{g}"] + [repr(self.group_recall.get(k, {}).get(g)) for k in self.ks])
            w.writerow(["Mean", repr(self.mean)])


def evaluate(gts: Sequence[np.ndarray], preds: Sequence[ImagePredictions], ks: Sequence[int] = (5, 10),
             partition: PredicatePartition | None = None, graph_constraint: bool = True) -> MetricsReport:
    ks = tuple(int(k) for k in ks)
    r, mr, per_class, groups = {}, {}, {}, {}
    support: dict[int, int] = {}
    for k in ks:
        hits = _collect(gts, preds, k, graph_constraint)
        r[k] = _exact_mean(Fraction(int(h.sum()), len(h)) for h in hits if len(h) > 0)
        support, found = per_class_tallies(gts, hits)
        exact = {c: Fraction(found[c], support[c]) for c in sorted(support)}
        per_class[k] = {c: float(v) for c, v in exact.items()}
        mr[k] = _exact_mean(exact.values())
        if partition is not None:
            groups[k] = _group_recall_exact(exact, partition)
    return MetricsReport(
        ks=ks, r_at_k=r, mr_at_k=mr, per_class_recall=per_class,
        class_support=dict(sorted(support.items())), group_recall=groups,
        mean=mean_metric(r.values(), mr.values()), graph_constraint=graph_constraint,
    )
