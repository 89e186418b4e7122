"""Relation dataset records, JSON-lines I/O, frequency partitioning and the
synthetic long-tailed generator."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
NO_RELATION = 0
SUBSET_MODES = ("nested", "disjoint", "md_full_disjoint_aux")


class DataError(ValueError):
    pass


@dataclass
class ObjectInstance:
    label: int
    bbox: tuple[float, float, float, float]
    visual: np.ndarray


@dataclass
class RelationInstance:
    subj: int
    obj: int
    predicate: int
    union: np.ndarray


@dataclass
class ImageRecord:
    image_id: str
    objects: list[ObjectInstance] = field(default_factory=list)
    relations: list[RelationInstance] = field(default_factory=list)


@dataclass
class DatasetHeader:
    d_v: int
    num_object_classes: int
    # vocabulary size including the no-relation class 0
    num_predicate_classes: int
    version: int = FORMAT_VERSION

    @property
    def num_positive_predicates(self) -> int:
        return self.num_predicate_classes - 1


@dataclass
class Dataset:
    header: DatasetHeader
    images: list[ImageRecord]

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)


def validate_record(rec: ImageRecord, header: DatasetHeader) -> None:
    n = len(rec.objects)
    if rec.relations and n < 2:
        raise DataError(f"image {rec.image_id!r}: relations need at least two objects")
    for k, o in enumerate(rec.objects):
        x1, y1, x2, y2 = o.bbox
        if not (x1 < x2 and y1 < y2):
            raise DataError(f"image {rec.image_id!r}: object {k} has a degenerate bbox")
        if not 0 <= o.label < header.num_object_classes:
            raise DataError(f"image {rec.image_id!r}: object {k} label {o.label} out of range")
        if o.visual.shape != (header.d_v,):
            raise DataError(f"image {rec.image_id!r}: object {k} visual dim {o.visual.shape[0]} != d_v {header.d_v}")
        if not np.isfinite(o.visual).all():
            raise DataError(f"image {rec.image_id!r}: object {k} visual feature is not finite")
    pairs = set()
    for k, r in enumerate(rec.relations):
        if r.subj == r.obj:
            raise DataError(f"image {rec.image_id!r}: relation {k} links an object to itself")
        if not (0 <= r.subj < n and 0 <= r.obj < n):
            raise DataError(f"image {rec.image_id!r}: relation {k} references a missing object")
        if not 0 <= r.predicate < header.num_predicate_classes:
            raise DataError(f"image {rec.image_id!r}: relation {k} predicate {r.predicate} out of range")
        if (r.subj, r.obj) in pairs:
            raise DataError(f"image {rec.image_id!r}: duplicate pair ({r.subj}, {r.obj})")
        pairs.add((r.subj, r.obj))
        if r.union.shape != (header.d_v,):
            raise DataError(f"image {rec.image_id!r}: relation {k} union dim {r.union.shape[0]} != d_v {header.d_v}")
        if not np.isfinite(r.union).all():
            raise DataError(f"image {rec.image_id!r}: relation {k} union feature is not finite")


def _floats(arr: np.ndarray) -> list[float]:
    # float32 -> python float is exact, and json writes the shortest repr of that double
    return [float(x) for x in arr]


def record_to_json(rec: ImageRecord) -> dict:
    return {
        "image_id": rec.image_id,
        "objects": [
            {"label": int(o.label), "bbox": [float(v) for v in o.bbox], "visual": _floats(o.visual)}
            for o in rec.objects
        ],
        "relations": [
            {"subj": int(r.subj), "obj": int(r.obj), "predicate": int(r.predicate), "union": _floats(r.union)}
            for r in rec.relations
        ],
    }


def record_from_json(d: dict) -> ImageRecord:
    objects = [
        ObjectInstance(
            label=int(o["label"]),
            bbox=tuple(float(v) for v in o["bbox"]),
            visual=np.asarray(o["visual"], dtype=np.float32),
        )
        for o in d["objects"]
    ]
    for o in objects:
        if len(o.bbox) != 4:
            raise DataError("bbox must have four coordinates")
    relations = [
        RelationInstance(
            subj=int(r["subj"]),
            obj=int(r["obj"]),
            predicate=int(r["predicate"]),
            union=np.asarray(r["union"], dtype=np.float32),
        )
        for r in d["relations"]
    ]
    return ImageRecord(image_id=str(d["image_id"]), objects=objects, relations=relations)


def save_dataset(dataset: Dataset, path) -> None:
    h = dataset.header
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({
            "version": h.version,
            "d_v": h.d_v,
            "num_object_classes": h.num_object_classes,
            "num_predicate_classes": h.num_predicate_classes,
        }) + "\n")
        for rec in dataset.images:
            f.write(json.dumps(record_to_json(rec), separators=(",", ":")) + "\n")


def load_dataset(path) -> Dataset:
    """Read and validate a JSON-lines dataset; errors carry the line number."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file, expected a header line")
    try:
        hd = json.loads(lines[0])
        header = DatasetHeader(
            d_v=int(hd["d_v"]),
            num_object_classes=int(hd["num_object_classes"]),
            num_predicate_classes=int(hd["num_predicate_classes"]),
            version=int(hd.get("version", FORMAT_VERSION)),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}:1: bad header: {e}") from e
    if header.version != FORMAT_VERSION:
        raise DataError(f"{path}:1: unsupported version {header.version}")
    images = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = record_from_json(json.loads(line))
            validate_record(rec, header)
        except DataError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}:{lineno}: malformed record: {e}") from e
        images.append(rec)
    return Dataset(header, images)


# -- frequency statistics and partitions ------------------------------------

@dataclass
class FrequencyTable:
    counts: np.ndarray  # indexed by predicate class; counts[0] is always 0

    @property
    def num_positive(self) -> int:
        return len(self.counts) - 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def compute_frequency_table(dataset: Dataset | Iterable[ImageRecord], num_predicate_classes: int | None = None) -> FrequencyTable:
    if isinstance(dataset, Dataset):
        num_predicate_classes = num_predicate_classes or dataset.header.num_predicate_classes
        images = dataset.images
    else:
        images = list(dataset)
    if not images:
        raise DataError("cannot count predicates of an empty dataset")
    labels = [r.predicate for img in images for r in img.relations if r.predicate != NO_RELATION]
    if num_predicate_classes is None:
        num_predicate_classes = max(labels, default=0) + 1
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_predicate_classes)
    counts[NO_RELATION] = 0
    return FrequencyTable(counts.astype(np.int64))


@dataclass(frozen=True)
class PredicatePartition:
    head: frozenset
    body: frozenset
    tail: frozenset

    def block_of(self, cls: int) -> int:
        if cls in self.head:
            return 0
        if cls in self.body:
            return 1
        if cls in self.tail:
            return 2
        raise KeyError(f"class {cls} is not in the partition")

    @property
    def all_classes(self) -> frozenset:
        return self.head | self.body | self.tail

    def block_array(self, num_classes: int) -> np.ndarray:
        """Block id per class index (0 head, 1 body, 2 tail, -1 unassigned)."""
        out = np.full(num_classes, -1, dtype=np.int64)
        for b, block in enumerate((self.head, self.body, self.tail)):
            for c in block:
                out[c] = b
        return out

    def to_json(self) -> dict:
        return {"head": sorted(self.head), "body": sorted(self.body), "tail": sorted(self.tail)}

    @classmethod
    def from_json(cls, d: dict) -> "PredicatePartition":
        return cls(frozenset(d["head"]), frozenset(d["body"]), frozenset(d["tail"]))


def partition_predicates(freq: FrequencyTable, cardinalities: Sequence[int] = (5, 10, 35)) -> PredicatePartition:
    h, b, t = cardinalities
    if min(h, b, t) < 1:
        raise ValueError("every block needs at least one class")
    if h + b + t != freq.num_positive:
        raise ValueError(f"cardinalities {tuple(cardinalities)} do not sum to {freq.num_positive} predicate classes")
    classes = np.arange(1, len(freq.counts))
    # lexsort: last key is primary -> descending count, then ascending class
    order = classes[np.lexsort((classes, -freq.counts[1:]))]
    ranked = [int(c) for c in order]
    return PredicatePartition(
        head=frozenset(ranked[:h]),
        body=frozenset(ranked[h:h + b]),
        tail=frozenset(ranked[h + b:]),
    )


@dataclass(frozen=True)
class SubsetAssignment:
    md: frozenset
    ad1: frozenset
    ad2: frozenset
    mode: str

    def masks(self, num_classes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Boolean class-membership vectors for the three decoders."""
        out = []
        for s in (self.md, self.ad1, self.ad2):
            m = np.zeros(num_classes, dtype=bool)
            m[list(s)] = True
            out.append(m)
        return tuple(out)


def assign_subsets(p: PredicatePartition, mode: str = "nested") -> SubsetAssignment:
    full = p.head | p.body | p.tail
    if mode == "nested":
        return SubsetAssignment(full, p.body | p.tail, p.tail, mode)
    if mode == "disjoint":
        return SubsetAssignment(p.head, p.body, p.tail, mode)
    if mode == "md_full_disjoint_aux":
        return SubsetAssignment(full, p.body, p.tail, mode)
    raise ValueError(f"unknown subset mode {mode!r}; expected one of {SUBSET_MODES}")


# -- synthetic generator ----------------------------------------------------

@dataclass
class GeneratorConfig:
    num_images: int = 2000
    objects_per_image: tuple[int, int] = (3, 6)
    relations_per_image: tuple[int, int] = (2, 6)
    num_object_classes: int = 20
    num_predicates: int = 50
    zipf_s: float = 1.5
    d_v: int = 32
    noise: float = 0.3
    similar_pairs: tuple[tuple[int, int, float], ...] = ((1, 18, 0.3), (2, 24, 0.3), (3, 30, 0.3))
    neg_frac: float = 0.2

    def validate(self) -> None:
        lo, hi = self.objects_per_image
        rlo, rhi = self.relations_per_image
        if self.num_images < 1:
            raise ValueError("num_images must be positive")
        if lo < 2 or hi < lo:
            raise ValueError("objects_per_image must be a range with minimum >= 2")
        if rlo < 1 or rhi < rlo:
            raise ValueError("relations_per_image must be a non-empty range with minimum >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0 <= self.neg_frac < 1:
            raise ValueError("neg_frac must lie in [0, 1)")
        if self.num_predicates < 1 or self.num_object_classes < 1 or self.d_v < 1:
            raise ValueError("vocabulary sizes and d_v must be positive")
        if self.zipf_s < 0:
            raise ValueError("zipf_s must be >= 0")
        for f, r, delta in self.similar_pairs:
            if delta <= 0:
                raise ValueError("similar-pair delta must be > 0")
            if not (1 <= f <= self.num_predicates and 1 <= r <= self.num_predicates) or f == r:
                raise ValueError(f"similar pair ({f}, {r}) is not a pair of distinct predicate classes")


def zipf_probabilities(num_classes: int, s: float) -> np.ndarray:
    """P(class k) proportional to k^-s for k = 1..num_classes (index 0 -> class 1)."""
    w = np.arange(1, num_classes + 1, dtype=np.float64) ** -s
    return w / w.sum()


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def make_prototypes(cfg: GeneratorConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Object-class and predicate prototypes (row 0 of the latter is no-relation)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    obj = _unit_rows(rng, cfg.num_object_classes, cfg.d_v)
    pred = _unit_rows(rng, cfg.num_predicates + 1, cfg.d_v)
    for f, r, delta in cfg.similar_pairs:
        direction = _unit_rows(rng, 1, cfg.d_v)[0]
        pred[r] = pred[f] + delta * direction
    return obj, pred


def _random_box(rng: np.random.Generator) -> tuple[float, float, float, float]:
    x1, y1 = rng.uniform(0.0, 0.7, size=2)
    w, h = rng.uniform(0.05, 0.3, size=2)
    return (float(np.float32(x1)), float(np.float32(y1)), float(np.float32(x1 + w)), float(np.float32(y1 + h)))


def _generate_image(cfg: GeneratorConfig, seed: int, split: int, index: int, obj_proto, pred_proto, pred_p, prefix: str) -> ImageRecord:
    rng = np.random.default_rng(np.random.SeedSequence([seed, split, index]))
    n = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    objects = []
    for _ in range(n):
        label = int(rng.integers(cfg.num_object_classes))
        visual = obj_proto[label] + cfg.noise * rng.standard_normal(cfg.d_v)
        objects.append(ObjectInstance(label, _random_box(rng), visual.astype(np.float32)))
    all_pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    n_pos = int(rng.integers(cfg.relations_per_image[0], cfg.relations_per_image[1] + 1))
    n_pos = min(n_pos, len(all_pairs))
    n_neg = min(int(round(n_pos * cfg.neg_frac / (1.0 - cfg.neg_frac))), len(all_pairs) - n_pos)
    chosen = rng.permutation(len(all_pairs))[: n_pos + n_neg]
    predicates = rng.choice(np.arange(1, cfg.num_predicates + 1), size=n_pos, p=pred_p)
    relations = []
    for k, idx in enumerate(chosen):
        i, j = all_pairs[idx]
        pred = int(predicates[k]) if k < n_pos else NO_RELATION
        union = pred_proto[pred] + cfg.noise * rng.standard_normal(cfg.d_v)
        relations.append(RelationInstance(i, j, pred, union.astype(np.float32)))
    return ImageRecord(f"{prefix}{index:06d}", objects, relations)


def generate_synthetic(cfg: GeneratorConfig, seed: int, split: int = 0, prefix: str = "img") -> Dataset:
    """Deterministic long-tailed relation dataset.

    Prototypes depend on ``seed`` only, so splits generated with the same
    seed and different ``split`` ids share one underlying distribution. Each
    image draws from its own generator seeded by ``(seed, split, index)``;
    the output does not depend on how images are scheduled.
    """
    cfg.validate()
    obj_proto, pred_proto = make_prototypes(cfg, seed)
    pred_p = zipf_probabilities(cfg.num_predicates, cfg.zipf_s)
    images = [
        _generate_image(cfg, seed, split, i, obj_proto, pred_proto, pred_p, prefix)
        for i in range(cfg.num_images)
    ]
    header = DatasetHeader(cfg.d_v, cfg.num_object_classes, cfg.num_predicates + 1)
    return Dataset(header, images)


def nearest_prototype_accuracy(dataset: Dataset, pred_proto: np.ndarray) -> float:
    """Fraction of positive relations whose union feature is closest to its own prototype."""
    hits = total = 0
    for img in dataset.images:
        for r in img.relations:
            if r.predicate == NO_RELATION:
                continue
            d = np.linalg.norm(pred_proto[1:] - r.union, axis=1)
            hits += int(np.argmin(d) + 1 == r.predicate)
            total += 1
    return hits / max(total, 1)
