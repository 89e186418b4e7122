"""Named model variants for the ablation comparisons."""
from __future__ import annotations

from dataclasses import dataclass

from .config import RunConfig
from .datamodel import Dataset, PredicatePartition
from .metrics import MetricsReport
from .model import RelationModel
from .training import EpochRecord, evaluate_model, make_partition, train

VARIANTS: dict[str, dict] = {
    "baseline_ce": dict(decoder_mode="single", loss_mode="ce"),
    "single_reweighted": dict(decoder_mode="single", loss_mode="reweighted"),
    "multi_nested": dict(decoder_mode="multi", loss_mode="epd", subset_mode="nested"),
    "multi_disjoint": dict(decoder_mode="multi", loss_mode="epd", subset_mode="disjoint"),
    "multi_md_full": dict(decoder_mode="multi", loss_mode="epd", subset_mode="md_full_disjoint_aux"),
}
# shared F_p_d (Y/N) crossed with batch norm (w./w.o.)
BN_GRID: dict[str, dict] = {
    f"bn_grid[fpd={'Y' if shared else 'N'},bn={'w' if bn else 'wo'}]": dict(
        decoder_mode="multi", loss_mode="epd", subset_mode="nested", shared_fpd=shared, bn_enabled=bn,
    )
    for shared in (True, False)
    for bn in (True, False)
}
MODES = tuple(VARIANTS) + ("bn_grid",)


def expand_modes(modes) -> list[str]:
    out = []
    for m in modes:
        if m == "bn_grid":
            out += list(BN_GRID)
        elif m in VARIANTS:
            out.append(m)
        else:
            raise ValueError(f"unknown ablation mode {m!r}; expected one of {', '.join(MODES)}")
    return out


def variant_config(base: RunConfig, name: str) -> RunConfig:
    changes = VARIANTS.get(name) or BN_GRID.get(name)
    if changes is None:
        raise ValueError(f"unknown variant {name!r}")
    return base.replace(**changes)


@dataclass
class VariantResult:
    name: str
    config: RunConfig
    history: list[EpochRecord]
    report: MetricsReport
    model: RelationModel

    def row(self) -> dict:
        rep = self.report
        row = {"variant": self.name}
        for k in rep.ks:
            row[f"R@{k}"] = rep.r_at_k[k]
        for k in rep.ks:
            row[f"mR@{k}"] = rep.mr_at_k[k]
        row["Mean"] = rep.mean
        if rep.group_recall:
            kmax = max(rep.ks)
            for g, v in rep.group_recall[kmax].items():
                row[f"{g}@{kmax}"] = v
        return row


def run_variant(base: RunConfig, name: str, train_set: Dataset, test_set: Dataset,
                partition: PredicatePartition | None = None) -> VariantResult:
    cfg = variant_config(base, name)
    partition = partition or make_partition(cfg, train_set)
    model = RelationModel.create(cfg)
    history = train(model, train_set, partition)
    report = evaluate_model(model, test_set, partition)
    return VariantResult(name, cfg, history, report, model)
