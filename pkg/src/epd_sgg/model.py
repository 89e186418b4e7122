"""Full relation model: encoders + ensemble head, batching and loss assembly."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import RunConfig
from .datamodel import NO_RELATION, ImageRecord, PredicatePartition, SubsetAssignment
from .encoders import (
    EncoderParams,
    decode_object,
    embed_spatial,
    encode_object,
    encode_predicate,
    semantic_features,
)
from .epd import (
    BRANCHES,
    EpdHead,
    EpdHyper,
    LossBreakdown,
    aggregate_logits,
    aggregated_loss,
    classify,
    decode_branches,
    decoder_losses,
    single_decoder_coefficients,
    single_decoder_loss,
    total_loss,
)
from .numcore import Tensor, embedding_lookup, linear_combination, softmax_cross_entropy


@dataclass
class Batch:
    visual: np.ndarray       # [n, d_v]
    bboxes: np.ndarray       # [n, 4]
    labels: np.ndarray       # [n]
    subj: np.ndarray         # [m] row into the object arrays
    obj: np.ndarray          # [m]
    union: np.ndarray        # [m, d_v]
    predicates: np.ndarray   # [m]
    image_index: np.ndarray  # [m] position of the source image in the batch
    local_pairs: np.ndarray  # [m, 2] (subj, obj) within the image

    @property
    def num_relations(self) -> int:
        return len(self.predicates)


def collate(images: Sequence[ImageRecord], positive_only: bool = False) -> Batch:
    visual, bboxes, labels = [], [], []
    subj, obj, union, preds, img_idx, local = [], [], [], [], [], []
    offset = 0
    for k, img in enumerate(images):
        for o in img.objects:
            visual.append(o.visual)
            bboxes.append(o.bbox)
            labels.append(o.label)
        for r in img.relations:
            if positive_only and r.predicate == NO_RELATION:
                continue
            subj.append(offset + r.subj)
            obj.append(offset + r.obj)
            union.append(r.union)
            preds.append(r.predicate)
            img_idx.append(k)
            local.append((r.subj, r.obj))
        offset += len(img.objects)
    d_v = len(visual[0]) if visual else 0
    return Batch(
        visual=np.asarray(visual, dtype=np.float32).reshape(-1, d_v),
        bboxes=np.asarray(bboxes, dtype=np.float32).reshape(-1, 4),
        labels=np.asarray(labels, dtype=np.int64),
        subj=np.asarray(subj, dtype=np.int64),
        obj=np.asarray(obj, dtype=np.int64),
        union=np.asarray(union, dtype=np.float32).reshape(-1, d_v),
        predicates=np.asarray(preds, dtype=np.int64),
        image_index=np.asarray(img_idx, dtype=np.int64),
        local_pairs=np.asarray(local, dtype=np.int64).reshape(-1, 2),
    )


@dataclass
class Forward:
    logits: list[Tensor]  # z_md, z_ad1, z_ad2
    object_logits: Tensor
    refined_labels: np.ndarray


class RelationModel:
    def __init__(self, config: RunConfig, encoder: EncoderParams, head: EpdHead):
        self.config = config
        self.hyper: EpdHyper = config.hyper()
        self.encoder = encoder
        self.head = head

    @classmethod
    def create(cls, config: RunConfig) -> "RelationModel":
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x1A17]))
        encoder = EncoderParams.create(rng, config.encoder_dims(), config.activation)
        head = EpdHead.create(
            rng, config.d_p, config.d_v, config.d_h, config.num_predicate_classes,
            shared_fpd=config.shared_fpd, activation=config.activation,
            bn_momentum=config.bn_momentum, bn_epsilon=config.bn_epsilon,
        )
        return cls(config, encoder, head)

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.head.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for b in BRANCHES:
            st = self.head.bns[b]
            out[f"head.bn_{b}.running_mean"] = st.running_mean
            out[f"head.bn_{b}.running_var"] = st.running_var
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        prefix, field_name = name.rsplit(".", 1)
        branch = prefix.split("bn_", 1)[1]
        setattr(self.head.bns[branch], field_name, np.asarray(value, dtype=np.float32).copy())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, batch: Batch, mode: str = "train") -> Forward:
        enc = self.encoder
        spatial = embed_spatial(enc, batch.bboxes)
        semantic = semantic_features(enc, batch.labels)
        refined = encode_object(enc, batch.visual, spatial, semantic)
        obj_logits, _, refined_labels = decode_object(enc, refined)
        # PredCls: ground-truth labels feed the refined semantic features
        refined_semantic = semantic if self.config.predcls else semantic_features(enc, refined_labels)
        pred_enc = encode_predicate(enc, refined_semantic, refined, batch.visual)
        p_i = embedding_lookup(pred_enc, batch.subj)
        p_j = embedding_lookup(pred_enc, batch.obj)
        branches = decode_branches(self.head, p_i, p_j, batch.union, self.hyper, mode)
        return Forward(classify(self.head, branches), obj_logits, refined_labels)

    def loss(self, fwd: Forward, batch: Batch, partition: PredicatePartition,
             assignment: SubsetAssignment) -> tuple[Tensor, LossBreakdown]:
        h = self.hyper
        labels = batch.predicates
        z_md, z_ad1, z_ad2 = fwd.logits
        l_obj = softmax_cross_entropy(fwd.object_logits, batch.labels) if self.config.object_loss else None
        obj_w = self.config.object_loss_weight
        br = LossBreakdown()
        if h.loss_mode == "epd":
            (l_md, l_ad1, l_ad2), counts = decoder_losses(z_md, z_ad1, z_ad2, labels, assignment)
            z_sum = aggregate_logits(z_md, z_ad1, z_ad2, h.lambdas)
            l_agg = aggregated_loss(z_sum, labels)
            total = total_loss(l_md, l_ad1, l_ad2, l_agg, h.alpha, h.beta, h.gamma, l_obj, obj_w)
            br.l_md, br.l_ad1, br.l_ad2, br.l_agg = (t.item() for t in (l_md, l_ad1, l_ad2, l_agg))
            br.counts = counts
        elif h.loss_mode == "reweighted":
            main, blocks, counts = single_decoder_loss(z_md, labels, partition, h.alpha, h.beta, h.gamma)
            terms, coeffs = [main], [1.0]
            if l_obj is not None:
                terms.append(l_obj)
                coeffs.append(obj_w)
            total = linear_combination(terms, coeffs)
            br.block_losses = tuple(t.item() for t in blocks)
            br.block_coefficients = single_decoder_coefficients(h.alpha, h.beta, h.gamma)
            br.l_md = main.item()
            br.counts = counts
        else:
            l_md = softmax_cross_entropy(z_md, labels)
            terms, coeffs = [l_md], [1.0]
            if l_obj is not None:
                terms.append(l_obj)
                coeffs.append(obj_w)
            total = linear_combination(terms, coeffs)
            br.l_md = l_md.item()
            br.counts = {"md": len(labels)}
        br.l_obj = l_obj.item() if l_obj is not None else 0.0
        br.l_total = total.item()
        return total, br

    def recompose(self, br: LossBreakdown) -> float:
        """Total loss recomputed from the stored components."""
        h = self.hyper
        obj_w = self.config.object_loss_weight if self.config.object_loss else 0.0
        if h.loss_mode == "epd":
            return br.recompose(h.alpha, h.beta, h.gamma, obj_w)
        if h.loss_mode == "reweighted":
            main = sum(c * l for c, l in zip(br.block_coefficients, br.block_losses))
            return main + obj_w * br.l_obj
        return br.l_md + obj_w * br.l_obj

    def relation_logits(self, images: Sequence[ImageRecord], chunk: int = 256) -> tuple[Batch, list[np.ndarray]]:
        """Eval-mode logits for every candidate pair of ``images``."""
        batch = collate(images)
        outs = [[], [], []]
        for start in range(0, len(images), chunk):
            sub = collate(images[start:start + chunk])
            if sub.num_relations == 0:
                continue
            fwd = self.forward(sub, mode="eval")
            for k in range(3):
                outs[k].append(fwd.logits[k].value)
        C = self.config.num_predicate_classes
        return batch, [np.concatenate(o) if o else np.zeros((0, C), np.float32) for o in outs]
