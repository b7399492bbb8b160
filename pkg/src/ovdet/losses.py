"""Set matching and the detection objective.

The class term is a varifocal loss on sigmoid similarity probabilities:
matched (query, class) pairs are pulled towards the IoU of the predicted box
with its ground truth, every other valid pair is pushed towards zero with a
focal down-weighting of easy negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import cxcywh_to_xyxy, giou_loss_t, pairwise_giou, pairwise_iou
from .decoder import DetectionSet, LayerOutput
from .text import ClassEmbeddingBank

PROB_CLAMP = 1e-12


@dataclass
class GroundTruth:
    boxes: np.ndarray      # [K, 4] normalised cxcywh
    class_ids: np.ndarray  # [K] vocabulary indices

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.class_ids):
            raise ValueError("boxes and class_ids differ in length")
        if len(self.boxes) and (self.boxes[:, 2:] <= 0).any():
            raise ValueError("ground-truth boxes need positive width and height")

    def __len__(self) -> int:
        return len(self.class_ids)


@dataclass
class Assignment:
    pairs: List[Tuple[int, int]]

    @property
    def queries(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def targets(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


@dataclass(frozen=True)
class MatchWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass(frozen=True)
class LossWeights:
    con: float = 1.0     # lambda
    giou: float = 2.0    # mu
    l1: float = 5.0      # nu
    vfl_alpha: float = 0.75
    vfl_gamma: float = 2.0


@dataclass
class LossBreakdown:
    l_con: Tensor
    l_giou: Tensor
    l_l1: Tensor
    total: Tensor
    weights: LossWeights
    per_layer: List[Tuple[float, float, float]] = field(default_factory=list)

    def as_floats(self) -> dict:
        return {"l_con": self.l_con.item(), "l_giou": self.l_giou.item(),
                "l_l1": self.l_l1.item(), "total": self.total.item()}


def hungarian_match(cost) -> Assignment:
    """Minimum-cost one-to-one assignment of queries (rows) to targets (columns)."""
    cost = np.asarray(cost.data if isinstance(cost, Tensor) else cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    if cost.size == 0:
        return Assignment([])
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    return Assignment([(int(r), int(c)) for r, c in zip(rows, cols)])


def match_cost(detections: DetectionSet, gt: GroundTruth, weights: MatchWeights = MatchWeights()) -> np.ndarray:
    """``[N, K]`` matching cost from similarity probabilities and box distances."""
    n, k = len(detections.boxes), len(gt)
    if k == 0:
        return np.zeros((n, 0))
    column = {c: j for j, c in enumerate(detections.class_ids) if c is not None}
    missing = sorted({int(c) for c in gt.class_ids} - set(column))
    if missing:
        raise ValueError(f"ground-truth classes {missing} have no class slot")
    p = detections.scores[:, [column[int(c)] for c in gt.class_ids]]
    a, g = weights.focal_alpha, weights.focal_gamma
    pos = a * (1 - p) ** g * -np.log(p + 1e-8)
    neg = (1 - a) * p ** g * -np.log(1 - p + 1e-8)
    l1 = np.abs(detections.boxes[:, None, :] - gt.boxes[None, :, :]).sum(-1)
    giou = 1.0 - pairwise_giou(detections.boxes, gt.boxes, fmt="cxcywh")
    return weights.cls * (pos - neg) + weights.l1 * l1 + weights.giou * giou


def alignment_targets(shape: Tuple[int, int], assignment: Assignment, ious: Sequence[float],
                      target_slots: Sequence[int]) -> np.ndarray:
    u = np.zeros(shape)
    for (q, _), slot, value in zip(assignment.pairs, target_slots, ious):
        u[q, slot] = value
    return u


def varifocal_terms(scores: Tensor, targets: np.ndarray, valid: np.ndarray,
                    alpha: float = 0.75, gamma: float = 2.0) -> Tensor:
    """Elementwise loss; ``targets`` are constants (IoU for positives, 0 otherwise)."""
    theta = ad.clip(ad.sigmoid(scores), PROB_CLAMP, 1.0 - PROB_CLAMP)
    log_t = ad.log(theta)
    log_1mt = ad.log(1.0 - theta)
    pos = targets > 0
    neg_weight = ad.power(theta, gamma) * alpha
    w_neg = ad.where(pos, targets * (1.0 - targets), neg_weight)
    loss = -(targets * targets * log_t + w_neg * log_1mt)
    return loss * np.broadcast_to(valid, targets.shape).astype(np.float64)


def alignment_loss(scores: Tensor, assignment: Assignment, iou_of_matched: Sequence[float],
                   target_slots: Sequence[int], valid: Optional[np.ndarray] = None,
                   alpha: float = 0.75, gamma: float = 2.0,
                   normalizer: Optional[float] = None) -> Tensor:
    """Varifocal alignment loss for one image's ``[N, S]`` similarity logits."""
    scores = ad.as_tensor(scores)
    valid = np.ones(scores.shape[-1], bool) if valid is None else np.asarray(valid, bool)
    u = alignment_targets(scores.shape, assignment, iou_of_matched, target_slots)
    total = varifocal_terms(scores, u, valid, alpha, gamma).sum()
    norm = max(1.0, float(len(assignment.pairs) if normalizer is None else normalizer))
    return total * (1.0 / norm)


def _match_layer(output: LayerOutput, gts: Sequence[GroundTruth], text: ClassEmbeddingBank,
                 mw: MatchWeights):
    valid = np.flatnonzero(text.valid_mask)
    class_ids = [text.slot_to_class[s] for s in valid]
    logits = output.logits.data
    probs_all = 1.0 / (1.0 + np.exp(-logits[..., valid]))
    slot_of = text.class_to_slot()
    img, qry, gidx, slots = [], [], [], []
    for i, gt in enumerate(gts):
        if len(gt) == 0:
            continue
        det = DetectionSet(output.boxes.data[i], probs_all[i], class_ids, [])
        assignment = hungarian_match(match_cost(det, gt, mw))
        for q, g in assignment.pairs:
            img.append(i)
            qry.append(q)
            gidx.append(g)
            slots.append(slot_of[int(gt.class_ids[g])])
    return np.array(img, np.int64), np.array(qry, np.int64), gidx, np.array(slots, np.int64)


def total_loss(outputs: Sequence[LayerOutput], gts: Sequence[GroundTruth], text: ClassEmbeddingBank,
               weights: LossWeights = LossWeights(), match_weights: MatchWeights = MatchWeights()
               ) -> LossBreakdown:
    """Sum over layers of ``lambda*L_con + mu*L_GIoU + nu*L_L1``; every layer is matched separately."""
    num_gt = max(1.0, float(sum(len(g) for g in gts)))
    con_terms, giou_terms, l1_terms, per_layer = [], [], [], []
    for out in outputs:
        img, qry, gidx, slots = _match_layer(out, gts, text, match_weights)
        u = np.zeros(out.logits.shape)
        if len(img):
            target = np.stack([gts[i].boxes[g] for i, g in zip(img, gidx)])
            pred = out.boxes[img, qry]
            ious = np.diag(pairwise_iou(cxcywh_to_xyxy(pred.data), cxcywh_to_xyxy(target)))
            u[img, qry, slots] = np.maximum(ious, 0.0)
            l_giou = giou_loss_t(pred, target).sum() * (1.0 / num_gt)
            l_l1 = ad.abs_(pred - target).sum() * (1.0 / num_gt)
        else:
            l_giou = l_l1 = Tensor(np.array(0.0))
        l_con = varifocal_terms(out.logits, u, text.valid_mask, weights.vfl_alpha, weights.vfl_gamma
                                ).sum() * (1.0 / num_gt)
        con_terms.append(l_con)
        giou_terms.append(l_giou)
        l1_terms.append(l_l1)
        per_layer.append((l_con.item(), l_giou.item(), l_l1.item()))
    l_con = _sum(con_terms)
    l_giou = _sum(giou_terms)
    l_l1 = _sum(l1_terms)
    total = l_con * weights.con + l_giou * weights.giou + l_l1 * weights.l1
    return LossBreakdown(l_con, l_giou, l_l1, total, weights, per_layer)


def _sum(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out
