"""Detection metrics: per-class AP and recall, mAP over IoU thresholds, and
base/novel roll-ups under the ZSD, GZSD and closed-set protocols."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import pairwise_iou
from .text import BASE, NOVEL, ClassVocabulary, normalize_name

ZSD, GZSD, CLOSED = "zsd", "gzsd", "closed"
MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_name: str
    box: Tuple[float, float, float, float]  # xyxy
    score: float


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: int
    class_name: str
    box: Tuple[float, float, float, float]  # xyxy


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: Tuple[float, ...] = MAP_THRESHOLDS
    protocol: str = GZSD
    score_floor: float = 0.0

    def __post_init__(self):
        t = tuple(float(x) for x in self.iou_thresholds)
        if not t or any(not 0 < x <= 1 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("IoU thresholds must lie in (0, 1] and be strictly increasing")
        if self.protocol not in (ZSD, GZSD, CLOSED):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        object.__setattr__(self, "iou_thresholds", t)


def harmonic_mean(a: float, b: float) -> float:
    """``2ab / (a + b)``, exactly rounded; 0 when ``a + b == 0``."""
    if a + b == 0:
        return 0.0
    fa, fb = Fraction(a), Fraction(b)
    return float(2 * fa * fb / (fa + fb))


def _group_gt(gt) -> Dict[int, np.ndarray]:
    if isinstance(gt, dict):
        return {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in gt.items()}
    out: Dict[int, list] = {}
    for g in gt:
        out.setdefault(g.image_id, []).append(g.box)
    return {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in out.items()}


def _match(detections, gt, iou_thr: float):
    """Greedy score-ordered matching; returns (tp flags in rank order, matched GT count)."""
    gt = _group_gt(gt)
    order = sorted(range(len(detections)), key=lambda i: -detections[i][2])  # stable on ties
    used = {k: np.zeros(len(v), bool) for k, v in gt.items()}
    rows: Dict[int, list] = {}
    for i, d in enumerate(detections):
        rows.setdefault(d[0], []).append(i)
    table = {}
    for image_id, idx in rows.items():
        boxes = gt.get(image_id)
        if boxes is not None and len(boxes):
            iou = pairwise_iou(np.asarray([detections[i][1] for i in idx], float), boxes)
            table.update({i: r for i, r in zip(idx, iou)})
    tp = np.zeros(len(order), bool)
    for rank, i in enumerate(order):
        if i not in table:
            continue
        image_id = detections[i][0]
        ious = np.where(used[image_id], -1.0, table[i])
        j = int(np.argmax(ious))
        if ious[j] >= iou_thr:
            used[image_id][j] = True
            tp[rank] = True
    return tp, int(sum(u.sum() for u in used.values()))


def _as_triples(detections):
    out = []
    for d in detections:
        if isinstance(d, Detection):
            out.append((d.image_id, d.box, d.score))
        else:
            out.append(tuple(d))
    return out


def average_precision(detections, gt, iou_thr: float = 0.5) -> Optional[float]:
    """All-point interpolated AP for one class.

    ``detections`` are ``(image_id, box_xyxy, score)`` triples (or
    :class:`Detection`), ``gt`` maps image id to ``[K, 4]`` xyxy boxes (or is
    a list of :class:`GroundTruthBox`).  Returns ``None`` when there is no
    ground truth.
    """
    dets = _as_triples(detections)
    n_gt = sum(len(v) for v in _group_gt(gt).values())
    if n_gt == 0:
        return None
    if not dets:
        return 0.0
    tp, _ = _match(dets, gt, iou_thr)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def recall_at(detections, gt, iou_thr: float = 0.5) -> Optional[float]:
    """Fraction of ground-truth boxes matched by some detection; ``None`` without ground truth."""
    dets = _as_triples(detections)
    n_gt = sum(len(v) for v in _group_gt(gt).values())
    if n_gt == 0:
        return None
    _, matched = _match(dets, gt, iou_thr)
    return matched / n_gt


@dataclass
class ClassResult:
    name: str
    role: str
    n_gt: int
    ap: Dict[float, float]
    recall: Dict[float, float]
    matched: int = 0

    def mean_ap(self, thresholds) -> float:
        return float(np.mean([self.ap[t] for t in thresholds]))


@dataclass
class EvalReport:
    protocol: str
    thresholds: Tuple[float, ...]  # the mAP thresholds
    classes: List[ClassResult]
    summary: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def metric(self, split: str, name: str) -> float:
        return self.summary[split][name]

    def to_lines(self) -> List[str]:
        lines = [f"protocol={self.protocol}"]
        for c in self.classes:
            key = c.name.replace(" ", "_")
            lines.append(f"{c.role}.{key}.n_gt={c.n_gt}")
            lines.append(f"{c.role}.{key}.AP50={c.ap[0.5]:.6f}")
            lines.append(f"{c.role}.{key}.mAP={c.mean_ap(self.thresholds):.6f}")
            lines.append(f"{c.role}.{key}.Recall={c.recall[0.5]:.6f}")
        for split, metrics in self.summary.items():
            for name, value in metrics.items():
                lines.append(f"{split}.all.{name}={value:.6f}")
        return lines

    def to_text(self) -> str:
        return "\n".join(self.to_lines()) + "\n"

    def to_json(self) -> str:
        doc = {"protocol": self.protocol, "thresholds": list(self.thresholds),
               "summary": {s: {k: round(v, 6) for k, v in m.items()} for s, m in self.summary.items()}}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "role", "n_gt", "AP50", "mAP", "Recall"])
        for c in self.classes:
            w.writerow([c.name, c.role, c.n_gt, f"{c.ap[0.5]:.6f}",
                        f"{c.mean_ap(self.thresholds):.6f}", f"{c.recall[0.5]:.6f}"])
        return buf.getvalue()


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values else 0.0


def _rollup(results: Sequence[ClassResult], thresholds) -> Dict[str, float]:
    n_gt = sum(c.n_gt for c in results)
    return {
        "AP50": _mean([c.ap[0.5] for c in results]),
        "mAP": _mean([_mean([c.ap[t] for c in results]) for t in thresholds]),
        "Recall": _mean([c.recall[0.5] for c in results]),
        "Recall_micro": (sum(c.matched for c in results) / n_gt) if n_gt else 0.0,
    }


def evaluate(detections: Sequence[Detection], gt: Sequence[GroundTruthBox], vocab: ClassVocabulary,
             cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Score detections under ``cfg.protocol``.

    Classes without ground truth are left out of every mean.  Under ZSD only
    novel classes are scored; under GZSD base and novel are scored jointly
    and summarised separately together with their harmonic mean.
    """
    names = list(vocab.names)
    role = dict(zip(vocab.names, vocab.roles))
    unknown = sorted({normalize_name(d.class_name) for d in detections} - set(names))
    if unknown:
        raise ProtocolError(f"detections reference classes outside the vocabulary: {unknown}")
    if cfg.protocol == ZSD:
        scored = [n for n in names if role[n] == NOVEL]
    else:
        scored = names
    thresholds = tuple(sorted(set(cfg.iou_thresholds) | {0.5}))

    by_class_det: Dict[str, list] = {n: [] for n in scored}
    for d in detections:
        n = normalize_name(d.class_name)
        if n in by_class_det and d.score >= cfg.score_floor:
            by_class_det[n].append((d.image_id, d.box, d.score))
    by_class_gt: Dict[str, list] = {n: [] for n in scored}
    for g in gt:
        n = normalize_name(g.class_name)
        if n in by_class_gt:
            by_class_gt[n].append(g)

    results = []
    for n in scored:
        gts = by_class_gt[n]
        if not gts:
            continue
        dets = by_class_det[n]
        ap = {t: average_precision(dets, gts, t) for t in thresholds}
        rec = {t: recall_at(dets, gts, t) for t in thresholds}
        results.append(ClassResult(n, role[n], len(gts), ap, rec, int(round(rec[0.5] * len(gts)))))

    base = [c for c in results if c.role == BASE]
    novel = [c for c in results if c.role == NOVEL]
    report = EvalReport(cfg.protocol, cfg.iou_thresholds, results)
    if cfg.protocol == ZSD:
        if not novel:
            raise ProtocolError("ZSD needs at least one novel class with ground truth")
        report.summary["novel"] = _rollup(novel, cfg.iou_thresholds)
    elif cfg.protocol == GZSD:
        if not base or not novel:
            raise ProtocolError("GZSD needs base and novel classes with ground truth")
        report.summary["all"] = _rollup(results, cfg.iou_thresholds)
        report.summary["base"] = _rollup(base, cfg.iou_thresholds)
        report.summary["novel"] = _rollup(novel, cfg.iou_thresholds)
        report.summary["hm"] = {k: harmonic_mean(report.summary["base"][k], report.summary["novel"][k])
                                for k in report.summary["base"]}
    else:
        if not results:
            raise ProtocolError("no scored class has ground truth")
        report.summary["all"] = _rollup(results, cfg.iou_thresholds)
    return report
