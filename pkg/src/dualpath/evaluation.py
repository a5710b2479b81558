"""ScanNet-style instance segmentation metrics: AP, AP50, AP25 and recall."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .masks import intersection_matrix
from .scene import SUBSETS, GroundTruth, ProposalSet, normalize

AP_RANGE = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
METRICS = ("ap", "ap50", "ap25", "rc", "rc50", "rc25")


def assign_classes(pset: ProposalSet, class_features: Mapping[int, np.ndarray]) -> ProposalSet:
    """Label each featured proposal with its most similar class.

    Score is the winning cosine mapped to [0, 1] by ``(s + 1) / 2``. Ties go to
    the lower class id. Feature-less proposals are kept unlabeled.
    """
    ids = sorted(class_features)
    if not ids:
        raise ValueError("no class features given")
    table = np.stack([normalize(class_features[c]) for c in ids])
    out = []
    for p in pset:
        if p.feature is None:
            out.append(p.with_(class_id=None, score=None))
            continue
        sims = table @ normalize(p.feature)
        k = int(np.argmax(sims))
        score = min(1.0, max(0.0, (float(sims[k]) + 1.0) / 2.0))
        out.append(p.with_(class_id=ids[k], score=score))
    return pset.derive(out)


def _sorted_predictions(pred: ProposalSet, class_id: int):
    items = [(p, k) for k, p in enumerate(pred) if p.class_id == class_id]
    items.sort(key=lambda t: (-(t[0].score if t[0].score is not None else 0.0), t[1]))
    return [p for p, _ in items]


def _iou_table(preds, gts, n: int) -> np.ndarray:
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    inter = intersection_matrix([p.mask for p in preds], [g.mask for g in gts], n)
    a = np.array([len(p.mask) for p in preds])[:, None]
    b = np.array([len(g.mask) for g in gts])[None, :]
    return inter / (a + b - inter)


def greedy_match(iou: np.ndarray, tau: float) -> np.ndarray:
    """TP flag per prediction (rows already in score order).

    Each prediction takes the unmatched GT with the highest IoU (lowest index
    on ties) and counts as a true positive iff that IoU reaches ``tau``.
    """
    n_pred, n_gt = iou.shape
    tp = np.zeros(n_pred, dtype=bool)
    free = np.ones(n_gt, dtype=bool)
    for r in range(n_pred):
        if not free.any():
            break
        row = np.where(free, iou[r], -1.0)
        g = int(np.argmax(row))
        if row[g] >= tau:
            tp[r] = True
            free[g] = False
    return tp


def ap_from_matches(tp: np.ndarray, n_gt: int) -> float:
    """Area under the interpolated PR curve, summed over exact recall steps."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if tp.size == 0 or not tp.any():
        return 0.0
    precision = np.cumsum(tp) / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[tp].sum() / n_gt)


def _per_class(pred: ProposalSet, gt: GroundTruth, taus, n: int):
    """``{class_id: {tau: (ap, rc)}}`` for every class with GT instances."""
    out = {}
    for c in sorted({g.class_id for g in gt.instances}):
        gts = [g for g in gt.instances if g.class_id == c]
        preds = _sorted_predictions(pred, c)
        iou = _iou_table(preds, gts, n)
        per_tau = {}
        for tau in taus:
            tp = greedy_match(iou, tau)
            per_tau[tau] = (ap_from_matches(tp, len(gts)), tp.sum() / len(gts))
        out[c] = per_tau
    return out


def average_precision(pred: ProposalSet, gt: GroundTruth, tau: float, num_points: int | None = None):
    """Per-class AP at one overlap threshold plus the mean over classes with GT."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must be in (0, 1]")
    n = num_points or pred.num_points
    per = {c: v[tau][0] for c, v in _per_class(pred, gt, (tau,), n).items()}
    return per, (float(np.mean(list(per.values()))) if per else None)


def recall_rate(pred: ProposalSet, gt: GroundTruth, tau: float, num_points: int | None = None):
    """Per-class recall at one threshold and its mean per head/common/tail subset."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must be in (0, 1]")
    n = num_points or pred.num_points
    per = {c: float(v[tau][1]) for c, v in _per_class(pred, gt, (tau,), n).items()}
    subsets = {}
    for s in SUBSETS:
        vals = [per[c] for c in per if gt.class_table[c].subset == s]
        subsets[s] = float(np.mean(vals)) if vals else None
    return per, subsets


@dataclass
class EvalResult:
    ap: float | None
    ap50: float | None
    ap25: float | None
    rc: float | None
    rc50: float | None
    rc25: float | None
    subsets: dict = field(default_factory=dict)  # subset -> {metric: value}
    per_class: dict = field(default_factory=dict)  # class_id -> {metric: value}

    def to_json(self) -> dict:
        return {
            **{m: getattr(self, m) for m in METRICS},
            "subsets": self.subsets,
            "per_class": {str(c): v for c, v in self.per_class.items()},
        }

    def table(self, title: str = "result") -> str:
        cols = ["AP", "AP50", "AP25", "head", "common", "tail"]
        vals = [self.ap, self.ap50, self.ap25] + [self.subsets.get(s, {}).get("ap") for s in SUBSETS]
        width = max(len(title), 10)
        head = f"{'':<{width}}" + "".join(f"{c:>8}" for c in cols)
        row = f"{title:<{width}}" + "".join(
            f"{'-' if v is None else f'{100 * v:.1f}':>8}" for v in vals)
        return head + "\n" + row


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def evaluate(pred: ProposalSet, gt: GroundTruth, num_points: int | None = None) -> EvalResult:
    n = num_points or pred.num_points
    taus = sorted(set(AP_RANGE) | {0.25, 0.5})
    raw = _per_class(pred, gt, taus, n)
    per_class = {}
    for c, v in raw.items():
        per_class[c] = {
            "ap": float(np.mean([v[t][0] for t in AP_RANGE])),
            "ap50": float(v[0.5][0]),
            "ap25": float(v[0.25][0]),
            "rc": float(np.mean([v[t][1] for t in AP_RANGE])),
            "rc50": float(v[0.5][1]),
            "rc25": float(v[0.25][1]),
        }
    overall = {m: _mean(pc[m] for pc in per_class.values()) for m in METRICS}
    subsets = {}
    for s in SUBSETS:
        members = [per_class[c] for c in per_class if gt.class_table[c].subset == s]
        subsets[s] = {m: _mean(pc[m] for pc in members) for m in METRICS}
    return EvalResult(**overall, subsets=subsets, per_class=per_class)
