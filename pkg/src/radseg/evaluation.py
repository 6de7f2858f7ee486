"""Metrics: distance-k detection AP, view projection, IoU, view consistency."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .simulate import BACKGROUND, NUM_CLASSES


def within_distance(pred, gt, k):
    """True iff Euclidean distance <= k meters (inclusive) and the mean
    doppler difference is strictly less than k bins."""
    if k <= 0:
        raise ContractViolation("distance threshold k must be positive")
    dx = pred.x - gt.center_xy[0]
    dy = pred.y - gt.center_xy[1]
    return np.hypot(dx, dy) <= k and abs(pred.doppler - gt.mean_doppler) < k


@dataclass
class MatchResult:
    is_tp: list  # per prediction, in descending-score order
    scores: list
    matched_gt: list  # per prediction: gt index or None
    tp: int
    fp: int
    fn: int
    n_gt: int


def match_detections(preds, gts, k):
    """Greedy score-ordered matching: each prediction takes the nearest
    unmatched ground truth it is within distance k of."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = set()
    is_tp, scores, matched = [], [], []
    for i in order:
        p = preds[i]
        best = None
        for j, g in enumerate(gts):
            if j in taken or not within_distance(p, g, k):
                continue
            d = np.hypot(p.x - g.center_xy[0], p.y - g.center_xy[1])
            if best is None or d < best[0]:
                best = (d, j)
        scores.append(p.score)
        if best is None:
            is_tp.append(False)
            matched.append(None)
        else:
            taken.add(best[1])
            is_tp.append(True)
            matched.append(best[1])
    tp = sum(is_tp)
    return MatchResult(
        is_tp=is_tp,
        scores=scores,
        matched_gt=matched,
        tp=tp,
        fp=len(preds) - tp,
        fn=len(gts) - tp,
        n_gt=len(gts),
    )


def average_precision(match_results):
    """All-point AP with the precision envelope, over pooled frame results.

    Returns None when there is no ground truth at all (undefined, not 0).
    """
    n_gt = sum(m.n_gt for m in match_results)
    if n_gt == 0:
        return None
    flags = []
    for fi, m in enumerate(match_results):
        for di, (s, t) in enumerate(zip(m.scores, m.is_tp)):
            flags.append((-s, fi, di, t))
    flags.sort()
    if not flags:
        return 0.0
    tps = np.cumsum([f[3] for f in flags])
    fps = np.cumsum([not f[3] for f in flags])
    recall = tps / n_gt
    precision = tps / (tps + fps)
    # envelope: precision at recall r is the max precision at recall >= r
    penv = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, penv):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def evaluate_detections_ap(per_frame, k):
    """per_frame: iterable of (detections, FrameLabels); AP at distance k."""
    matches = [match_detections(dets, labels.objects, k) for dets, labels in per_frame]
    return average_precision(matches)


def mean_ap(aps):
    """Arithmetic mean of APs over the distance thresholds (absent APs skipped)."""
    vals = [v for v in (aps.values() if isinstance(aps, dict) else aps) if v is not None]
    return float(np.mean(vals)) if vals else None


# ---------------------------------------------------------------------------
# View projection and IoU
# ---------------------------------------------------------------------------


@dataclass
class ViewMasks:
    ra_mask: np.ndarray  # (R, A) class ids
    rd_mask: np.ndarray  # (R, D) class ids


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def project_to_views(coords, logits, geometry, probs=None):
    """Per-point class scores -> RA and RD class-id masks.

    A view pixel is non-background iff some cell in its fiber is predicted
    non-background; its class is the non-background class with the highest
    probability summed over those cells (ties break toward the lower class
    id). Cells predicted background do not vote.
    """
    rmax, amax, dmax = geometry.shape
    ra_mask = np.zeros((rmax, amax), dtype=np.int64)
    rd_mask = np.zeros((rmax, dmax), dtype=np.int64)
    if len(coords) == 0:
        return ViewMasks(ra_mask, rd_mask)
    p = _softmax(np.asarray(logits, dtype=np.float64)) if probs is None else np.asarray(probs)
    cell_cls = p.argmax(axis=1)
    nonbg = cell_cls != BACKGROUND
    ra_score = np.zeros((rmax, amax, NUM_CLASSES - 1))
    rd_score = np.zeros((rmax, dmax, NUM_CLASSES - 1))
    ra_any = np.zeros((rmax, amax), dtype=bool)
    rd_any = np.zeros((rmax, dmax), dtype=bool)
    r, a, d = coords[:, 0], coords[:, 1], coords[:, 2]
    np.add.at(ra_score, (r[nonbg], a[nonbg]), p[nonbg, 1:])
    np.add.at(rd_score, (r[nonbg], d[nonbg]), p[nonbg, 1:])
    np.logical_or.at(ra_any, (r[nonbg], a[nonbg]), True)
    np.logical_or.at(rd_any, (r[nonbg], d[nonbg]), True)
    ra_mask[ra_any] = ra_score.argmax(axis=2)[ra_any] + 1
    rd_mask[rd_any] = rd_score.argmax(axis=2)[rd_any] + 1
    return ViewMasks(ra_mask, rd_mask)


def views_from_labels(labels, geometry):
    """Ground-truth masks: any class presence in the fiber wins; if two
    classes share a pixel's fiber, the one with more cells there wins, ties
    toward the lower class id."""
    rmax, amax, dmax = geometry.shape
    ra_count = np.zeros((rmax, amax, NUM_CLASSES - 1), dtype=np.int64)
    rd_count = np.zeros((rmax, dmax, NUM_CLASSES - 1), dtype=np.int64)
    for obj in labels.objects:
        c = obj.class_id - 1
        for r, a, d in obj.cells:
            ra_count[r, a, c] += 1
            rd_count[r, d, c] += 1
    ra_mask = np.zeros((rmax, amax), dtype=np.int64)
    rd_mask = np.zeros((rmax, dmax), dtype=np.int64)
    ra_any = ra_count.sum(axis=2) > 0
    rd_any = rd_count.sum(axis=2) > 0
    ra_mask[ra_any] = ra_count.argmax(axis=2)[ra_any] + 1
    rd_mask[rd_any] = rd_count.argmax(axis=2)[rd_any] + 1
    return ViewMasks(ra_mask, rd_mask)


class IoUAccumulator:
    """Split-level (micro-averaged) per-class intersection/union accumulation."""

    def __init__(self, num_classes=NUM_CLASSES):
        self.num_classes = num_classes
        self.inter = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)

    def add(self, pred_mask, gt_mask):
        if pred_mask.shape != gt_mask.shape:
            raise ContractViolation("mask shapes differ")
        for c in range(self.num_classes):
            p = pred_mask == c
            g = gt_mask == c
            self.inter[c] += int((p & g).sum())
            self.union[c] += int((p | g).sum())

    def per_class(self):
        out = {}
        for c in range(self.num_classes):
            if self.union[c] > 0:
                out[c] = self.inter[c] / self.union[c]
        return out

    def miou(self):
        per = self.per_class()
        return float(np.mean(list(per.values()))) if per else None


def iou_report(pred_masks, gt_masks):
    """Per-class IoU and mIoU for one mask pair (classes absent from both
    sides excluded)."""
    acc = IoUAccumulator()
    acc.add(pred_masks, gt_masks)
    return acc.per_class(), acc.miou()


def view_consistency(masks):
    """Fraction of range rows whose non-background class sets agree between
    the RA and RD views."""
    rmax = masks.ra_mask.shape[0]
    agree = 0
    for r in range(rmax):
        ra = set(masks.ra_mask[r][masks.ra_mask[r] != BACKGROUND].tolist())
        rd = set(masks.rd_mask[r][masks.rd_mask[r] != BACKGROUND].tolist())
        agree += ra == rd
    return agree / rmax


# ---------------------------------------------------------------------------
# Report container
# ---------------------------------------------------------------------------

REPORT_SCHEMA = {
    "type": "object",
    "required": ["detection", "segmentation", "region_growing", "runtime"],
    "additionalProperties": False,
    "properties": {
        "detection": {
            "type": "object",
            "required": ["ap", "mAP"],
            "properties": {
                "ap": {"type": "object"},
                "mAP": {"type": ["number", "null"]},
            },
        },
        "segmentation": {
            "type": "object",
            "required": ["ra", "rd", "view_consistency"],
            "properties": {
                "ra": {"type": "object"},
                "rd": {"type": "object"},
                "view_consistency": {"type": ["number", "null"]},
            },
        },
        "region_growing": {"type": "object"},
        "runtime": {"type": "object"},
    },
}


@dataclass
class MetricsReport:
    detection: dict = field(default_factory=lambda: {"ap": {}, "mAP": None})
    segmentation: dict = field(
        default_factory=lambda: {"ra": {}, "rd": {}, "view_consistency": None}
    )
    region_growing: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "detection": self.detection,
            "segmentation": self.segmentation,
            "region_growing": self.region_growing,
            "runtime": self.runtime,
        }

    def to_json(self, indent=1):
        return json.dumps(self.to_dict(), sort_keys=True, indent=indent)

    def validate(self):
        import jsonschema

        jsonschema.validate(json.loads(self.to_json()), REPORT_SCHEMA)
        return self
