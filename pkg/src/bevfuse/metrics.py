"""Center-distance detection metrics: AP, mAP, TP errors, NDS, distance buckets.

True positives are decided by BEV center distance, not IoU. TP errors are
taken at the 2 m threshold. With no velocity or attribute ground truth the
detection score is ``(5 mAP + sum(1 - min(1, err))) / (5 + 3)`` over ATE (m),
ASE and AOE / pi.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .augmentation import Box3D
from .detection import Detection

THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
MIN_RECALL = 0.1
RECALL_POINTS = 101
TP_METRICS = ("ate", "ase", "aoe")
BUCKET_NAMES = ("<15m", "15-30m", ">30m")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (det index, gt index)
    tp: np.ndarray  # per detection, in descending-score order
    order: np.ndarray  # detection indices sorted by descending score
    unmatched_dets: list[int]
    unmatched_gts: list[int]


def _bev_dist(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


def match_detections(dets: Sequence[Detection], gts: Sequence[Box3D], d: float) -> MatchResult:
    """Greedy matching in descending score order to the nearest free same-class GT."""
    if not d > 0:
        raise ValueError("matching distance must be positive")
    order = np.argsort([-det.score for det in dets], kind="stable")
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    pairs = []
    for rank, i in enumerate(order):
        det = dets[i]
        best, best_d = -1, math.inf
        for j, gt in enumerate(gts):
            if taken[j] or gt.class_id != det.class_id:
                continue
            dist = _bev_dist(det.box, gt)
            if dist < best_d:
                best, best_d = j, dist
        if best >= 0 and best_d <= d:
            taken[best] = True
            tp[rank] = True
            pairs.append((int(i), best))
    matched_dets = {p[0] for p in pairs}
    return MatchResult(
        pairs=pairs, tp=tp, order=order,
        unmatched_dets=[i for i in range(len(dets)) if i not in matched_dets],
        unmatched_gts=[j for j in range(len(gts)) if not taken[j]],
    )


def ap_from_tp(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP over recall in [0.1, 1] from a score-ordered TP flag list."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(np.asarray(tp, dtype=np.int64))
    precision = ctp / np.arange(1, len(tp) + 1)
    # make precision non-increasing from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= k/100  <=>  ctp*100 >= k*n_gt, compared in integers
    steps = RECALL_POINTS - 1
    idx = np.searchsorted(ctp * steps, np.arange(RECALL_POINTS) * n_gt, side="left")
    interp = np.where(idx < len(ctp), precision[np.minimum(idx, len(ctp) - 1)], 0.0)
    return float(interp[round(MIN_RECALL * (RECALL_POINTS - 1)):].mean())


def average_precision(dets: Sequence[Detection], gts: Sequence[Box3D], d: float) -> float:
    return ap_from_tp(match_detections(dets, gts, d).tp, len(gts))


def aligned_iou(a: Sequence[float], b: Sequence[float]) -> float:
    inter = float(np.prod(np.minimum(a, b)))
    return inter / (float(np.prod(a)) + float(np.prod(b)) - inter)


def yaw_diff(a: float, b: float) -> float:
    d = abs(a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def tp_errors(pairs: Sequence[tuple[Detection, Box3D]]) -> dict[str, float]:
    """Mean ATE / ASE / AOE over matched pairs; 1.0 each when there are none."""
    if not pairs:
        return {m: 1.0 for m in TP_METRICS}
    ate = [_bev_dist(d.box, g) for d, g in pairs]
    ase = [1.0 - aligned_iou(d.box.size, g.size) for d, g in pairs]
    aoe = [yaw_diff(d.box.yaw, g.yaw) for d, g in pairs]
    return {"ate": float(np.mean(ate)), "ase": float(np.mean(ase)), "aoe": float(np.mean(aoe))}


def nds(mean_ap: float, errs: dict[str, float]) -> float:
    normalized = {"ate": errs["ate"], "ase": errs["ase"], "aoe": errs["aoe"] / math.pi}
    tp_score = sum(1.0 - min(1.0, max(0.0, v)) for v in normalized.values())
    return (5.0 * mean_ap + tp_score) / (5.0 + len(normalized))


# ------------------------------------------------------------------ multi-scene evaluation

@dataclass
class Frame:
    dets: list[Detection]
    gts: list[Box3D]


def _frame_ap(frames: Sequence[Frame], class_id: int, d: float) -> tuple[float, int]:
    """AP for one class pooled over frames (matching is per frame, ranking is global)."""
    scores, tps, n_gt = [], [], 0
    for fr in frames:
        dets = [x for x in fr.dets if x.class_id == class_id]
        gts = [g for g in fr.gts if g.class_id == class_id]
        n_gt += len(gts)
        m = match_detections(dets, gts, d)
        scores.extend(dets[i].score for i in m.order)
        tps.extend(m.tp.tolist())
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return ap_from_tp(np.asarray(tps, dtype=bool)[order], n_gt), n_gt


def _class_tp_errors(frames: Sequence[Frame], class_id: int) -> dict[str, float]:
    pairs = []
    for fr in frames:
        dets = [x for x in fr.dets if x.class_id == class_id]
        gts = [g for g in fr.gts if g.class_id == class_id]
        m = match_detections(dets, gts, TP_THRESHOLD)
        pairs.extend((dets[i], gts[j]) for i, j in m.pairs)
    return tp_errors(pairs)


def mean_ap(frames: Sequence[Frame], num_classes: int, thresholds=THRESHOLDS):
    """Returns ``(mAP, per_class_ap)``; classes without ground truth are left out of the mean."""
    per_class: dict[str, dict[str, float]] = {}
    present = []
    for c in range(num_classes):
        aps = {}
        n_gt = 0
        for d in thresholds:
            aps[str(d)], n_gt = _frame_ap(frames, c, d)
        per_class[str(c)] = aps
        if n_gt:
            present.append(c)
    vals = [per_class[str(c)][str(d)] for c in present for d in thresholds]
    return (float(np.mean(vals)) if vals else 0.0), per_class, present


def _bucket(p: Sequence[float], edges: Sequence[float]) -> int:
    r = math.hypot(p[0], p[1])
    return int(np.searchsorted(edges, r, side="right"))


def distance_bucketed_map(frames: Sequence[Frame], num_classes: int, buckets: Sequence[float] = (15.0, 30.0),
                          thresholds=THRESHOLDS) -> tuple[dict[str, float], dict[str, int]]:
    """mAP per range bucket; GTs and detections are each binned by their own center."""
    edges = list(buckets)
    if edges != sorted(edges):
        raise ValueError("bucket edges must be sorted")
    names = _bucket_names(edges)
    out, counts = {}, {}
    for b, name in enumerate(names):
        sub = [Frame([d for d in fr.dets if _bucket(d.box.center, edges) == b],
                     [g for g in fr.gts if _bucket(g.center, edges) == b]) for fr in frames]
        counts[name] = sum(len(fr.gts) for fr in sub)
        out[name] = mean_ap(sub, num_classes, thresholds)[0] if counts[name] else 0.0
    return out, counts


def _bucket_names(edges: Sequence[float]) -> list[str]:
    if list(edges) == [15.0, 30.0]:
        return list(BUCKET_NAMES)
    fmt = lambda v: f"{v:g}"
    names = [f"<{fmt(edges[0])}m"]
    names += [f"{fmt(a)}-{fmt(b)}m" for a, b in zip(edges, edges[1:])]
    return names + [f">{fmt(edges[-1])}m"]


@dataclass
class MetricsReport:
    per_class_ap: dict[str, dict[str, float]]
    mAP: float
    ate: float
    ase: float
    aoe: float
    nds: float
    distance_bucket_map: dict[str, float]
    seed: int
    config_hash: str
    distance_bucket_gts: dict[str, int] = field(default_factory=dict)
    num_scenes: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def evaluate(frames: Sequence[Frame], num_classes: int, thresholds=THRESHOLDS, buckets=(15.0, 30.0),
             seed: int = 0, config_hash: str = "") -> MetricsReport:
    m, per_class, present = mean_ap(frames, num_classes, thresholds)
    if present:
        per = [_class_tp_errors(frames, c) for c in present]
        errs = {k: float(np.mean([e[k] for e in per])) for k in TP_METRICS}
    else:
        errs = {k: 1.0 for k in TP_METRICS}
    bucket_map, bucket_counts = distance_bucketed_map(frames, num_classes, buckets, thresholds)
    return MetricsReport(
        per_class_ap=per_class, mAP=m, nds=nds(m, errs), distance_bucket_map=bucket_map,
        distance_bucket_gts=bucket_counts, seed=seed, config_hash=config_hash,
        num_scenes=len(frames), **errs)
