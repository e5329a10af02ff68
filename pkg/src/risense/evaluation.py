"""
COCO-style detection scoring: IoU, greedy matching, 101-point interpolated
AP per class and mAP over IoU thresholds 0.50:0.05:0.95.

Matching pools detections over all images: detections are ranked by score
(descending; ties broken by box coordinates, then image id) and each one is
matched, within its own image, to the unmatched ground truth of its class
with the highest IoU at or above the threshold. Equal IoUs go to the lowest
ground-truth index.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import UndefinedAp
from .spectrogram import PixelBox
from .waveform import SignalClass

COCO_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.arange(101) / 100  # exactly i/100, so recall k/n == i/100 always counts


@dataclass(frozen=True)
class ScoredBox:
    image_id: str
    cls: SignalClass
    box: PixelBox
    score: float

    def __post_init__(self):
        object.__setattr__(self, "cls", SignalClass(self.cls))


@dataclass(frozen=True)
class LabeledBox:
    image_id: str
    cls: SignalClass
    box: PixelBox

    def __post_init__(self):
        object.__setattr__(self, "cls", SignalClass(self.cls))


@dataclass(frozen=True)
class MatchConfig:
    iou_thresholds: tuple = COCO_THRESHOLDS

    def __post_init__(self):
        thr = tuple(float(t) for t in self.iou_thresholds)
        if not thr or any(not 0 < t <= 1 for t in thr) or any(b <= a for a, b in zip(thr, thr[1:])):
            raise ValueError("IoU thresholds must be strictly increasing in (0, 1]")
        object.__setattr__(self, "iou_thresholds", thr)


@dataclass
class MatchResult:
    tp: np.ndarray
    fp: np.ndarray
    n_gt: int
    scores: np.ndarray
    order: list = field(default_factory=list)


@dataclass
class ApReport:
    thresholds: tuple
    ap: dict            # class -> {threshold: AP}
    ap50: dict          # class -> AP at IoU 0.5 (None if 0.5 not evaluated)
    ap_range: dict      # class -> mean AP over thresholds
    map_range: Optional[float]
    map50: Optional[float]
    absent_classes: list
    pr_curves: dict     # (class, threshold) -> (recall, precision)

    def to_dict(self) -> dict:
        return {
            "iou_thresholds": list(self.thresholds),
            "classes": {
                c: {"ap": {f"{t:.2f}": v for t, v in self.ap[c].items()},
                    "ap50": self.ap50[c], "ap_50_95": self.ap_range[c]}
                for c in self.ap
            },
            "mAP_50_95": self.map_range,
            "mAP_50": self.map50,
            "absent_classes": self.absent_classes,
        }

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        """JSON summary plus a CSV of every PR curve."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath = out_dir / f"{stem}.json"
        jpath.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        cpath = out_dir / f"{stem}_pr.csv"
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "iou_threshold", "rank", "recall", "precision"])
            for (c, t), (rec, prec) in sorted(self.pr_curves.items()):
                for i, (r, p) in enumerate(zip(rec, prec)):
                    w.writerow([c, f"{t:.2f}", i, repr(float(r)), repr(float(p))])
        return jpath, cpath


def _coords(b) -> tuple[float, float, float, float]:
    return b.as_tuple() if isinstance(b, PixelBox) else tuple(float(v) for v in b)


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = _coords(a)
    bx0, by0, bx1, by1 = _coords(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def rank_detections(dets: Sequence[ScoredBox]) -> list[int]:
    return sorted(range(len(dets)),
                  key=lambda i: (-dets[i].score, dets[i].box.as_tuple(), dets[i].image_id))


def match(dets: Sequence[ScoredBox], gts: Sequence[LabeledBox], cls, iou_thr: float) -> MatchResult:
    cls = SignalClass(cls)
    dets = [d for d in dets if d.cls is cls]
    gts_by_image: dict[str, list[LabeledBox]] = {}
    for g in gts:
        if g.cls is cls:
            gts_by_image.setdefault(g.image_id, []).append(g)
    n_gt = sum(len(v) for v in gts_by_image.values())
    order = rank_detections(dets)
    taken = {k: [False] * len(v) for k, v in gts_by_image.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        best, best_iou = -1, iou_thr
        for j, g in enumerate(gts_by_image.get(d.image_id, ())):
            if taken[d.image_id][j]:
                continue
            o = iou(d.box, g.box)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = j, o
        if best >= 0:
            taken[d.image_id][best] = True
            tp[rank] = True
    scores = np.array([dets[i].score for i in order], dtype=float)
    return MatchResult(tp=tp, fp=~tp, n_gt=n_gt, scores=scores, order=order)


def precision_recall(result: MatchResult) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(result.tp)
    fp = np.cumsum(result.fp)
    recall = tp / result.n_gt if result.n_gt else np.zeros_like(tp, dtype=float)
    precision = tp / np.maximum(tp + fp, 1)
    return recall.astype(float), precision.astype(float)


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Mean over r in {0, 0.01, ..., 1} of the max precision at recall >= r."""
    if recall.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(np.mean(sampled))


def average_precision(dets: Sequence[ScoredBox], gts: Sequence[LabeledBox], cls, iou_thr: float) -> float:
    result = match(dets, gts, cls, iou_thr)
    if result.n_gt == 0:
        raise UndefinedAp(f"no ground truth of class {SignalClass(cls).value}")
    return interpolated_ap(*precision_recall(result))


def map_range(dets: Sequence[ScoredBox], gts: Sequence[LabeledBox], cfg: MatchConfig = MatchConfig()) -> ApReport:
    present = [c for c in SignalClass if any(g.cls is c for g in gts)]
    absent = [c.value for c in SignalClass if c not in present]
    ap, ap50, ap_rng, curves = {}, {}, {}, {}
    for c in present:
        per_thr = {}
        for t in cfg.iou_thresholds:
            result = match(dets, gts, c, t)
            rec, prec = precision_recall(result)
            per_thr[t] = interpolated_ap(rec, prec)
            curves[(c.value, t)] = (rec, prec)
        ap[c.value] = per_thr
        ap50[c.value] = per_thr.get(0.5)
        ap_rng[c.value] = float(np.mean(list(per_thr.values())))
    m = float(np.mean(list(ap_rng.values()))) if ap_rng else None
    vals50 = [v for v in ap50.values() if v is not None]
    m50 = float(np.mean(vals50)) if vals50 and len(vals50) == len(ap50) else None
    return ApReport(cfg.iou_thresholds, ap, ap50, ap_rng, m, m50, absent, curves)


def delta_table(off: ApReport, optimized: ApReport) -> list[dict]:
    """Per-class Off vs Optimized AP rows (AP@0.5 and AP@[.5:.95]) plus the mAP row."""
    rows = []
    for c in SignalClass:
        name = c.value
        if name not in off.ap and name not in optimized.ap:
            continue
        row = {"class": name}
        for key, src in (("ap50", "ap50"), ("ap_50_95", "ap_range")):
            a = getattr(off, src).get(name)
            b = getattr(optimized, src).get(name)
            row[f"{key}_off"] = a
            row[f"{key}_optimized"] = b
            row[f"{key}_delta"] = None if a is None or b is None else b - a
        rows.append(row)
    rows.append({"class": "mAP",
                 "ap50_off": off.map50, "ap50_optimized": optimized.map50,
                 "ap50_delta": _diff(optimized.map50, off.map50),
                 "ap_50_95_off": off.map_range, "ap_50_95_optimized": optimized.map_range,
                 "ap_50_95_delta": _diff(optimized.map_range, off.map_range)})
    return rows


def _diff(a, b):
    return None if a is None or b is None else a - b


def format_delta_table(rows: Iterable[dict]) -> str:
    def f(v):
        return "   n/a" if v is None else f"{v:6.3f}"
    lines = [f"{'class':<12} {'AP50 off':>9} {'AP50 on':>9} {'delta':>7} {'AP off':>9} {'AP on':>9} {'delta':>7}"]
    for r in rows:
        lines.append(f"{r['class']:<12} {f(r['ap50_off']):>9} {f(r['ap50_optimized']):>9} {f(r['ap50_delta']):>7} "
                     f"{f(r['ap_50_95_off']):>9} {f(r['ap_50_95_optimized']):>9} {f(r['ap_50_95_delta']):>7}")
    return "\n".join(lines) + "\n"


def best_match_iou(dets: Sequence[ScoredBox], gt: LabeledBox) -> float:
    """Highest IoU between ``gt`` and any same-class detection in its image (0 if none)."""
    ious = [iou(d.box, gt.box) for d in dets if d.image_id == gt.image_id and d.cls is gt.cls]
    return max(ious, default=0.0)
