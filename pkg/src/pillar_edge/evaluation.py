"""Detection metrics at a fixed operating point: greedy matching, P/R/F1 and AP."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .config import DEFAULT_CONF_THR, DEFAULT_IOU_THR
from .errors import EvaluationError
from .frames import Box3D, GtObject, normalize_angle
from .postprocess import Detection, bev_iou_many


@dataclass(frozen=True)
class EvalConfig:
    iou_thr: float = DEFAULT_IOU_THR
    conf_thr: float = DEFAULT_CONF_THR

    def __post_init__(self) -> None:
        if not (0.0 <= self.iou_thr <= 1.0 and 0.0 <= self.conf_thr <= 1.0):
            raise ValueError("iou_thr and conf_thr must lie in [0, 1]")


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    ap: float

    def lines(self) -> list[str]:
        return [f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in asdict(self).items()]

    def to_json(self) -> str:
        return json.dumps({k: round(v, 6) if isinstance(v, float) else v for k, v in asdict(self).items()}, sort_keys=True)


def _box(obj) -> Box3D:
    return obj.box if isinstance(obj, (GtObject, Detection)) else obj


def _score_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)  # stable: ties keep input order


def _match_flags(dets: Sequence[Detection], gts: Sequence, iou_thr: float) -> tuple[list[int], list[bool], list[tuple[int, int]]]:
    order = _score_order(dets)
    gt_arr = np.array([_box(g).as_tuple() for g in gts], dtype=np.float64).reshape(-1, 7)
    taken = np.zeros(len(gts), dtype=bool)
    flags, pairs = [], []
    for i in order:
        hit = False
        if len(gts):
            ious = np.where(taken, -1.0, bev_iou_many(dets[i].box, gt_arr))
            best = int(np.argmax(ious))  # first maximum: lowest gt index on ties
            if not taken[best] and ious[best] >= iou_thr:
                hit = True
                taken[best] = True
                pairs.append((i, best))
        flags.append(hit)
    return order, flags, pairs


def match_detections(dets: Sequence[Detection], gts: Sequence, iou_thr: float) -> tuple[int, int, int, list[tuple[int, int]]]:
    """Greedy single-frame matching by descending score.

    Returns ``(tp, fp, fn, pairs)`` where ``pairs`` holds (detection index, gt index).
    """
    _, flags, pairs = _match_flags(dets, gts, iou_thr)
    tp = sum(flags)
    return tp, len(dets) - tp, len(gts) - tp, pairs


def prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, f1_score(precision, recall)


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0 else 0.0


def _group(dets: Sequence[Detection]) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    for d in dets:
        out.setdefault(d.frame_id, []).append(d)
    return out


def average_precision(dets: Sequence[Detection], gts: Mapping[int, Sequence], iou_thr: float) -> float:
    """All-point interpolated AP over every frame in ``gts``.

    Detections are not confidence-filtered; the score axis is swept instead.
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        raise EvaluationError("average precision is undefined without ground truth")
    scored: list[tuple[float, int, bool]] = []
    for fid, frame_dets in _group(dets).items():
        order, flags, _ = _match_flags(frame_dets, gts.get(fid, []), iou_thr)
        base = len(scored)
        scored.extend((frame_dets[i].score, base + k, f) for k, (i, f) in enumerate(zip(order, flags)))
    if not scored:
        return 0.0
    scored.sort(key=lambda t: (-t[0], t[1]))
    hits = np.array([f for _, _, f in scored], dtype=np.float64)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def evaluate(dets: Sequence[Detection], gts: Mapping[int, Sequence], config: EvalConfig = EvalConfig()) -> EvalReport:
    """P/R/F1 on ``conf_thr``-filtered detections, AP on all of them."""
    unknown = sorted({d.frame_id for d in dets} - set(gts))
    if unknown:
        raise EvaluationError(f"detections reference frames without labels: {unknown[:5]}")
    by_frame = _group([d for d in dets if d.score >= config.conf_thr])
    tp = fp = fn = 0
    for fid, frame_gts in gts.items():
        t, f, n, _ = match_detections(by_frame.get(fid, []), frame_gts, config.iou_thr)
        tp, fp, fn = tp + t, fp + f, fn + n
    p, r, f1 = prf1(tp, fp, fn)
    ap = average_precision(dets, gts, config.iou_thr)
    return EvalReport(tp, fp, fn, p, r, f1, ap)


def perturb_gt_to_dets(
    gts: Mapping[int, Sequence[GtObject]],
    drop_rate: float,
    fp_rate: float,
    jitter_sigma: float,
    seed: int,
    range_x: tuple[float, float] = (5.0, 60.0),
    range_y: tuple[float, float] = (-30.0, 30.0),
) -> list[Detection]:
    """Synthetic detector built from ground truth, for harness self-tests.

    Each object survives with probability ``1 - drop_rate`` as a detection with
    center jittered by N(0, jitter_sigma) and score ~ U[0.5, 1]. Each frame gets
    one false positive with probability ``fp_rate``, placed where its bounding
    circle clears every object, with score ~ U[0.3, 0.7].
    """
    if not (0.0 <= drop_rate <= 1.0 and 0.0 <= fp_rate <= 1.0):
        raise ValueError("rates must lie in [0, 1]")
    if jitter_sigma < 0:
        raise ValueError("jitter_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    out: list[Detection] = []
    for fid in sorted(gts):
        frame_gts = gts[fid]
        for g in frame_gts:
            b = g.box
            keep = rng.random() >= drop_rate
            jitter = rng.normal(0.0, jitter_sigma, 3) if jitter_sigma > 0 else np.zeros(3)
            score = rng.uniform(0.5, 1.0)
            if keep:
                box = Box3D(b.cx + jitter[0], b.cy + jitter[1], b.cz + jitter[2], b.dx, b.dy, b.dz, b.theta)
                out.append(Detection(fid, g.class_name, float(score), box))
        if rng.random() < fp_rate:
            box = _empty_space_box(rng, frame_gts, range_x, range_y)
            if box is not None:
                out.append(Detection(fid, "Car", float(rng.uniform(0.3, 0.7)), box))
    return out


def _empty_space_box(rng: np.random.Generator, gts: Sequence[GtObject], range_x, range_y, tries: int = 100) -> Box3D | None:
    dx, dy, dz = rng.uniform(3.5, 4.5), rng.uniform(1.5, 1.9), rng.uniform(1.4, 1.7)
    r = 0.5 * math.hypot(dx, dy)
    for _ in range(tries):
        cx, cy = rng.uniform(*range_x), rng.uniform(*range_y)
        if all(math.hypot(cx - g.box.cx, cy - g.box.cy) > r + 0.5 * math.hypot(g.box.dx, g.box.dy) for g in gts):
            return Box3D(cx, cy, dz / 2.0, dx, dy, dz, normalize_angle(rng.uniform(-math.pi, math.pi)))
    return None
