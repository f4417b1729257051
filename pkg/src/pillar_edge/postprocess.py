"""Anchors, box coding, score filtering, rotated BEV IoU and greedy NMS.

Anchor ``n`` sits at output cell ``(i, j)`` with yaw slot ``a`` where
``n = (i * Wo + j) * A + a``. Head map channels follow the same slot order:
``cls_map[a]`` and ``box_map[a * 7 + k]``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ModelConfig, Thresholds
from .errors import FormatError
from .frames import Box3D, normalize_angles
from .model import HeadOutput


@dataclass(frozen=True, eq=False)
class AnchorGrid:
    boxes: np.ndarray  # [Ho*Wo*A, 7] float64
    shape: tuple[int, int, int]  # (Ho, Wo, A)

    def __len__(self) -> int:
        return self.boxes.shape[0]


@dataclass(frozen=True)
class Detection:
    frame_id: int
    class_name: str
    score: float
    box: Box3D
    anchor_index: int = -1

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(
            {"frame_id": self.frame_id, "class": self.class_name, "score": self.score, "box": list(self.box.as_tuple())},
            separators=(",", ":"),
        )


def gen_anchors(config: ModelConfig) -> AnchorGrid:
    g = config.grid
    ho, wo = config.output_size
    cell_w = (g.x_max - g.x_min) / wo
    cell_h = (g.y_max - g.y_min) / ho
    xs = g.x_min + (np.arange(wo) + 0.5) * cell_w
    ys = g.y_min + (np.arange(ho) + 0.5) * cell_h
    yaws = np.asarray(config.anchor.yaws, dtype=np.float64)
    a = yaws.size
    boxes = np.empty((ho, wo, a, 7))
    boxes[..., 0] = xs[None, :, None]
    boxes[..., 1] = ys[:, None, None]
    boxes[..., 2] = config.anchor.z_center
    boxes[..., 3:6] = config.anchor.size
    boxes[..., 6] = yaws[None, None, :]
    return AnchorGrid(boxes.reshape(-1, 7), (ho, wo, a))


def flatten_box_map(box_map: np.ndarray, n_anchors: int) -> np.ndarray:
    """[A*7, Ho, Wo] -> [Ho*Wo*A, 7] in anchor order."""
    c, ho, wo = box_map.shape
    return box_map.reshape(n_anchors, c // n_anchors, ho, wo).transpose(2, 3, 0, 1).reshape(-1, c // n_anchors)


def flatten_cls_map(cls_map: np.ndarray) -> np.ndarray:
    """[A, Ho, Wo] -> [Ho*Wo*A] in anchor order."""
    return cls_map.transpose(1, 2, 0).reshape(-1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Residual decoding; both arrays are [N, 7] of (x, y, z, l, w, h, yaw)."""
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if not np.isfinite(deltas).all():
        raise ValueError("non-finite box delta")
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    out = np.empty_like(anchors)
    out[:, 0] = anchors[:, 0] + deltas[:, 0] * diag
    out[:, 1] = anchors[:, 1] + deltas[:, 1] * diag
    out[:, 2] = anchors[:, 2] + deltas[:, 2] * anchors[:, 5]
    out[:, 3:6] = anchors[:, 3:6] * np.exp(deltas[:, 3:6])
    out[:, 6] = normalize_angles(anchors[:, 6] + deltas[:, 6])
    return out


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    out = np.empty_like(anchors)
    out[:, 0] = (boxes[:, 0] - anchors[:, 0]) / diag
    out[:, 1] = (boxes[:, 1] - anchors[:, 1]) / diag
    out[:, 2] = (boxes[:, 2] - anchors[:, 2]) / anchors[:, 5]
    out[:, 3:6] = np.log(boxes[:, 3:6] / anchors[:, 3:6])
    out[:, 6] = normalize_angles(boxes[:, 6] - anchors[:, 6])
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def score_filter(cls_map: np.ndarray, conf_thr: float, anchors: AnchorGrid | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Anchor indices (ascending) and sigmoid scores with score >= conf_thr."""
    if not 0.0 <= conf_thr <= 1.0:
        raise ValueError("conf_thr must lie in [0, 1]")
    scores = sigmoid(flatten_cls_map(cls_map))
    if anchors is not None and scores.size != len(anchors):
        raise ValueError(f"{scores.size} scores for {len(anchors)} anchors")
    idx = np.flatnonzero(scores >= conf_thr)
    return idx, scores[idx]


# ---------------------------------------------------------------- BEV IoU


def bev_corners(box) -> list[tuple[float, float]]:
    """Footprint corners, counter-clockwise."""
    cx, cy, _, l, w, _, t = box.as_tuple() if isinstance(box, Box3D) else box
    c, s = math.cos(t), math.sin(t)
    hl, hw = l / 2.0, w / 2.0
    return [
        (cx + c * px - s * py, cy + s * px + c * py)
        for px, py in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    ]


def polygon_area(poly: Sequence[tuple[float, float]]) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return abs(acc) / 2.0


def clip_polygon(subject: list[tuple[float, float]], clip: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    out = subject
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        m = len(inp)
        for j in range(m):
            px, py = inp[j - 1]
            qx, qy = inp[j]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sq >= 0:
                if sp < 0:
                    t = sp / (sp - sq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
                out.append((qx, qy))
            elif sp >= 0:
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def bev_iou(a, b) -> float:
    """IoU of two yaw-rotated footprints; accepts :class:`Box3D` or 7-sequences."""
    ta = a.as_tuple() if isinstance(a, Box3D) else tuple(a)
    tb = b.as_tuple() if isinstance(b, Box3D) else tuple(b)
    area_a = ta[3] * ta[4]
    area_b = tb[3] * tb[4]
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = polygon_area(clip_polygon(bev_corners(ta), bev_corners(tb)))
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def _corners_many(boxes: np.ndarray) -> np.ndarray:
    """[N, 7] -> [N, 4, 2] CCW footprint corners."""
    c, s = np.cos(boxes[:, 6]), np.sin(boxes[:, 6])
    px = np.array([0.5, -0.5, -0.5, 0.5])[None, :] * boxes[:, 3:4]
    py = np.array([0.5, 0.5, -0.5, -0.5])[None, :] * boxes[:, 4:5]
    x = boxes[:, 0:1] + c[:, None] * px - s[:, None] * py
    y = boxes[:, 1:2] + s[:, None] * px + c[:, None] * py
    return np.stack([x, y], axis=2)


def _inside(points: np.ndarray, poly: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    """points [N, M, 2] inside convex CCW poly [N, 4, 2] -> [N, M]."""
    a = poly[:, None, :, :]
    e = np.roll(poly, -1, axis=1)[:, None, :, :] - a
    d = points[:, :, None, :] - a
    cross = e[..., 0] * d[..., 1] - e[..., 1] * d[..., 0]
    return (cross >= -eps).all(axis=2)


def _intersection_area(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Area of the intersection of convex quads, batched over N.

    The intersection polygon's vertices are the corners of each quad lying in
    the other plus all edge-edge crossings; they are ordered by angle around
    their centroid and summed with the shoelace formula.
    """
    n = pa.shape[0]
    a1, a2 = pa, np.roll(pa, -1, axis=1)
    b1, b2 = pb, np.roll(pb, -1, axis=1)
    r = (a2 - a1)[:, :, None, :]
    q = (b2 - b1)[:, None, :, :]
    denom = r[..., 0] * q[..., 1] - r[..., 1] * q[..., 0]
    diff = b1[:, None, :, :] - a1[:, :, None, :]
    safe = np.where(np.abs(denom) < 1e-12, 1.0, denom)
    t = (diff[..., 0] * q[..., 1] - diff[..., 1] * q[..., 0]) / safe
    u = (diff[..., 0] * r[..., 1] - diff[..., 1] * r[..., 0]) / safe
    cross_ok = (np.abs(denom) >= 1e-12) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    cross_pts = (a1[:, :, None, :] + t[..., None] * r).reshape(n, 16, 2)

    pts = np.concatenate([pa, pb, cross_pts], axis=1)
    valid = np.concatenate([_inside(pa, pb), _inside(pb, pa), cross_ok.reshape(n, 16)], axis=1)
    count = valid.sum(axis=1)
    w = valid[..., None].astype(np.float64)
    centroid = (pts * w).sum(axis=1) / np.maximum(count, 1)[:, None]
    ang = np.arctan2(pts[..., 1] - centroid[:, 1:2], pts[..., 0] - centroid[:, 0:1])
    ang = np.where(valid, ang, np.inf)
    order = np.argsort(ang, axis=1)
    pts = np.take_along_axis(pts, order[..., None], axis=1)
    valid = np.take_along_axis(valid, order, axis=1)
    # pad the tail with the last valid vertex so it adds zero area
    last = np.take_along_axis(pts, np.maximum(count - 1, 0)[:, None, None].repeat(2, axis=2), axis=1)
    pts = np.where(valid[..., None], pts, last)
    nxt = np.roll(pts, -1, axis=1)
    area = 0.5 * np.abs((pts[..., 0] * nxt[..., 1] - nxt[..., 0] * pts[..., 1]).sum(axis=1))
    return np.where(count >= 3, area, 0.0)


def bev_iou_many(box, others: np.ndarray) -> np.ndarray:
    """IoU of one box against [N, 7] boxes (vectorized; pairs with disjoint bounding circles are 0)."""
    others = np.asarray(others, dtype=np.float64).reshape(-1, 7)
    out = np.zeros(others.shape[0])
    t = np.asarray(box.as_tuple() if isinstance(box, Box3D) else box, dtype=np.float64)
    reach = 0.5 * (math.hypot(t[3], t[4]) + np.hypot(others[:, 3], others[:, 4]))
    near = np.flatnonzero(np.hypot(others[:, 0] - t[0], others[:, 1] - t[1]) < reach)
    if near.size == 0 or t[3] * t[4] <= 0:
        return out
    sub = others[near]
    pa = np.broadcast_to(_corners_many(t[None, :]), (near.size, 4, 2))
    inter = _intersection_area(pa, _corners_many(sub))
    union = t[3] * t[4] + sub[:, 3] * sub[:, 4] - inter
    iou = np.where((union > 0) & (sub[:, 3] * sub[:, 4] > 0), inter / np.where(union > 0, union, 1.0), 0.0)
    out[near] = np.clip(iou, 0.0, 1.0)
    return out


# ---------------------------------------------------------------- NMS


def _overlapping_pairs(boxes: np.ndarray, iou_thr: float = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pairs i < j that may reach ``iou_thr``, with their IoU (first box of the pair is ``i``).

    Pairs are dropped when an upper bound on their IoU (axis-aligned overlap of
    the rotated boxes, capped by the smaller area) is already below the
    threshold, so every pair with IoU >= ``iou_thr`` > 0 is returned.
    """
    radius = 0.5 * np.hypot(boxes[:, 3], boxes[:, 4])
    dist = np.hypot(boxes[:, None, 0] - boxes[None, :, 0], boxes[:, None, 1] - boxes[None, :, 1])
    near = np.triu(dist < radius[:, None] + radius[None, :], k=1)
    i, j = np.nonzero(near)
    if i.size and iou_thr > 0:
        c, s = np.abs(np.cos(boxes[:, 6])), np.abs(np.sin(boxes[:, 6]))
        hx = 0.5 * (boxes[:, 3] * c + boxes[:, 4] * s)
        hy = 0.5 * (boxes[:, 3] * s + boxes[:, 4] * c)
        ox = np.minimum(boxes[i, 0] + hx[i], boxes[j, 0] + hx[j]) - np.maximum(boxes[i, 0] - hx[i], boxes[j, 0] - hx[j])
        oy = np.minimum(boxes[i, 1] + hy[i], boxes[j, 1] + hy[j]) - np.maximum(boxes[i, 1] - hy[i], boxes[j, 1] - hy[j])
        area = boxes[:, 3] * boxes[:, 4]
        ub = np.minimum(np.clip(ox, 0, None) * np.clip(oy, 0, None), np.minimum(area[i], area[j]))
        # IoU is increasing in the intersection, so the bound carries over; small slack guards rounding
        ub_iou = ub / np.maximum(area[i] + area[j] - ub, 1e-12)
        ok = ub_iou >= iou_thr * (1.0 - 1e-9)
        i, j = i[ok], j[ok]
    if i.size == 0:
        return i, j, np.zeros(0)
    a, b = boxes[i], boxes[j]
    inter = _intersection_area(_corners_many(a), _corners_many(b))
    area_a, area_b = a[:, 3] * a[:, 4], b[:, 3] * b[:, 4]
    union = area_a + area_b - inter
    ok = (union > 0) & (area_a > 0) & (area_b > 0)
    iou = np.where(ok, inter / np.where(union > 0, union, 1.0), 0.0)
    return i, j, np.clip(iou, 0.0, 1.0)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thr: float, tie_keys: np.ndarray | None = None) -> list[int]:
    """Greedy NMS over arrays; returns kept positions in keep order.

    Sort is by score descending, then ascending ``tie_keys`` (default: position).
    """
    if not 0.0 <= iou_thr <= 1.0:
        raise ValueError("iou_thr must lie in [0, 1]")
    n = len(scores)
    if n == 0:
        return []
    keys = np.arange(n) if tie_keys is None else np.asarray(tie_keys)
    order = np.lexsort((keys, -np.asarray(scores, dtype=np.float64)))
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)[order]
    # IoU of every candidate pair up front; the greedy pass then only walks suppression lists
    i, j, iou = _overlapping_pairs(boxes, iou_thr)
    hit = iou >= iou_thr
    i, j = i[hit], j[hit]
    starts = np.searchsorted(i, np.arange(n + 1))
    alive = np.ones(n, dtype=bool)
    keep = []
    for pos in range(n):
        if not alive[pos]:
            continue
        keep.append(int(order[pos]))
        alive[j[starts[pos] : starts[pos + 1]]] = False
    return keep


def nms(dets: list[Detection], iou_thr: float) -> list[Detection]:
    if not dets:
        return []
    boxes = np.array([d.box.as_tuple() for d in dets])
    scores = np.array([d.score for d in dets])
    keys = np.array([d.anchor_index if d.anchor_index >= 0 else i for i, d in enumerate(dets)])
    return [dets[i] for i in nms_indices(boxes, scores, iou_thr, keys)]


def postprocess(head: HeadOutput, anchors: AnchorGrid, thresholds: Thresholds, frame_id: int = 0) -> list[Detection]:
    """Score floor, top-K, decode and NMS for one frame."""
    idx, scores = score_filter(head.cls_map, thresholds.score_thr, anchors)
    if idx.size > thresholds.pre_nms_top_k:
        top = np.lexsort((idx, -scores))[: thresholds.pre_nms_top_k]
        idx, scores = idx[top], scores[top]
    deltas = flatten_box_map(head.box_map, anchors.shape[2])[idx]
    boxes = decode_boxes(anchors.boxes[idx], deltas)
    keep = nms_indices(boxes, scores, thresholds.nms_iou, idx)
    return [
        Detection(frame_id, "Car", float(scores[k]), Box3D.from_array(boxes[k]), int(idx[k]))
        for k in keep
    ]


# ---------------------------------------------------------------- JSONL


def write_detections(dets: Iterable[Detection], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in dets:
            fh.write(d.to_json() + "\n")


def read_detections(path: str | os.PathLike) -> list[Detection]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            out.append(Detection(int(d["frame_id"]), str(d["class"]), float(d["score"]), Box3D(*map(float, d["box"]))))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{Path(path).name}:{lineno}: bad detection record ({exc})") from exc
    return out
