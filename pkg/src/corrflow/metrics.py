"""Segmentation (J, F) and keypoint (PCK) metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


def region_j(pred: np.ndarray, gt: np.ndarray, object_id: int) -> float:
    """Intersection over union of one object's pixels; both empty -> 1.0."""
    p = np.asarray(pred) == object_id
    g = np.asarray(gt) == object_id
    if p.shape != g.shape:
        raise ValueError(f"region_j: extents {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` with a 4-neighbour outside it (the frame edge is not a boundary)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, mode="edge")
    inner = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~inner


def _disc(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius**2


def default_tolerance(height: int, width: int) -> int:
    """0.8% of the image diagonal, rounded up."""
    return math.ceil(0.008 * math.hypot(height, width))


def contour_f(pred: np.ndarray, gt: np.ndarray, object_id: int, tolerance_px: int | None = None) -> float:
    """Boundary F-measure with matches counted inside a disc of ``tolerance_px``."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"contour_f: extents {pred.shape} vs {gt.shape}")
    if tolerance_px is None:
        tolerance_px = default_tolerance(*gt.shape)
    pb = boundary(pred == object_id)
    gb = boundary(gt == object_id)
    np_, ng = pb.sum(), gb.sum()
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    disc = _disc(int(tolerance_px))
    gb_dil = ndimage.binary_dilation(gb, structure=disc) if tolerance_px > 0 else gb
    pb_dil = ndimage.binary_dilation(pb, structure=disc) if tolerance_px > 0 else pb
    precision = (pb & gb_dil).sum() / np_
    recall = (gb & pb_dil).sum() / ng
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class SegScore:
    j_mean: float
    j_recall: float
    f_mean: float
    f_recall: float
    per_object_j: list[np.ndarray] = field(default_factory=list, repr=False)
    per_object_f: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def jf_mean(self) -> float:
        return (self.j_mean + self.f_mean) / 2

    def table(self) -> str:
        head = f"{'J&F-Mean':>9} {'J-Mean':>7} {'J-Recall':>9} {'F-Mean':>7} {'F-Recall':>9}"
        row = f"{self.jf_mean:9.3f} {self.j_mean:7.3f} {self.j_recall:9.3f} {self.f_mean:7.3f} {self.f_recall:9.3f}"
        return head + "\n" + row


def davis_aggregate(j_frames, f_frames, skip_first: bool = True) -> SegScore:
    """Aggregate per-object, per-frame scores.

    ``j_frames`` / ``f_frames`` are sequences (one per object) of per-frame
    values.  The first (given) frame is dropped; means are averaged over
    objects; recall is the fraction of frames above 0.5.
    """
    js = [np.asarray(j, dtype=float)[1 if skip_first else 0 :] for j in j_frames]
    fs = [np.asarray(f, dtype=float)[1 if skip_first else 0 :] for f in f_frames]
    if not js or any(len(j) == 0 for j in js):
        raise ValueError("davis_aggregate: need at least one scored frame per object")
    return SegScore(
        j_mean=float(np.mean([j.mean() for j in js])),
        j_recall=float(np.mean([(j > 0.5).mean() for j in js])),
        f_mean=float(np.mean([f.mean() for f in fs])),
        f_recall=float(np.mean([(f > 0.5).mean() for f in fs])),
        per_object_j=js,
        per_object_f=fs,
    )


def score_sequence(preds, gts, tolerance_px: int | None = None) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-object per-frame J and F over a whole sequence (objects = ids > 0 in the gt)."""
    preds, gts = np.asarray(preds), np.asarray(gts)
    if preds.shape != gts.shape:
        raise ValueError(f"score_sequence: extents {preds.shape} vs {gts.shape}")
    objects = [int(o) for o in np.unique(gts) if o != 0]
    J = [np.array([region_j(p, g, o) for p, g in zip(preds, gts)]) for o in objects]
    F = [np.array([contour_f(p, g, o, tolerance_px) for p, g in zip(preds, gts)]) for o in objects]
    return J, F


# ---------------------------------------------------------------------------
# keypoints


@dataclass
class PckScore:
    instance: dict[float, float | None]
    max: dict[float, float | None]

    def table(self) -> str:
        alphas = sorted(set(self.instance) | set(self.max))
        cols = " ".join(f"{'@' + format(a, 'g').lstrip('0'):>7}" for a in alphas)
        lines = [f"{'':14}{cols}"]
        for label, vals in (("PCK_instance", self.instance), ("PCK_max", self.max)):
            cells = " ".join(f"{_fmt(vals.get(a)):>7}" for a in alphas)
            lines.append(f"{label:14}{cells}")
        return "\n".join(lines)


def _fmt(v):
    return "-" if v is None else f"{v:.3f}"


def _visible(gts, visible):
    gts = np.asarray(gts, dtype=float)
    if visible is None:
        if gts.shape[-1] == 3:
            return gts[..., :2], gts[..., 2] > 0
        return gts, np.ones(gts.shape[:-1], dtype=bool)
    return gts[..., :2], np.asarray(visible, dtype=bool)


def bbox_diagonal(points: np.ndarray) -> float:
    span = points.max(0) - points.min(0)
    return float(np.hypot(*span))


def pck_instance(preds, gts, alpha: float, visible=None, strict: bool = True) -> float | None:
    """Fraction of visible keypoints whose distance / instance normalizer is below ``alpha``.

    Arrays are ``(K, 2)`` for one instance or ``(N, K, 2)`` for several; the
    normalizer is the diagonal of each instance's visible ground-truth
    keypoint bounding box.  Returns ``None`` when nothing is visible.
    """
    gt_xy, vis = _visible(gts, visible)
    pred_xy = np.asarray(preds, dtype=float)[..., :2]
    if gt_xy.ndim == 2:
        gt_xy, pred_xy, vis = gt_xy[None], pred_xy[None], vis[None]
    hits, count = 0, 0
    for p, g, v in zip(pred_xy, gt_xy, vis):
        if not v.any():
            continue
        norm = bbox_diagonal(g[v])
        d = np.linalg.norm(p[v] - g[v], axis=-1)
        nd = d / norm if norm > 0 else np.where(d == 0, 0.0, np.inf)
        ok = (nd < alpha) if strict else (nd <= alpha)
        hits += int(v.sum()) if math.isinf(alpha) else int(ok.sum())
        count += int(v.sum())
    return hits / count if count else None


def pck_max(preds, gts, alpha: float, bbox_w, bbox_h, visible=None) -> float | None:
    """Fraction of visible keypoints within ``alpha * max(w, h)`` pixels (inclusive).

    ``bbox_w``/``bbox_h`` are scalars or one value per instance.
    """
    gt_xy, vis = _visible(gts, visible)
    pred_xy = np.asarray(preds, dtype=float)[..., :2]
    if gt_xy.ndim == 2:
        gt_xy, pred_xy, vis = gt_xy[None], pred_xy[None], vis[None]
    bw = np.broadcast_to(np.asarray(bbox_w, dtype=float), (len(gt_xy),))
    bh = np.broadcast_to(np.asarray(bbox_h, dtype=float), (len(gt_xy),))
    if (bw <= 0).any() or (bh <= 0).any():
        raise ValueError("pck_max: bounding box extents must be positive")
    hits, count = 0, 0
    for p, g, v, w, h in zip(pred_xy, gt_xy, vis, bw, bh):
        d = np.linalg.norm(p[v] - g[v], axis=-1)
        hits += int((d <= alpha * max(w, h)).sum())
        count += int(v.sum())
    return hits / count if count else None


def instance_bbox(gts, visible=None) -> tuple[np.ndarray, np.ndarray]:
    """Width and height of each instance's visible keypoint bounding box."""
    gt_xy, vis = _visible(gts, visible)
    if gt_xy.ndim == 2:
        gt_xy, vis = gt_xy[None], vis[None]
    ws, hs = [], []
    for g, v in zip(gt_xy, vis):
        if v.any():
            span = g[v].max(0) - g[v].min(0)
            ws.append(max(span[0], 1.0))
            hs.append(max(span[1], 1.0))
        else:
            ws.append(1.0)
            hs.append(1.0)
    return np.array(ws), np.array(hs)


def pck_scores(preds, gts, alphas=(0.1, 0.2), visible=None, bbox=None) -> PckScore:
    if bbox is None:
        bbox = instance_bbox(gts, visible)
    return PckScore(
        {a: pck_instance(preds, gts, a, visible) for a in alphas},
        {a: pck_max(preds, gts, a, bbox[0], bbox[1], visible) for a in alphas},
    )
