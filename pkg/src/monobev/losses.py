"""Training objective and evaluation metrics for BEV semantic maps.

Maps are (N_c, Z, X): predicted per-class probabilities in [0, 1] or
binary ground truth. The visibility mask (Z, X) routes cells between the
visible-region cross-entropy and the occluded-region uncertainty loss;
the smoothed IoU objective deliberately ignores it and covers all cells.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Value

BCE_EPS = 1e-7
PAPER_EVAL_SHAPE = (196, 200)


@dataclass
class LossWeights:
    alpha: float = 0.001  # occluded-region uncertainty term
    beta: float = 0.01  # smoothed IoU term
    class_weights: np.ndarray | None = None  # per-class BCE weights, mean 1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be nonnegative: alpha={self.alpha}, beta={self.beta}")
        if self.class_weights is not None:
            self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(self.class_weights <= 0):
                raise ValueError("class weights must be positive")


def class_weights_from_frequency(gt_maps, eps=1e-3, clip=(0.25, 4.0)):
    """Inverse square-root class frequency over a training split, mean 1.

    Weights are clipped to `clip` (relative to the mean) and renormalized
    so absent classes cannot starve the dominant layout classes of
    supervision.
    """
    stack = np.stack([np.asarray(g, dtype=np.float64) for g in gt_maps])
    freq = stack.mean(axis=(0, 2, 3))
    w = 1.0 / np.sqrt(freq + eps)
    w = np.clip(w / w.mean(), clip[0], clip[1])
    return w / w.mean()


def _check_map(p, y):
    yd = y.data if isinstance(y, Value) else np.asarray(y)
    if p.shape != yd.shape:
        raise ShapeError(f"prediction shape {p.shape} != ground truth shape {yd.shape}")
    if p.ndim != 3:
        raise ShapeError(f"semantic maps must be (N_c, Z, X), got {p.shape}")
    return yd


def iou_loss_oa(p, y):
    """Smoothed soft-IoU over all cells, visibility ignored.

    1 - (1/N_c) sum_k (sum p*y + 1) / (sum (p + y - p*y) + 1), differentiable
    in p. Zero exactly when p equals a binary y.
    """
    yd = _check_map(p, y)
    n_c = p.shape[0]
    yv = Value(yd.astype(p.dtype.type))
    py = ad.mul(p, yv)
    inter = ad.reshape(py, (n_c, -1)).sum(axis=1) + 1.0
    union = ad.reshape(p + yv - py, (n_c, -1)).sum(axis=1) + 1.0
    return 1.0 - ad.div(inter, union).mean()


def weighted_bce(p, y, visibility, w=None):
    """Mean weighted binary cross-entropy over visible cells and classes.

    p is clamped to [1e-7, 1 - 1e-7]. With no visible cell the loss is 0
    and a warning is emitted.
    """
    yd = _check_map(p, y)
    vis = np.asarray(visibility, dtype=bool)
    if vis.shape != p.shape[1:]:
        raise ShapeError(f"visibility shape {vis.shape} != map cells {p.shape[1:]}")
    n_vis = int(vis.sum())
    if n_vis == 0:
        warnings.warn("weighted_bce: no visible cells, returning 0", RuntimeWarning, stacklevel=2)
        return Value(np.zeros((), dtype=p.dtype))
    n_c = p.shape[0]
    if w is None:
        w = np.ones(n_c)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n_c,):
        raise ShapeError(f"class weights shape {w.shape} != ({n_c},)")

    pc = ad.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    nll = -(ad.log(pc) * yd + ad.log(1.0 - pc) * (1.0 - yd))
    weighted = nll * (w[:, None, None] * vis[None, :, :]).astype(p.dtype.type)
    return weighted.sum() / float(n_c * n_vis)


def uncert_loss(p, visibility):
    """Cross-entropy toward 0.5 on occluded cells (minimum ln 2 at p=0.5)."""
    if p.ndim != 3:
        raise ShapeError(f"semantic maps must be (N_c, Z, X), got {p.shape}")
    vis = np.asarray(visibility, dtype=bool)
    if vis.shape != p.shape[1:]:
        raise ShapeError(f"visibility shape {vis.shape} != map cells {p.shape[1:]}")
    occ = ~vis
    n_occ = int(occ.sum())
    if n_occ == 0:
        warnings.warn("uncert_loss: no occluded cells, returning 0", RuntimeWarning, stacklevel=2)
        return Value(np.zeros((), dtype=p.dtype))
    pc = ad.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    nll = -(ad.log(pc) + ad.log(1.0 - pc)) * 0.5
    masked = nll * occ[None, :, :].astype(p.dtype.type)
    return masked.sum() / float(p.shape[0] * n_occ)


def total_loss(p, y, visibility, weights=None):
    """BCE on visible cells + alpha * uncertainty + beta * smoothed IoU."""
    parts = loss_breakdown(p, y, visibility, weights)
    return parts["total"]


def loss_breakdown(p, y, visibility, weights=None):
    """All objective components plus their weighted total, for logging."""
    if weights is None:
        weights = LossWeights()
    bce = weighted_bce(p, y, visibility, weights.class_weights)
    unc = uncert_loss(p, visibility)
    iou = iou_loss_oa(p, y)
    total = bce + ad.scale(unc, weights.alpha) + ad.scale(iou, weights.beta)
    return {"bce": bce, "uncert": unc, "iou": iou, "total": total}


# -- evaluation ------------------------------------------------------------


def _as_ndarray(x):
    return x.data if isinstance(x, Value) else np.asarray(x)


def resize_nearest(arr, out_hw):
    """Nearest-neighbor resize of the trailing two axes."""
    h, w = arr.shape[-2:]
    oh, ow = out_hw
    ri = np.minimum((np.arange(oh) + 0.5) * h / oh, h - 1).astype(int)
    ci = np.minimum((np.arange(ow) + 0.5) * w / ow, w - 1).astype(int)
    return arr[..., ri[:, None], ci[None, :]]


def iou_metric(p, y, threshold=0.5, paper_protocol=False):
    """Per-class IoU of p binarized at `threshold` against binary y.

    An empty union counts as IoU 1. In paper-protocol mode both maps are
    first resized (nearest) to 196 x 200.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    pd = _as_ndarray(p)
    yd = _as_ndarray(y)
    if pd.shape != yd.shape:
        raise ShapeError(f"prediction shape {pd.shape} != ground truth shape {yd.shape}")
    if paper_protocol:
        pd = resize_nearest(pd, PAPER_EVAL_SHAPE)
        yd = resize_nearest(yd, PAPER_EVAL_SHAPE)
    pb = pd >= threshold
    yb = yd >= 0.5
    inter = np.logical_and(pb, yb).sum(axis=(1, 2)).astype(np.float64)
    union = np.logical_or(pb, yb).sum(axis=(1, 2)).astype(np.float64)
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def miou(p, y, threshold=0.5, paper_protocol=False):
    return float(iou_metric(p, y, threshold, paper_protocol).mean())


class ConfusionAccumulator:
    """Dataset-level per-class intersection/union counts."""

    def __init__(self, n_classes):
        self.inter = np.zeros(n_classes, dtype=np.int64)
        self.union = np.zeros(n_classes, dtype=np.int64)

    def update(self, p, y, threshold=0.5, cell_mask=None, paper_protocol=False):
        pd = _as_ndarray(p)
        yd = _as_ndarray(y)
        if pd.shape != yd.shape:
            raise ShapeError(f"prediction shape {pd.shape} != ground truth shape {yd.shape}")
        if paper_protocol:
            pd = resize_nearest(pd, PAPER_EVAL_SHAPE)
            yd = resize_nearest(yd, PAPER_EVAL_SHAPE)
        pb = pd >= threshold
        yb = yd >= 0.5
        if cell_mask is not None:
            m = np.asarray(cell_mask, dtype=bool)[None, :, :]
            pb = pb & m
            yb = yb & m
        self.inter += np.logical_and(pb, yb).sum(axis=(1, 2))
        self.union += np.logical_or(pb, yb).sum(axis=(1, 2))

    def per_class_iou(self):
        return np.where(self.union > 0, self.inter / np.maximum(self.union, 1), 1.0)

    def miou(self):
        return float(self.per_class_iou().mean())


@dataclass
class MetricReport:
    class_names: list
    ious: np.ndarray
    static_mask: np.ndarray = field(default=None)

    def group_miou(self):
        groups = {"total": float(self.ious.mean())}
        if self.static_mask is not None and self.static_mask.any():
            groups["layout"] = float(self.ious[self.static_mask].mean())
        if self.static_mask is not None and (~self.static_mask).any():
            groups["object"] = float(self.ious[~self.static_mask].mean())
        return groups

    def _group_of(self, idx):
        if self.static_mask is None:
            return ""
        return "layout" if self.static_mask[idx] else "object"

    def format(self):
        lines = [f"{'class':<16s} {'group':<8s} {'IoU':>8s}"]
        order = np.argsort(~self.static_mask, kind="stable") if self.static_mask is not None \
            else np.arange(len(self.class_names))
        for idx in order:
            lines.append(f"{self.class_names[idx]:<16s} {self._group_of(idx):<8s} {self.ious[idx]:8.4f}")
        for gname, giou in self.group_miou().items():
            lines.append(f"mIoU ({gname}): {giou:.4f}")
        return "\n".join(lines)

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("class,group,iou\n")
            for idx, (name, iou) in enumerate(zip(self.class_names, self.ious)):
                fh.write(f"{name},{self._group_of(idx)},{iou:.6f}\n")
            for gname, giou in self.group_miou().items():
                fh.write(f"miou_{gname},,{giou:.6f}\n")
