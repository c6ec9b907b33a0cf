"""Center-point tracking head, box decoding, GIoU and the training loss."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Linear, Module

LAMBDA1 = 5.0
LAMBDA2 = 2.0
MIN_SIZE = 1e-6


@dataclass(frozen=True)
class BBox:
    """Center/size box; normalised to the search region when used by the head."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box: w={self.w}, h={self.h}")
        x1, y1, x2, y2 = self.corners
        if x1 > 1 or x2 < 0 or y1 > 1 or y2 < 0:
            raise ValueError(f"box {self} does not intersect the unit square")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "BBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


def iou_giou(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised IoU and GIoU for [..., 4] center/size arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax1, ay1 = a[..., 0] - a[..., 2] / 2, a[..., 1] - a[..., 3] / 2
    ax2, ay2 = a[..., 0] + a[..., 2] / 2, a[..., 1] + a[..., 3] / 2
    bx1, by1 = b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2
    bx2, by2 = b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    # areas from corners so that identical boxes give exactly one
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    enclose = (np.maximum(ax2, bx2) - np.minimum(ax1, bx1)) * (np.maximum(ay2, by2) - np.minimum(ay1, by1))
    iou = inter / union
    # enclose >= union holds exactly; clamp away rounding when one box contains the other
    return iou, iou - np.maximum(enclose - union, 0.0) / enclose


def giou(b1: BBox, b2: BBox) -> float:
    for b in (b1, b2):
        if b.w * b.h <= 0:
            raise ValueError(f"degenerate box {b}")
    x1a, y1a, x2a, y2a = b1.corners
    x1b, y1b, x2b, y2b = b2.corners
    inter = max(0.0, min(x2a, x2b) - max(x1a, x1b)) * max(0.0, min(y2a, y2b) - max(y1a, y1b))
    union = (x2a - x1a) * (y2a - y1a) + (x2b - x1b) * (y2b - y1b) - inter
    enclose = (max(x2a, x2b) - min(x1a, x1b)) * (max(y2a, y2b) - min(y1a, y1b))
    return inter / union - max(enclose - union, 0.0) / enclose


def giou_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable GIoU between predicted [B,4] and fixed [B,4] boxes (cx, cy, w, h)."""
    gt = np.asarray(gt, dtype=np.float64)
    px, py, pw, ph = (pred[:, k] for k in range(4))
    px1, px2 = px - pw * 0.5, px + pw * 0.5
    py1, py2 = py - ph * 0.5, py + ph * 0.5
    gx1, gx2 = gt[:, 0] - gt[:, 2] / 2, gt[:, 0] + gt[:, 2] / 2
    gy1, gy2 = gt[:, 1] - gt[:, 3] / 2, gt[:, 1] + gt[:, 3] / 2
    iw = ag.relu(ag.minimum(px2, gx2) - ag.maximum(px1, gx1))
    ih = ag.relu(ag.minimum(py2, gy2) - ag.maximum(py1, gy1))
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    ew = ag.maximum(px2, gx2) - ag.minimum(px1, gx1)
    eh = ag.maximum(py2, gy2) - ag.minimum(py1, gy1)
    enclose = ew * eh
    return inter / union - (enclose - union) / enclose


# -- head ---------------------------------------------------------------------

@dataclass
class ScoreMaps:
    cls: Tensor        # [B, g, g] in (0, 1)
    size: Tensor       # [B, 2, g, g]  (w, h) in (0, 1)
    offset: Tensor     # [B, 2, g, g]  (dx, dy) in (-0.5, 0.5) cells
    cls_logit: Tensor  # [B, g, g]

    @property
    def grid(self) -> int:
        return self.cls.shape[-1]


def _neighbour_index(g: int) -> np.ndarray:
    """Flat indices of each cell's 3x3 neighbourhood; g*g marks zero padding."""
    idx = np.full((g * g, 9), g * g, dtype=np.int64)
    for r, c in itertools.product(range(g), range(g)):
        for k, (dr, dc) in enumerate(itertools.product((-1, 0, 1), (-1, 0, 1))):
            rr, cc = r + dr, c + dc
            if 0 <= rr < g and 0 <= cc < g:
                idx[r * g + c, k] = rr * g + cc
    return idx


class Conv3x3(Module):
    """3x3 same-padded convolution over a token grid, as gather + matmul."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.lin = Linear(9 * d_in, d_out, rng)

    def __call__(self, x: Tensor, nbr: np.ndarray) -> Tensor:
        b, n, c = x.shape
        padded = ag.concat([x, Tensor(np.zeros((b, 1, c)))], axis=1)
        return self.lin(padded[:, nbr].reshape(b, n, 9 * c))


class Branch(Module):
    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        self.conv1 = Conv3x3(d_in, hidden, rng)
        self.conv2 = Conv3x3(hidden, hidden, rng)
        self.out = Linear(hidden, d_out, rng, std=0.01)

    def __call__(self, x: Tensor, nbr: np.ndarray) -> Tensor:
        x = ag.gelu(self.conv1(x, nbr))
        x = ag.gelu(self.conv2(x, nbr))
        return self.out(x)


class CenterHead(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.cls = Branch(d_in, hidden, 1, rng)
        self.size = Branch(d_in, hidden, 2, rng)
        self.offset = Branch(d_in, hidden, 2, rng)
        # focal-loss prior: start with low presence everywhere
        self.cls.out.bias.data = np.full(1, -math.log((1 - 0.1) / 0.1))
        self._nbr_cache: dict[int, np.ndarray] = {}

    def __call__(self, f: Tensor) -> ScoreMaps:
        return head_forward(self, f)


def head_forward(head: CenterHead, f: Tensor) -> ScoreMaps:
    b, n, _ = f.shape
    g = math.isqrt(n)
    if g * g != n:
        raise ValueError(f"head_forward: {n} search tokens do not form a square grid")
    nbr = head._nbr_cache.get(g)
    if nbr is None:
        nbr = head._nbr_cache[g] = _neighbour_index(g)
    logit = head.cls(f, nbr).reshape(b, g, g)
    size = ag.sigmoid(head.size(f, nbr)).transpose(0, 2, 1).reshape(b, 2, g, g)
    offset = (ag.sigmoid(head.offset(f, nbr)) - 0.5).transpose(0, 2, 1).reshape(b, 2, g, g)
    return ScoreMaps(ag.sigmoid(logit), size, offset, logit)


def decode_boxes(maps: ScoreMaps) -> tuple[np.ndarray, np.ndarray]:
    """Peak-cell decoding for a batch: boxes [B, 4] (cx, cy, w, h) and peak scores [B]."""
    cls = maps.cls.data
    b, g, _ = cls.shape
    flat = cls.reshape(b, -1)
    peak = flat.argmax(axis=1)  # first maximum -> row-major tie-break
    rows, cols = peak // g, peak % g
    ar = np.arange(b)
    off = maps.offset.data[ar, :, rows, cols]
    size = np.maximum(maps.size.data[ar, :, rows, cols], MIN_SIZE)
    cx = (cols + 0.5 + off[:, 0]) / g
    cy = (rows + 0.5 + off[:, 1]) / g
    return np.stack([cx, cy, size[:, 0], size[:, 1]], axis=1), flat[ar, peak]


def decode_bbox(maps: ScoreMaps, index: int = 0) -> BBox:
    boxes, _ = decode_boxes(maps)
    return BBox(*boxes[index])


# -- loss ---------------------------------------------------------------------

def weighted_loss(l_cls, l_1, l_giou, lambda1: float = LAMBDA1, lambda2: float = LAMBDA2):
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be nonnegative")
    return l_cls + l_1 * lambda1 + l_giou * lambda2


def _check_gt(gt) -> np.ndarray:
    if isinstance(gt, BBox):
        gt = gt.as_array()[None]
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    cx, cy, w, h = gt.T
    if np.any((cx < 0) | (cx > 1) | (cy < 0) | (cy > 1)) or np.any((w <= 0) | (h <= 0)):
        raise ValueError("ground-truth box outside the unit square or degenerate")
    return gt


def gt_cells(gt: np.ndarray, g: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.minimum((gt[:, 1] * g).astype(np.int64), g - 1)
    cols = np.minimum((gt[:, 0] * g).astype(np.int64), g - 1)
    return rows, cols


def gaussian_targets(gt: np.ndarray, g: int) -> np.ndarray:
    """Presence target per cell: 1 at the ground-truth cell, Gaussian falloff around it."""
    rows, cols = gt_cells(gt, g)
    sigma = np.maximum(0.5, np.sqrt(gt[:, 2] * gt[:, 3]) * g / 4)
    r = np.arange(g)[None, :, None]
    c = np.arange(g)[None, None, :]
    d2 = (r - rows[:, None, None]) ** 2 + (c - cols[:, None, None]) ** 2
    return np.exp(-d2 / (2 * sigma[:, None, None] ** 2))


def focal_loss(logit: Tensor, target: np.ndarray) -> Tensor:
    """Penalty-reduced focal loss (alpha=2, beta=4), normalised by positive count."""
    pos = target >= 1.0
    neg_w = (1.0 - target) ** 4
    p = ag.sigmoid(logit)
    log_p = -ag.softplus(-logit)
    log_1p = -ag.softplus(logit)
    pos_term = (1.0 - p) ** 2 * log_p * pos
    neg_term = p ** 2 * log_1p * (neg_w * ~pos)
    n_pos = max(1, int(pos.sum()))
    return -(pos_term + neg_term).sum() / n_pos


def predicted_at(maps: ScoreMaps, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Decoded boxes [B, 4] read at the given cells, differentiable w.r.t. the maps."""
    g = maps.grid
    b = rows.shape[0]
    ar = np.arange(b)
    off = maps.offset[ar, :, rows, cols]
    size = maps.size[ar, :, rows, cols]
    base = np.stack([(cols + 0.5) / g, (rows + 0.5) / g], axis=1)
    centre = off / g + base
    return ag.concat([centre, size], axis=1)


def total_loss(maps: ScoreMaps, gt, lambda1: float = LAMBDA1, lambda2: float = LAMBDA2):
    """Classification + lambda1 * L1 + lambda2 * (1 - GIoU), averaged over the batch.

    Regression terms are read at the ground-truth cell. Returns the scalar loss
    tensor and a dict of the three unweighted components.
    """
    gt = _check_gt(gt)
    g = maps.grid
    rows, cols = gt_cells(gt, g)
    # one positive cell per sample, so this is already a per-sample mean
    l_cls = focal_loss(maps.cls_logit, gaussian_targets(gt, g))
    pred = predicted_at(maps, rows, cols)
    l_1 = ag.absolute(pred - gt).mean()
    l_giou = (1.0 - giou_tensor(pred, gt)).mean()
    loss = weighted_loss(l_cls, l_1, l_giou, lambda1, lambda2)
    return loss, {"cls": l_cls.item(), "l1": l_1.item(), "giou": l_giou.item()}
