"""Per-cell BEV detection head, box decoding, rotated IoU, NMS and average precision."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from . import tensors as T
from .geometry import BEVGrid, GridMeta
from .params import ParamSet, he_conv, param

HEAD_CHANNELS = 7  # objectness, dx, dy, log w, log l, sin yaw, cos yaw
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass(frozen=True)
class RotatedBox:
    """BEV box; ``l`` is the extent along the heading ``yaw``, ``w`` across it."""

    cx: float
    cy: float
    w: float
    l: float  # noqa: E741
    yaw: float = 0.0
    score: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, l={self.l}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def as_row(self) -> tuple:
        return (self.cx, self.cy, self.w, self.l, self.yaw)

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]]) * [0.5 * self.l, 0.5 * self.w]
        R = np.array([[c, -s], [s, c]])
        return local @ R.T + [self.cx, self.cy]

    def contains(self, x, y) -> np.ndarray:
        """Vectorised point-in-box test."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = np.asarray(x) - self.cx
        dy = np.asarray(y) - self.cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (np.abs(u) <= 0.5 * self.l) & (np.abs(v) <= 0.5 * self.w)


def boxes_to_array(boxes) -> np.ndarray:
    return np.array([b.as_row() for b in boxes], dtype=np.float64).reshape(-1, 5)


# ---------------------------------------------------------------- head


@dataclass
class DetectionHeadParams(ParamSet):
    weight: T.DiffTensor  # (7, C, 1, 1)
    bias: T.DiffTensor  # (7,)

    @classmethod
    def init(cls, rng, channels: int, dtype=np.float64, prior: float = 0.01,
             size_prior=(1.8, 4.2)) -> "DetectionHeadParams":
        w = he_conv(rng, HEAD_CHANNELS, channels, 1, dtype, gain=0.1)
        b = np.zeros(HEAD_CHANNELS)
        b[0] = -math.log((1 - prior) / prior)
        b[3], b[4] = math.log(size_prior[0]), math.log(size_prior[1])
        b[6] = 1.0
        return cls(w, param(b, dtype))

    @classmethod
    def zeros(cls, channels: int, dtype=np.float64) -> "DetectionHeadParams":
        return cls(param(np.zeros((HEAD_CHANNELS, channels, 1, 1)), dtype),
                   param(np.zeros(HEAD_CHANNELS), dtype))


def detect_head(fused: BEVGrid, params: DetectionHeadParams) -> T.DiffTensor:
    """Raw (7, H, W) predictions from a 1x1 convolution."""
    return T.conv2d(fused.features, params.weight, params.bias)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode_boxes(raw, meta: GridMeta, score_threshold: float = 0.5, top_k: int | None = None) -> list:
    """Boxes for every cell with objectness probability >= ``score_threshold``."""
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError("score threshold must lie in [0, 1]")
    r = raw.data if isinstance(raw, T.DiffTensor) else np.asarray(raw)
    r = r.astype(np.float64)
    prob = _sigmoid(r[0])
    keep = np.flatnonzero((prob >= score_threshold).ravel())
    if not keep.size:
        return []
    scores = prob.ravel()[keep]
    if top_k is not None and keep.size > top_k:
        sel = np.argsort(-scores, kind="stable")[:top_k]
        keep, scores = keep[sel], scores[sel]
    xs, ys = meta.cell_centers()
    flat = r.reshape(HEAD_CHANNELS, -1)[:, keep]
    cx = xs.ravel()[keep] + flat[1] * meta.resolution
    cy = ys.ravel()[keep] + flat[2] * meta.resolution
    w = np.exp(np.clip(flat[3], -10, 10))
    l = np.exp(np.clip(flat[4], -10, 10))  # noqa: E741
    yaw = np.arctan2(flat[5], flat[6])
    return [RotatedBox(float(a), float(b), float(c), float(d), float(e), float(min(1.0, s)))
            for a, b, c, d, e, s in zip(cx, cy, w, l, yaw, scores)]


# ---------------------------------------------------------------- training targets and loss


@dataclass
class DetectionTargets:
    positive: np.ndarray  # (H, W) bool
    regression: np.ndarray  # (6, H, W)


def build_targets(gt_boxes, meta: GridMeta) -> DetectionTargets:
    """Cells whose centre lies inside a GT box are positives for that box."""
    H, W = meta.shape
    xs, ys = meta.cell_centers()
    pos = np.zeros((H, W), dtype=bool)
    reg = np.zeros((6, H, W))
    reg[5] = 1.0
    for b in gt_boxes:
        inside = b.contains(xs, ys)
        if not inside.any():
            # boxes smaller than a cell still get their nearest cell
            j = int(np.clip(np.floor((b.cx - meta.x_min) / meta.resolution), 0, W - 1))
            i = int(np.clip(np.floor((b.cy - meta.y_min) / meta.resolution), 0, H - 1))
            inside = np.zeros((H, W), dtype=bool)
            inside[i, j] = True
        pos |= inside
        reg[0][inside] = (b.cx - xs[inside]) / meta.resolution
        reg[1][inside] = (b.cy - ys[inside]) / meta.resolution
        reg[2][inside] = math.log(b.w)
        reg[3][inside] = math.log(b.l)
        reg[4][inside] = math.sin(b.yaw)
        reg[5][inside] = math.cos(b.yaw)
    return DetectionTargets(pos, reg)


def focal_loss(logits: T.DiffTensor, target: np.ndarray, alpha: float = FOCAL_ALPHA,
               gamma: float = FOCAL_GAMMA) -> T.DiffTensor:
    """Summed binary focal loss."""
    t = np.asarray(target, dtype=logits.dtype)
    p = T.sigmoid(logits)
    one_minus = T.sub(1.0, p)
    pos_term = T.mul(T.mul(T.pow_(one_minus, gamma), T.log_sigmoid(logits)), -alpha * t)
    neg_term = T.mul(T.mul(T.pow_(p, gamma), T.log_sigmoid(T.mul(logits, -1.0))), -(1 - alpha) * (1 - t))
    return T.sum_(T.add(pos_term, neg_term))


def detection_loss(raw: T.DiffTensor, targets: DetectionTargets, reg_weight: float = 2.0,
                   beta: float = 1.0 / 9.0):
    """Focal objectness plus smooth-L1 regression at positive cells, both per positive."""
    pos = targets.positive
    n_pos = max(1.0, float(pos.sum()))
    cls = T.mul(focal_loss(raw[0], pos.astype(np.float64)), 1.0 / n_pos)
    if pos.any():
        idx = np.nonzero(pos)
        pred = raw[(slice(1, HEAD_CHANNELS),) + idx]  # (6, P)
        tgt = targets.regression[(slice(None),) + idx]
        reg = T.mul(T.sum_(T.smooth_l1(T.sub(pred, tgt), beta)), 1.0 / n_pos)
    else:
        reg = T.tensor(0.0, dtype=raw.dtype)
    total = T.add(cls, T.mul(reg, reg_weight))
    return total, {"cls": cls.item(), "reg": reg.item()}


# ---------------------------------------------------------------- IoU / NMS / AP


def rotated_iou(a: RotatedBox, b: RotatedBox) -> float:
    """Exact BEV IoU via convex polygon clipping."""
    return float(kernels.rotated_iou_matrix(boxes_to_array([a]), boxes_to_array([b]))[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    if not len(a) or not len(b):
        return np.zeros((len(a), len(b)))
    return kernels.rotated_iou_matrix(boxes_to_array(a), boxes_to_array(b))


def nms(boxes, iou_threshold: float = 0.5) -> list:
    """Greedy suppression in (score desc, cx, cy) order."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("IoU threshold must lie in [0, 1]")
    order = sorted(boxes, key=lambda b: (-b.score, b.cx, b.cy))
    if not order:
        return []
    ious = iou_matrix(order, order)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        alive[i + 1:] &= ious[i, i + 1:] <= iou_threshold
    return keep


def average_precision(predictions: dict, ground_truth: dict, iou_threshold: float = 0.5):
    """All-point interpolated AP over every scene, or ``None`` if there is no ground truth.

    Predictions are swept globally by descending score; each one claims the
    highest-IoU still-unmatched GT box of its scene if that IoU reaches the
    threshold.
    """
    n_gt = sum(len(v) for v in ground_truth.values())
    if n_gt == 0:
        return None
    unknown = set(predictions) - set(ground_truth)
    if unknown:
        raise KeyError(f"predictions for unknown scenes: {sorted(map(str, unknown))}")
    flat = []
    iou_by_scene = {}
    for sid, preds in predictions.items():
        gts = ground_truth.get(sid, [])
        iou_by_scene[sid] = iou_matrix(preds, gts)
        for k, p in enumerate(preds):
            flat.append((-p.score, str(sid), k, sid))
    flat.sort()
    matched = {sid: np.zeros(len(g), dtype=bool) for sid, g in ground_truth.items()}
    tp = np.zeros(len(flat))
    for r, (_, _, k, sid) in enumerate(flat):
        ious = iou_by_scene[sid]
        if ious.shape[1] == 0:
            continue
        cand = np.where(matched[sid], -1.0, ious[k])
        best = int(np.argmax(cand))
        if cand[best] >= iou_threshold:
            matched[sid][best] = True
            tp[r] = 1.0
    return _all_point_ap(tp, n_gt)


def _all_point_ap(tp: np.ndarray, n_gt: int) -> float:
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    rec = ctp / n_gt
    prec = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


# ---------------------------------------------------------------- text records


def write_records(path, boxes_by_scene: dict) -> None:
    """One ``scene_id cx cy w l yaw score`` line per box."""
    lines = []
    for sid in sorted(boxes_by_scene, key=str):
        for b in boxes_by_scene[sid]:
            lines.append(" ".join([str(sid)] + [repr(float(v)) for v in b.as_row() + (b.score,)]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_records(path) -> dict:
    out: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        sid = parts[0]
        cx, cy, w, l, yaw, score = (float(p) for p in parts[1:])  # noqa: E741
        out.setdefault(sid, []).append(RotatedBox(cx, cy, w, l, yaw, score))
    return out
