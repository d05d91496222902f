"""Task heads, objectives and evaluation metrics.

VQA: the attended feature of the answer token (row 0) goes through one
affine layer to answer logits, trained with either multi-label BCE or
single-answer softmax cross-entropy.

Grounding: every visual row yields a relevance score and a refined box
(normalized center-size, sigmoid-squashed).  Scores are trained by a
KL-divergence ranking loss against IoU-derived soft targets; boxes by a
smooth-l1 regression term weighted by lambda.

The losses are implemented as dedicated graph primitives: forward passes
use the log-domain stable forms and each backward is written out by hand
(and checked against finite differences in the tests).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DatasetError,
    DegenerateRowError,
    DimensionError,
    LabelError,
)
from .tensor import (
    RngStream,
    Tensor,
    _sigmoid,
    add,
    glorot_uniform,
    matmul,
    mul,
    reshape,
    sigmoid,
)

# -- geometry ------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in image coordinates, corners ordered."""

    x_tl: float
    y_tl: float
    x_br: float
    y_br: float

    def __post_init__(self):
        if self.x_br < self.x_tl or self.y_br < self.y_tl:
            raise DatasetError(
                f"Box corners out of order: ({self.x_tl},{self.y_tl})-({self.x_br},{self.y_br})"
            )

    @property
    def width(self) -> float:
        return self.x_br - self.x_tl

    @property
    def height(self) -> float:
        return self.y_br - self.y_tl

    @property
    def area(self) -> float:
        return self.width * self.height


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes or zero-area union."""
    iw = min(a.x_br, b.x_br) - max(a.x_tl, b.x_tl)
    ih = min(a.y_br, b.y_br) - max(a.y_tl, b.y_tl)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def box_from_center_size(cx: float, cy: float, w: float, h: float,
                         canvas_w: float, canvas_h: float) -> Box:
    """Normalized (cx, cy, w, h) back to image coordinates, clamped to canvas."""
    x_tl = min(max((cx - w / 2.0) * canvas_w, 0.0), canvas_w)
    x_br = min(max((cx + w / 2.0) * canvas_w, 0.0), canvas_w)
    y_tl = min(max((cy - h / 2.0) * canvas_h, 0.0), canvas_h)
    y_br = min(max((cy + h / 2.0) * canvas_h, 0.0), canvas_h)
    return Box(x_tl, y_tl, max(x_tl, x_br), max(y_tl, y_br))


# -- records -------------------------------------------------------------------


@dataclass
class AnswerDistribution:
    """Answer logits paired with their supervision target."""

    logits: Tensor
    label: np.ndarray

    def __post_init__(self):
        self.label = np.asarray(self.label, dtype=np.float64)
        if self.label.shape != self.logits.data.shape:
            raise DimensionError(
                f"AnswerDistribution: label shape {self.label.shape} != logits {self.logits.data.shape}"
            )
        if np.any(self.label < 0.0) or np.any(self.label > 1.0):
            raise LabelError("AnswerDistribution: label entries must lie in [0, 1]")

    @property
    def k(self) -> int:
        return self.logits.data.shape[-1]


@dataclass
class GroundingPrediction:
    """Per-proposal relevance scores and refined boxes (normalized)."""

    scores: Tensor
    boxes: Tensor

    def __post_init__(self):
        if self.boxes.data.shape[-1] != 4:
            raise DimensionError(f"GroundingPrediction: boxes must end in 4, got {self.boxes.data.shape}")
        if self.boxes.data.shape[:-1] != self.scores.data.shape:
            raise DimensionError(
                f"GroundingPrediction: {self.scores.data.shape} scores vs {self.boxes.data.shape} boxes"
            )


@dataclass
class GroundTruthScores:
    """IoU-thresholded soft targets plus the shared regression target."""

    s_star: np.ndarray
    t_star: np.ndarray
    eta: float

    def __post_init__(self):
        self.s_star = np.asarray(self.s_star, dtype=np.float64)
        self.t_star = np.asarray(self.t_star, dtype=np.float64)
        if not 0.0 < self.eta < 1.0:
            raise ConfigurationError(f"eta must lie in (0, 1), got {self.eta}")
        if np.any(self.s_star < 0.0) or np.any(self.s_star > 1.0):
            raise LabelError("GroundTruthScores: s_star entries must lie in [0, 1]")
        if self.t_star.shape != self.s_star.shape + (4,):
            raise DimensionError(
                f"GroundTruthScores: t_star shape {self.t_star.shape} != {self.s_star.shape + (4,)}"
            )

    @property
    def usable(self) -> np.ndarray:
        """Per-sample flag: at least one proposal cleared the IoU threshold."""
        return np.any(self.s_star > 0.0, axis=-1)


# -- head parameters -----------------------------------------------------------


@dataclass
class VqaHeadParams:
    w: Tensor
    b: Tensor

    def parameters(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


@dataclass
class GroundingHeadParams:
    w_score: Tensor
    b_score: Tensor
    w_box: Tensor
    b_box: Tensor

    def parameters(self, prefix: str):
        yield f"{prefix}.w_score", self.w_score
        yield f"{prefix}.b_score", self.b_score
        yield f"{prefix}.w_box", self.w_box
        yield f"{prefix}.b_box", self.b_box


def init_vqa_head(rng: RngStream, d: int, k: int) -> VqaHeadParams:
    return VqaHeadParams(
        w=Tensor(glorot_uniform(rng, d, k), requires_grad=True),
        b=Tensor(np.zeros(k), requires_grad=True),
    )


def init_grounding_head(rng: RngStream, d: int) -> GroundingHeadParams:
    return GroundingHeadParams(
        w_score=Tensor(glorot_uniform(rng, d, 1), requires_grad=True),
        b_score=Tensor(np.zeros(1), requires_grad=True),
        w_box=Tensor(glorot_uniform(rng, d, 4), requires_grad=True),
        b_box=Tensor(np.zeros(4), requires_grad=True),
    )


def vqa_head(z_ans: Tensor, params: VqaHeadParams) -> Tensor:
    """Answer logits from the attended answer-token feature: one affine map."""
    *lead, d = z_ans.data.shape
    if d != params.w.data.shape[0]:
        raise DimensionError(f"vqa_head: feature width {d} != weight rows {params.w.data.shape[0]}")
    out = add(matmul(reshape(z_ans, (*lead, 1, d)), params.w), params.b)
    return reshape(out, (*lead, params.w.data.shape[1]))


def grounding_head(z_visual: Tensor, params: GroundingHeadParams) -> GroundingPrediction:
    """Scores and sigmoid-squashed center-size boxes for every visual row."""
    raw = add(matmul(z_visual, params.w_score), params.b_score)
    scores = reshape(raw, raw.data.shape[:-1])
    boxes = sigmoid(add(matmul(z_visual, params.w_box), params.b_box))
    return GroundingPrediction(scores=scores, boxes=boxes)


# -- losses --------------------------------------------------------------------


def _lead_count(shape: tuple, trailing: int) -> int:
    lead = shape[: len(shape) - trailing]
    return int(np.prod(lead)) if lead else 1


def bce_loss(logits: Tensor, targets) -> Tensor:
    """Binary cross-entropy with logits, summed over classes.

    Evaluated as softplus(p) - p*y, which never forms log(0); leading axes
    (the batch) are averaged.
    """
    y = np.asarray(targets, dtype=np.float64)
    p = logits.data
    if y.shape != p.shape:
        raise DimensionError(f"bce_loss: target shape {y.shape} != logits {p.shape}")
    if np.any(y < 0.0) or np.any(y > 1.0):
        raise LabelError("bce_loss: targets must lie in [0, 1]")
    per = np.maximum(p, 0.0) - p * y + np.log1p(np.exp(-np.abs(p)))
    batch = _lead_count(p.shape, 1)
    out = np.asarray(per.sum() / batch)

    def back(g):
        return ((_sigmoid(p) - y) * (g / batch),)

    return Tensor._wrap(out, (logits,), back)


def softmax_ce_loss(logits: Tensor, one_hot) -> Tensor:
    """Cross-entropy against a strictly one-hot target, batch-averaged."""
    y = np.asarray(one_hot, dtype=np.float64)
    p = logits.data
    if y.shape != p.shape:
        raise DimensionError(f"softmax_ce_loss: target shape {y.shape} != logits {p.shape}")
    if not np.all((y == 0.0) | (y == 1.0)) or np.any(y.sum(axis=-1) != 1.0):
        raise LabelError("softmax_ce_loss: target rows must be exactly one-hot")
    mx = p.max(axis=-1, keepdims=True)
    lse = mx[..., 0] + np.log(np.exp(p - mx).sum(axis=-1))
    per = lse - (p * y).sum(axis=-1)
    batch = _lead_count(p.shape, 1)
    out = np.asarray(per.sum() / batch)

    def back(g):
        soft = np.exp(p - mx)
        soft /= soft.sum(axis=-1, keepdims=True)
        return ((soft - y) * (g / batch),)

    return Tensor._wrap(out, (logits,), back)


def _masked_softmax_np(raw: np.ndarray, valid: np.ndarray | None) -> np.ndarray:
    if valid is None:
        shifted = raw - raw.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        masked = np.where(valid, raw, -np.inf)
        e = np.exp(masked - masked.max(axis=-1, keepdims=True))
        e = np.where(valid, e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def kl_rank_loss(scores: Tensor, target_scores, valid=None) -> Tensor:
    """Ranking loss: KL between softmax-normalized target and predicted scores.

    Both raw vectors are softmaxed, then (1/n) * sum_i t_i log(t_i / s_i)
    over the valid positions; leading axes are averaged.  Non-negative,
    zero exactly when the normalized distributions coincide.
    """
    raw_t = np.asarray(target_scores, dtype=np.float64)
    p = scores.data
    if raw_t.shape != p.shape:
        raise DimensionError(f"kl_rank_loss: target shape {raw_t.shape} != scores {p.shape}")
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != p.shape:
            raise DimensionError(f"kl_rank_loss: valid shape {valid.shape} != scores {p.shape}")
        if not np.all(np.any(valid, axis=-1)):
            raise DegenerateRowError("kl_rank_loss: a sample has no valid proposals")
    t = _masked_softmax_np(raw_t, valid)
    s = _masked_softmax_np(p, valid)
    n = p.shape[-1] if valid is None else valid.sum(axis=-1)
    ratio = np.zeros_like(t)
    live = t > 0.0
    ratio[live] = t[live] * (np.log(t[live]) - np.log(s[live]))
    per = ratio.sum(axis=-1) / n
    batch = _lead_count(p.shape, 1)
    out = np.asarray(per.sum() / batch)

    def back(g):
        grad = (s - t) / (np.asarray(n)[..., None] if np.ndim(n) else n)
        if valid is not None:
            grad = np.where(valid, grad, 0.0)
        return (grad * (g / batch),)

    return Tensor._wrap(out, (scores,), back)


def smooth_l1_loss(pred: Tensor, target) -> Tensor:
    """Huber-style regression: 0.5x^2 inside |x|<1, |x|-0.5 outside.

    Summed over the four box coordinates, averaged over proposals and any
    leading batch axes.
    """
    t = np.asarray(target, dtype=np.float64)
    p = pred.data
    if t.shape != p.shape:
        raise DimensionError(f"smooth_l1_loss: target shape {t.shape} != pred {p.shape}")
    x = p - t
    ax = np.abs(x)
    inner = ax < 1.0
    per = np.where(inner, 0.5 * x * x, ax - 0.5)
    n = p.shape[-2] if p.ndim >= 2 else 1
    batch = _lead_count(p.shape, 2)
    out = np.asarray(per.sum() / (n * batch))

    def back(g):
        d = np.where(inner, x, np.sign(x))
        return (d * (g / (n * batch)),)

    return Tensor._wrap(out, (pred,), back)


@dataclass
class GroundingLoss:
    total: Tensor
    rank: Tensor
    reg: Tensor


def total_grounding_loss(pred: GroundingPrediction, gt: GroundTruthScores,
                         lam: float, valid=None) -> GroundingLoss:
    """Combined objective: ranking term plus lambda times regression term."""
    if lam < 0.0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    rank = kl_rank_loss(pred.scores, gt.s_star, valid=valid)
    reg = smooth_l1_loss(pred.boxes, gt.t_star)
    return GroundingLoss(total=add(rank, mul(reg, lam)), rank=rank, reg=reg)


# -- label construction ----------------------------------------------------------


def make_ground_truth_scores(proposals: Sequence[Box], gt: Box, eta: float = 0.5,
                             canvas_w: float = 1.0, canvas_h: float = 1.0) -> GroundTruthScores:
    """Soft score targets and the shared normalized box regression target.

    A proposal scores its IoU with the ground-truth box when that exceeds
    ``eta``, else exactly 0.  Every proposal shares the same regression
    target: the ground-truth box in normalized center-size form.
    """
    if not proposals:
        raise DatasetError("make_ground_truth_scores: need at least one proposal")
    s_star = np.zeros(len(proposals))
    for i, prop in enumerate(proposals):
        v = iou(prop, gt)
        if v > eta:
            s_star[i] = v
    cx = (gt.x_tl + gt.x_br) / 2.0 / canvas_w
    cy = (gt.y_tl + gt.y_br) / 2.0 / canvas_h
    target = np.array([cx, cy, gt.width / canvas_w, gt.height / canvas_h])
    t_star = np.tile(target, (len(proposals), 1))
    return GroundTruthScores(s_star=s_star, t_star=t_star, eta=eta)


# -- evaluation metrics ----------------------------------------------------------


def vqa_accuracy(predicted_answer: int, annotator_counts) -> float:
    """Consensus-weighted credit: a third per agreeing annotator, capped at 1."""
    if isinstance(annotator_counts, Mapping):
        count = annotator_counts.get(predicted_answer, 0)
    else:
        counts = np.asarray(annotator_counts)
        count = counts[predicted_answer] if 0 <= predicted_answer < len(counts) else 0
    if count < 0:
        raise LabelError(f"vqa_accuracy: negative annotator count {count}")
    return min(float(count) / 3.0, 1.0)


def grounding_accuracy(predicted: Sequence[Box], gt: Sequence[Box]) -> float:
    """Fraction of samples whose predicted box clears IoU 0.5 with ground truth."""
    if len(predicted) != len(gt):
        raise DimensionError(f"grounding_accuracy: {len(predicted)} predictions vs {len(gt)} references")
    if not predicted:
        raise DatasetError("grounding_accuracy: empty evaluation set")
    hits = sum(1 for p, g in zip(predicted, gt) if iou(p, g) > 0.5)
    return hits / len(predicted)
