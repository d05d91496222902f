"""Full model assembly: encoders -> unified sequence -> block stack -> task head.

Also owns batch construction from dataset samples (fixed-width id rows,
per-proposal features, soft grounding targets) and the argmax-style
prediction helpers the evaluator uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .attention import AttentionState, QuadrantMask
from .data import ToySample, assemble_tokens, question_type
from .encoders import (
    APPEARANCE_WIDTH,
    SPATIAL_WIDTH,
    EncoderParams,
    appearance_onehots,
    encode_text,
    init_encoder,
    spatial_feature,
    visual_projection,
)
from .errors import ConfigurationError, DatasetError, DimensionError
from .heads import (
    Box,
    GroundingHeadParams,
    GroundingPrediction,
    VqaHeadParams,
    box_from_center_size,
    grounding_head,
    init_grounding_head,
    init_vqa_head,
    make_ground_truth_scores,
    vqa_head,
)
from .network import MuanConfig, UnifyParams, embed_unify, init_blocks, init_unify, muan_forward
from .tensor import RngStream, Tensor, reshape, slice_axis


@dataclass
class ModelConfig:
    """Architecture core plus the encoder/head extents around it."""

    core: MuanConfig
    vocab_size: int
    d_e: int = 32
    n_answers: int = 26
    m_max: int = 14
    n_visual: int = 10
    eta: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        self.core.validate()
        if self.vocab_size < 2:
            raise ConfigurationError(f"vocab_size must cover pad and [ans], got {self.vocab_size}")
        if self.d_e < 1:
            raise ConfigurationError(f"d_e must be >= 1, got {self.d_e}")
        if self.n_answers < 2:
            raise ConfigurationError(f"n_answers must be >= 2, got {self.n_answers}")
        if self.m_max < 2:
            raise ConfigurationError(f"m_max must be >= 2, got {self.m_max}")
        if self.n_visual < 1:
            raise ConfigurationError(f"n_visual must be >= 1, got {self.n_visual}")
        if not 0.0 < self.eta < 1.0:
            raise ConfigurationError(f"eta must lie in (0, 1), got {self.eta}")

    def to_dict(self) -> dict:
        return {"core": self.core.to_dict(), "vocab_size": self.vocab_size,
                "d_e": self.d_e, "n_answers": self.n_answers, "m_max": self.m_max,
                "n_visual": self.n_visual, "eta": self.eta}

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(raw) - known
        if extra:
            raise ConfigurationError(f"unknown model config fields: {sorted(extra)}")
        if "core" not in raw or "vocab_size" not in raw:
            raise ConfigurationError("model config needs at least 'core' and 'vocab_size'")
        raw = dict(raw)
        raw["core"] = MuanConfig.from_dict(raw["core"])
        return cls(**raw)


# -- batches -------------------------------------------------------------------


@dataclass
class VqaBatch:
    tokens: np.ndarray        # (B, m_max) int
    appearance: np.ndarray    # (B, n_visual, 13)
    spatial: np.ndarray       # (B, n_visual, 5)
    vis_valid: np.ndarray     # (B, n_visual) bool
    answers: np.ndarray       # (B,) int
    one_hot: np.ndarray       # (B, k)
    counts: list[dict]        # per-sample annotator counts {answer_id: n}
    question_types: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class GroundingBatch:
    tokens: np.ndarray        # (B, m_max) int
    appearance: np.ndarray    # (B, n_visual, 13)
    spatial: np.ndarray       # (B, n_visual, 5)
    vis_valid: np.ndarray     # (B, n_visual) bool
    s_star: np.ndarray        # (B, n_visual)
    t_star: np.ndarray        # (B, n_visual, 4)
    proposals: list[list[Box]]
    gt_boxes: list[Box]
    canvas: tuple[float, float]

    def __len__(self) -> int:
        return self.tokens.shape[0]


def batch_vqa(samples: Sequence[ToySample], config: ModelConfig) -> VqaBatch:
    b = len(samples)
    n = config.n_visual
    tokens = np.zeros((b, config.m_max), dtype=np.int64)
    appearance = np.zeros((b, n, APPEARANCE_WIDTH))
    spatial = np.zeros((b, n, SPATIAL_WIDTH))
    vis_valid = np.zeros((b, n), dtype=bool)
    answers = np.zeros(b, dtype=np.int64)
    one_hot = np.zeros((b, config.n_answers))
    counts = []
    qtypes = []
    for i, s in enumerate(samples):
        if s.task != "vqa":
            raise DatasetError(f"batch_vqa: sample {i} has task {s.task!r}")
        if len(s.scene.objects) > n:
            raise DatasetError(f"batch_vqa: {len(s.scene.objects)} objects exceed n_visual={n}")
        tokens[i] = assemble_tokens(s.tokens, config.m_max, "vqa")
        for j, obj in enumerate(s.scene.objects):
            appearance[i, j] = appearance_onehots(obj.shape, obj.color, obj.size)
            spatial[i, j] = spatial_feature(obj.box, s.scene.width, s.scene.height)
            vis_valid[i, j] = True
        answers[i] = int(s.label["answer"])
        if not 0 <= answers[i] < config.n_answers:
            raise DatasetError(f"batch_vqa: answer id {answers[i]} outside {config.n_answers} classes")
        one_hot[i, answers[i]] = 1.0
        counts.append({int(k): int(v) for k, v in s.label["counts"].items()})
        qtypes.append(question_type(s))
    return VqaBatch(tokens=tokens, appearance=appearance, spatial=spatial,
                    vis_valid=vis_valid, answers=answers, one_hot=one_hot,
                    counts=counts, question_types=qtypes)


def batch_grounding(samples: Sequence[ToySample], config: ModelConfig) -> GroundingBatch:
    b = len(samples)
    n = config.n_visual
    tokens = np.zeros((b, config.m_max), dtype=np.int64)
    appearance = np.zeros((b, n, APPEARANCE_WIDTH))
    spatial = np.zeros((b, n, SPATIAL_WIDTH))
    vis_valid = np.ones((b, n), dtype=bool)
    s_star = np.zeros((b, n))
    t_star = np.zeros((b, n, 4))
    proposals: list[list[Box]] = []
    gt_boxes: list[Box] = []
    canvas = (samples[0].scene.width, samples[0].scene.height) if samples else (1.0, 1.0)
    for i, s in enumerate(samples):
        if s.task != "grounding":
            raise DatasetError(f"batch_grounding: sample {i} has task {s.task!r}")
        if len(s.scene.proposals) != n:
            raise DatasetError(
                f"batch_grounding: {len(s.scene.proposals)} proposals, expected n_visual={n}"
            )
        tokens[i] = assemble_tokens(s.tokens, config.m_max, "grounding")
        gt = Box(*s.label["gt_box"])
        targets = make_ground_truth_scores(s.scene.proposals, gt, eta=config.eta,
                                           canvas_w=s.scene.width, canvas_h=s.scene.height)
        s_star[i] = targets.s_star
        t_star[i] = targets.t_star
        for j, (box, src) in enumerate(zip(s.scene.proposals, s.scene.proposal_sources)):
            obj = s.scene.objects[src]
            appearance[i, j] = appearance_onehots(obj.shape, obj.color, obj.size)
            spatial[i, j] = spatial_feature(box, s.scene.width, s.scene.height)
        proposals.append(list(s.scene.proposals))
        gt_boxes.append(gt)
    return GroundingBatch(tokens=tokens, appearance=appearance, spatial=spatial,
                          vis_valid=vis_valid, s_star=s_star, t_star=t_star,
                          proposals=proposals, gt_boxes=gt_boxes, canvas=canvas)


# -- the model -----------------------------------------------------------------


class MuanModel:
    """Encoders, unifier, UA blocks and the task head for one task."""

    def __init__(self, config: ModelConfig, rng: RngStream):
        config.validate()
        self.config = config
        core = config.core
        self.encoder: EncoderParams = init_encoder(
            rng.child("encoder"), config.vocab_size, config.d_e, core.d_x, core.d_y, core.task
        )
        self.unify: UnifyParams = init_unify(rng.child("unify"), core)
        self.blocks = init_blocks(rng.child("blocks"), core)
        self.vqa: VqaHeadParams | None = None
        self.grounding: GroundingHeadParams | None = None
        if core.task == "vqa":
            self.vqa = init_vqa_head(rng.child("vqa-head"), core.d, config.n_answers)
        else:
            self.grounding = init_grounding_head(rng.child("grounding-head"), core.d)

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Deterministic (name, tensor) order; checkpoint and optimizer share it."""
        yield from self.encoder.parameters("encoder")
        yield from self.unify.parameters("unify")
        for i, block in enumerate(self.blocks):
            yield from block.parameters(f"block{i}")
        if self.vqa is not None:
            yield from self.vqa.parameters("vqa_head")
        if self.grounding is not None:
            yield from self.grounding.parameters("grounding_head")

    def zero_grads(self) -> None:
        for _, t in self.parameters():
            t.grad = None

    def _forward_stack(self, tokens, appearance, spatial, vis_valid,
                       quad: QuadrantMask | None, rng: RngStream | None, train: bool):
        x, text_valid = encode_text(tokens, self.encoder)
        y = visual_projection(Tensor(appearance), Tensor(spatial), self.encoder)
        seq = embed_unify(x, y, self.unify, text_valid, vis_valid)
        if quad is not None and (quad.m, quad.n) != (seq.m, seq.n):
            raise DimensionError(
                f"quadrant extents ({quad.m},{quad.n}) != sequence ({seq.m},{seq.n})"
            )
        return muan_forward(seq, self.blocks, quad=quad,
                            p_drop=self.config.core.dropout, rng=rng, train=train)

    def forward_vqa(self, batch: VqaBatch, quad: QuadrantMask | None = None,
                    rng: RngStream | None = None, train: bool = False
                    ) -> tuple[Tensor, list[AttentionState]]:
        """Answer logits (B, k) from the attended [ans] position."""
        if self.vqa is None:
            raise ConfigurationError("forward_vqa called on a grounding model")
        out, states = self._forward_stack(batch.tokens, batch.appearance, batch.spatial,
                                          batch.vis_valid, quad, rng, train)
        z_ans = slice_axis(out.z, -2, 0, 1)
        z_ans = reshape(z_ans, z_ans.data.shape[:-2] + (self.config.core.d,))
        return vqa_head(z_ans, self.vqa), states

    def forward_grounding(self, batch: GroundingBatch, quad: QuadrantMask | None = None,
                          rng: RngStream | None = None, train: bool = False
                          ) -> tuple[GroundingPrediction, list[AttentionState]]:
        """Scores and refined boxes for every proposal row."""
        if self.grounding is None:
            raise ConfigurationError("forward_grounding called on a vqa model")
        out, states = self._forward_stack(batch.tokens, batch.appearance, batch.spatial,
                                          batch.vis_valid, quad, rng, train)
        m = batch.tokens.shape[-1]
        z_vis = slice_axis(out.z, -2, m, m + self.config.n_visual)
        return grounding_head(z_vis, self.grounding), states

    def quadrant(self, disable_self: bool = False, disable_co: bool = False) -> QuadrantMask:
        return QuadrantMask(m=self.config.m_max, n=self.config.n_visual,
                            disable_self=disable_self, disable_co=disable_co)


def predict_vqa(logits: Tensor) -> np.ndarray:
    """Argmax answer ids (first maximum on ties, deterministic)."""
    return np.argmax(logits.data, axis=-1)


def predict_grounding(pred: GroundingPrediction, batch: GroundingBatch,
                      refined: bool = True) -> list[Box]:
    """Per-sample output box: the top-scoring proposal, refined or raw.

    Refined: the regression head's box at the top-scoring row, mapped back
    to image coordinates.  Unrefined: that proposal's own box (used when
    the regression term was not trained, lambda = 0).  Expects a batched
    prediction, scores (B, n).
    """
    top = np.argmax(pred.scores.data, axis=-1)
    w, h = batch.canvas
    out = []
    for i, j in enumerate(top):
        if refined:
            cx, cy, bw, bh = pred.boxes.data[i, j]
            out.append(box_from_center_size(cx, cy, bw, bh, canvas_w=w, canvas_h=h))
        else:
            out.append(batch.proposals[i][j])
    return out


def usable_grounding_targets(batch: GroundingBatch) -> np.ndarray:
    """Samples with at least one proposal above the IoU threshold."""
    return np.any(batch.s_star > 0.0, axis=-1)
