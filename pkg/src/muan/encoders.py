"""Input encoders: token embedding + gated recurrent pass, visual featurization.

Text: learned embedding (pad row pinned to zero) followed by one gated
recurrent layer; every position's hidden state is kept, pad positions are
zeroed and flagged invalid.

Visual: objects/proposals are described by attribute one-hots plus the 5-D
spatial vector [x_tl/W, y_tl/H, x_br/W, y_br/H, wh/WH].  For VQA the two
parts are projected together; for grounding the spatial part is first
lifted to the appearance width by its own affine layer and concatenated,
mirroring how detector features and box coordinates are fused at full
scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, VocabularyError
from .heads import Box
from .tensor import (
    RngStream,
    Tensor,
    add,
    concat,
    embedding_lookup,
    glorot_uniform,
    matmul,
    mul,
    sigmoid,
    slice_axis,
    tanh,
)

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "blue", "green", "yellow", "purple", "orange", "black", "white")
SIZES = ("small", "large")

APPEARANCE_WIDTH = len(SHAPES) + len(COLORS) + len(SIZES)  # 13
SPATIAL_WIDTH = 5


@dataclass
class GruParams:
    """One gated recurrent layer, input width d_e, hidden width d_x."""

    w_u: Tensor
    u_u: Tensor
    b_u: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_c: Tensor
    u_c: Tensor
    b_c: Tensor

    def parameters(self, prefix: str):
        for name in ("w_u", "u_u", "b_u", "w_r", "u_r", "b_r", "w_c", "u_c", "b_c"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class EncoderParams:
    """Embedding table, recurrent cell and the visual projection stack."""

    embedding: Tensor
    gru: GruParams
    w_vis: Tensor
    b_vis: Tensor
    w_spatial: Tensor | None = None
    b_spatial: Tensor | None = None

    def parameters(self, prefix: str):
        yield f"{prefix}.embedding", self.embedding
        yield from self.gru.parameters(f"{prefix}.gru")
        yield f"{prefix}.w_vis", self.w_vis
        yield f"{prefix}.b_vis", self.b_vis
        if self.w_spatial is not None:
            yield f"{prefix}.w_spatial", self.w_spatial
            yield f"{prefix}.b_spatial", self.b_spatial

    def freeze_pad_row(self) -> None:
        """Pin the pad embedding (and any gradient on it) back to zero."""
        self.embedding.data[0, :] = 0.0
        if self.embedding.grad is not None:
            self.embedding.grad[0, :] = 0.0


def init_gru(rng: RngStream, d_e: int, d_x: int) -> GruParams:
    def w():
        return Tensor(glorot_uniform(rng, d_e, d_x), requires_grad=True)

    def u():
        return Tensor(glorot_uniform(rng, d_x, d_x), requires_grad=True)

    def b():
        return Tensor(np.zeros(d_x), requires_grad=True)

    return GruParams(w_u=w(), u_u=u(), b_u=b(), w_r=w(), u_r=u(), b_r=b(),
                     w_c=w(), u_c=u(), b_c=b())


def init_encoder(rng: RngStream, vocab_size: int, d_e: int, d_x: int, d_y: int,
                 task: str) -> EncoderParams:
    if task not in ("vqa", "grounding"):
        raise ConfigurationError(f"init_encoder: unknown task {task!r}")
    emb = glorot_uniform(rng, d_e, d_e, shape=(vocab_size, d_e))
    emb[0, :] = 0.0
    grounding = task == "grounding"
    raw_width = 2 * APPEARANCE_WIDTH if grounding else APPEARANCE_WIDTH + SPATIAL_WIDTH
    return EncoderParams(
        embedding=Tensor(emb, requires_grad=True),
        gru=init_gru(rng, d_e, d_x),
        w_vis=Tensor(glorot_uniform(rng, raw_width, d_y), requires_grad=True),
        b_vis=Tensor(np.zeros(d_y), requires_grad=True),
        w_spatial=Tensor(glorot_uniform(rng, SPATIAL_WIDTH, APPEARANCE_WIDTH), requires_grad=True)
        if grounding else None,
        b_spatial=Tensor(np.zeros(APPEARANCE_WIDTH), requires_grad=True) if grounding else None,
    )


def gru_cell(x: Tensor, h: Tensor, p: GruParams) -> Tensor:
    """One step: update/reset gates, candidate state, convex mix."""
    u = sigmoid(add(add(matmul(x, p.w_u), matmul(h, p.u_u)), p.b_u))
    r = sigmoid(add(add(matmul(x, p.w_r), matmul(h, p.u_r)), p.b_r))
    cand = tanh(add(add(matmul(x, p.w_c), matmul(mul(r, h), p.u_c)), p.b_c))
    one_minus_u = add(mul(u, -1.0), 1.0)
    return add(mul(one_minus_u, h), mul(u, cand))


def encode_text(tokens, enc: EncoderParams) -> tuple[Tensor, np.ndarray]:
    """Hidden states for every token position plus the validity mask.

    ``tokens`` is an int array (..., m), right-padded with id 0.  Ids must
    index into the embedding table.  Pad positions come back as exact zero
    rows and False in the mask; because the recurrence runs left to right,
    appending padding never changes the states of valid positions.
    """
    ids = np.asarray(tokens)
    if not np.issubdtype(ids.dtype, np.integer):
        raise VocabularyError(f"encode_text: token ids must be integers, got {ids.dtype}")
    vocab_size = enc.embedding.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise VocabularyError(f"encode_text: token id {bad} outside vocabulary of {vocab_size}")
    emb = embedding_lookup(enc.embedding, ids)  # (..., m, d_e)
    m = ids.shape[-1]
    lead = ids.shape[:-1]
    d_x = enc.gru.u_u.data.shape[0]
    h = Tensor(np.zeros((*lead, 1, d_x)))
    steps = []
    for t in range(m):
        h = gru_cell(slice_axis(emb, -2, t, t + 1), h, enc.gru)
        steps.append(h)
    states = steps[0] if m == 1 else concat(steps, axis=-2)
    valid = ids != 0
    states = mul(states, valid[..., None].astype(np.float64))
    return states, valid


def spatial_feature(box: Box, canvas_w: float, canvas_h: float) -> np.ndarray:
    """[x_tl/W, y_tl/H, x_br/W, y_br/H, wh/WH]."""
    return np.array([
        box.x_tl / canvas_w,
        box.y_tl / canvas_h,
        box.x_br / canvas_w,
        box.y_br / canvas_h,
        (box.width * box.height) / (canvas_w * canvas_h),
    ])


def appearance_onehots(shape: str, color: str, size: str) -> np.ndarray:
    """Concatenated shape/color/size indicator vector."""
    out = np.zeros(APPEARANCE_WIDTH)
    try:
        out[SHAPES.index(shape)] = 1.0
        out[len(SHAPES) + COLORS.index(color)] = 1.0
        out[len(SHAPES) + len(COLORS) + SIZES.index(size)] = 1.0
    except ValueError as exc:
        raise ConfigurationError(f"unknown attribute in ({shape}, {color}, {size})") from exc
    return out


def visual_projection(appearance: Tensor, spatial: Tensor, enc: EncoderParams) -> Tensor:
    """Raw per-row features to d_y.

    ``appearance`` is (..., n, 13), ``spatial`` (..., n, 5).  With a spatial
    lift configured (grounding) the spatial part is brought to width 13 and
    concatenated before the shared projection; otherwise both parts are
    concatenated raw (width 18).
    """
    if appearance.data.shape[-1] != APPEARANCE_WIDTH:
        raise DimensionError(
            f"visual_projection: appearance width {appearance.data.shape[-1]} != {APPEARANCE_WIDTH}"
        )
    if spatial.data.shape[-1] != SPATIAL_WIDTH:
        raise DimensionError(
            f"visual_projection: spatial width {spatial.data.shape[-1]} != {SPATIAL_WIDTH}"
        )
    if enc.w_spatial is not None:
        spatial = add(matmul(spatial, enc.w_spatial), enc.b_spatial)
    raw = concat([appearance, spatial], axis=-1)
    if raw.data.shape[-1] != enc.w_vis.data.shape[0]:
        raise DimensionError(
            f"visual_projection: raw width {raw.data.shape[-1]} != projection rows {enc.w_vis.data.shape[0]}"
        )
    return add(matmul(raw, enc.w_vis), enc.b_vis)
