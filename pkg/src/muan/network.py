"""Unified-attention blocks and the stacked trunk.

A block applies gated multi-head attention over the joint sequence, then a
position-wise feed-forward expansion, each wrapped in a residual connection
followed by layer normalisation (post-norm).  Padded rows are re-zeroed
after every block so that biases cannot leak information into them; together
with additive key masking this keeps valid outputs exactly independent of
how much padding a batch carries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .attention import (
    AttentionState,
    MultiHeadParams,
    QuadrantMask,
    UnifiedSequence,
    init_multi_head_params,
    multi_head_gsa,
)
from .errors import ConfigurationError, DimensionError
from .tensor import (
    RngStream,
    Tensor,
    add,
    concat,
    dropout,
    glorot_uniform,
    layer_norm,
    matmul,
    mul,
    relu,
)

TASKS = ("vqa", "grounding")


@dataclass
class MuanConfig:
    """Architecture hyper-parameters.

    Defaults are the full-scale profile; the toy configs shipped under
    ``configs/`` override the widths for desk-scale runs.  ``d_x`` is the
    text encoder output width and must equal ``d`` when no text projection
    is configured (the default regime: the unifier projects visual features
    only).
    """

    task: str = "vqa"
    L: int = 10
    d: int = 768
    h: int = 8
    d_g: int = 96
    dropout: float = 0.1
    d_x: int | None = None
    d_y: int = 2048
    gated: bool = True

    def __post_init__(self):
        if self.d_x is None:
            self.d_x = self.d
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.L < 1:
            raise ConfigurationError(f"L must be >= 1, got {self.L}")
        if self.h < 1 or self.d % self.h != 0:
            raise ConfigurationError(f"d={self.d} must be divisible by h={self.h}")
        if self.d_g < 1:
            raise ConfigurationError(f"d_g must be >= 1, got {self.d_g}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.d_y < 1:
            raise ConfigurationError(f"d_y must be >= 1, got {self.d_y}")

    @property
    def head_width(self) -> int:
        return self.d // self.h

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "L": self.L,
            "d": self.d,
            "h": self.h,
            "d_g": self.d_g,
            "dropout": self.dropout,
            "d_x": self.d_x,
            "d_y": self.d_y,
            "gated": self.gated,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "MuanConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(raw) - known
        if extra:
            raise ConfigurationError(f"unknown model config fields: {sorted(extra)}")
        return cls(**raw)


@dataclass
class UnifyParams:
    """Projects raw modality features into the shared width d."""

    w_y: Tensor
    b_y: Tensor
    w_x: Tensor | None = None
    b_x: Tensor | None = None

    def parameters(self, prefix: str):
        if self.w_x is not None:
            yield f"{prefix}.w_x", self.w_x
            yield f"{prefix}.b_x", self.b_x
        yield f"{prefix}.w_y", self.w_y
        yield f"{prefix}.b_y", self.b_y


@dataclass
class UABlockParams:
    """One unified-attention block: attention + feed-forward + two norms."""

    attn: MultiHeadParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.attn.parameters(f"{prefix}.attn")
        yield f"{prefix}.ffn.w1", self.w1
        yield f"{prefix}.ffn.b1", self.b1
        yield f"{prefix}.ffn.w2", self.w2
        yield f"{prefix}.ffn.b2", self.b2
        yield f"{prefix}.ln1.gain", self.ln1_gain
        yield f"{prefix}.ln1.bias", self.ln1_bias
        yield f"{prefix}.ln2.gain", self.ln2_gain
        yield f"{prefix}.ln2.bias", self.ln2_bias


def init_unify(rng: RngStream, cfg: MuanConfig) -> UnifyParams:
    params = UnifyParams(
        w_y=Tensor(glorot_uniform(rng, cfg.d_y, cfg.d), requires_grad=True),
        b_y=Tensor(np.zeros(cfg.d), requires_grad=True),
    )
    if cfg.d_x != cfg.d:
        params.w_x = Tensor(glorot_uniform(rng, cfg.d_x, cfg.d), requires_grad=True)
        params.b_x = Tensor(np.zeros(cfg.d), requires_grad=True)
    return params


def init_ua_block(rng: RngStream, cfg: MuanConfig) -> UABlockParams:
    d = cfg.d
    hidden = 4 * d
    return UABlockParams(
        attn=init_multi_head_params(rng, d, cfg.h, cfg.d_g, gated=cfg.gated),
        w1=Tensor(glorot_uniform(rng, d, hidden), requires_grad=True),
        b1=Tensor(np.zeros(hidden), requires_grad=True),
        w2=Tensor(glorot_uniform(rng, hidden, d), requires_grad=True),
        b2=Tensor(np.zeros(d), requires_grad=True),
        ln1_gain=Tensor(np.ones(d), requires_grad=True),
        ln1_bias=Tensor(np.zeros(d), requires_grad=True),
        ln2_gain=Tensor(np.ones(d), requires_grad=True),
        ln2_bias=Tensor(np.zeros(d), requires_grad=True),
    )


def init_blocks(rng: RngStream, cfg: MuanConfig) -> list[UABlockParams]:
    return [init_ua_block(rng.child(f"block{i}"), cfg) for i in range(cfg.L)]


def embed_unify(
    x: Tensor,
    y: Tensor,
    params: UnifyParams,
    text_valid: np.ndarray,
    vis_valid: np.ndarray,
) -> UnifiedSequence:
    """Project both modalities to width d and concatenate along rows.

    Text passes through unchanged when its width already equals d (the
    default regime); visual features always go through the learned
    projection.  Padded rows are zeroed after projection so the bias cannot
    re-introduce content into them.
    """
    m = x.data.shape[-2]
    n = y.data.shape[-2]
    if params.w_x is not None:
        x = add(matmul(x, params.w_x), params.b_x)
    yz = add(matmul(y, params.w_y), params.b_y)
    if x.data.shape[-1] != yz.data.shape[-1]:
        raise DimensionError(
            f"embed_unify: text width {x.data.shape[-1]} != unified width {yz.data.shape[-1]}"
        )
    z = concat([x, yz], axis=-2)
    text_valid = np.asarray(text_valid, dtype=bool)
    vis_valid = np.asarray(vis_valid, dtype=bool)
    valid = np.concatenate((text_valid, vis_valid), axis=-1)
    z = mul(z, valid[..., None].astype(np.float64))
    return UnifiedSequence(z=z, m=m, n=n, valid=valid)


def ffn(x: Tensor, block: UABlockParams, p_drop: float, rng: RngStream, train: bool) -> Tensor:
    """Position-wise expansion d -> 4d -> d with ReLU and (train-only) dropout."""
    h = relu(add(matmul(x, block.w1), block.b1))
    h = dropout(h, p_drop, rng, train)
    return add(matmul(h, block.w2), block.b2)


def ua_block(
    seq: UnifiedSequence,
    block: UABlockParams,
    quad: QuadrantMask | None,
    p_drop: float,
    rng: RngStream,
    train: bool,
) -> tuple[UnifiedSequence, AttentionState]:
    """One post-norm block; padded rows are re-zeroed on the way out."""
    attended, state = multi_head_gsa(seq, block.attn, quad)
    z1 = layer_norm(add(seq.z, attended), block.ln1_gain, block.ln1_bias)
    expanded = ffn(z1, block, p_drop, rng, train)
    z2 = layer_norm(add(z1, expanded), block.ln2_gain, block.ln2_bias)
    z2 = mul(z2, seq.valid[..., None].astype(np.float64))
    return UnifiedSequence(z=z2, m=seq.m, n=seq.n, valid=seq.valid), state


def muan_forward(
    seq: UnifiedSequence,
    blocks: list[UABlockParams],
    quad: QuadrantMask | None = None,
    p_drop: float = 0.0,
    rng: RngStream | None = None,
    train: bool = False,
) -> tuple[UnifiedSequence, list[AttentionState]]:
    """Run the full stack; returns the final sequence and per-block states."""
    if train and p_drop > 0.0 and rng is None:
        raise ConfigurationError("muan_forward: training with dropout needs an RngStream")
    states = []
    for block in blocks:
        seq, state = ua_block(seq, block, quad, p_drop, rng or RngStream(0), train)
        states.append(state)
    return seq, states
