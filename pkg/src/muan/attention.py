"""Gated multi-head attention over a concatenated two-modality sequence.

The joint sequence holds ``m`` text rows followed by ``n`` visual rows.  A
single attention map therefore contains four quadrants (text-text,
text-visual, visual-text, visual-visual); intra- and inter-modality flow can
be switched off independently through :class:`QuadrantMask`, and padded
positions are removed with an additive key mask.

Per-position sigmoid gates are computed once from the full-width query/key
projections through a low-rank bilinear interaction and shared across heads;
they scale queries and keys (never values) before the scaled dot product.
With gates pinned to one the arithmetic path is identical to ungated
attention, which keeps the ablation comparable bit-for-bit.

Visual rows carry no positional information, and the implementation makes
the resulting symmetry exact rather than approximate: before attending, the
visual rows are re-ordered into a canonical content-derived order (sorting
the raw float bit patterns), and results are scattered back afterwards.
Any permutation of the visual input rows then executes the *same* floating
point program, so outputs are bit-identical rather than merely close.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import (
    MASK_DROP,
    RngStream,
    Tensor,
    add,
    glorot_uniform,
    masked_softmax_rows,
    matmul,
    mul,
    permute_rows,
    reshape,
    sigmoid,
    slice_axis,
    swap_axes,
    transpose,
)


@dataclass
class UnifiedSequence:
    """A joint text+visual sequence: ``m`` text rows then ``n`` visual rows.

    ``valid`` marks real positions; padded rows are kept all-zero by the
    producing code so downstream outputs cannot depend on pad count.
    """

    z: Tensor
    m: int
    n: int
    valid: np.ndarray

    def __post_init__(self):
        s = self.m + self.n
        if self.z.data.shape[-2] != s:
            raise DimensionError(
                f"UnifiedSequence: z has {self.z.data.shape[-2]} rows, expected m+n={s}"
            )
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape[-1] != s:
            raise DimensionError(
                f"UnifiedSequence: valid has extent {self.valid.shape[-1]}, expected {s}"
            )


@dataclass
class QuadrantMask:
    """Which attention quadrants to disable (for ablations)."""

    m: int
    n: int
    disable_self: bool = False
    disable_co: bool = False

    def __post_init__(self):
        if self.disable_self and self.disable_co:
            raise ConfigurationError("QuadrantMask: cannot disable self and co quadrants together")


@dataclass
class ProjectionSet:
    """Query/key/value projections, all d -> d."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor

    def parameters(self, prefix: str):
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.b_q", self.b_q
        yield f"{prefix}.w_k", self.w_k
        yield f"{prefix}.b_k", self.b_k
        yield f"{prefix}.w_v", self.w_v
        yield f"{prefix}.b_v", self.b_v


@dataclass
class GateParams:
    """Low-rank bilinear gate: d -> d_g twice, elementwise product, d_g -> 2.

    The output bias starts at zero so untrained gates sit at 0.5.
    """

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_out: Tensor
    b_out: Tensor

    def parameters(self, prefix: str):
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.b_q", self.b_q
        yield f"{prefix}.w_k", self.w_k
        yield f"{prefix}.b_k", self.b_k
        yield f"{prefix}.w_out", self.w_out
        yield f"{prefix}.b_out", self.b_out


@dataclass
class MultiHeadParams:
    """Everything one gated multi-head attention layer owns."""

    heads: int
    proj: ProjectionSet
    gate: GateParams | None
    w_out: Tensor
    b_out: Tensor

    def parameters(self, prefix: str):
        yield from self.proj.parameters(f"{prefix}.proj")
        if self.gate is not None:
            yield from self.gate.parameters(f"{prefix}.gate")
        yield f"{prefix}.w_out", self.w_out
        yield f"{prefix}.b_out", self.b_out


class AttentionState:
    """Detached per-layer diagnostics (exportable attention maps).

    The multi-head layer computes in canonical row order; the arrays here
    are stored as computed and mapped back to the caller's row order only
    when an attribute is first read.  Training loops never touch these, so
    the (potentially large) gather work is skipped on the hot path.
    """

    def __init__(
        self,
        logits: np.ndarray,
        weights: np.ndarray,
        gate_q: np.ndarray | None,
        gate_k: np.ndarray | None,
        inverse: np.ndarray | None = None,
    ):
        self._logits = logits
        self._weights = weights
        self._gate_q = gate_q
        self._gate_k = gate_k
        self._inverse = inverse
        self._cache: dict[str, np.ndarray | None] = {}

    def _restore(self, name: str, arr: np.ndarray | None, rows_only: bool):
        if name not in self._cache:
            if arr is None or self._inverse is None:
                self._cache[name] = arr
            elif rows_only:
                idx = self._inverse
                if arr.ndim == idx.ndim + 1:  # head axis present
                    idx = idx[..., None, :]
                self._cache[name] = np.take_along_axis(arr, idx, axis=-1)
            else:
                self._cache[name] = _uncanonical_state(arr, self._inverse)
        return self._cache[name]

    @property
    def logits(self) -> np.ndarray:
        return self._restore("logits", self._logits, rows_only=False)

    @property
    def weights(self) -> np.ndarray:
        return self._restore("weights", self._weights, rows_only=False)

    @property
    def gate_q(self) -> np.ndarray | None:
        return self._restore("gate_q", self._gate_q, rows_only=True)

    @property
    def gate_k(self) -> np.ndarray | None:
        return self._restore("gate_k", self._gate_k, rows_only=True)


def init_projection_set(rng: RngStream, d: int) -> ProjectionSet:
    def w():
        return Tensor(glorot_uniform(rng, d, d), requires_grad=True)

    def b():
        return Tensor(np.zeros(d), requires_grad=True)

    return ProjectionSet(w_q=w(), b_q=b(), w_k=w(), b_k=b(), w_v=w(), b_v=b())


def init_gate_params(rng: RngStream, d: int, d_g: int) -> GateParams:
    return GateParams(
        w_q=Tensor(glorot_uniform(rng, d, d_g), requires_grad=True),
        b_q=Tensor(np.zeros(d_g), requires_grad=True),
        w_k=Tensor(glorot_uniform(rng, d, d_g), requires_grad=True),
        b_k=Tensor(np.zeros(d_g), requires_grad=True),
        w_out=Tensor(glorot_uniform(rng, d_g, 2), requires_grad=True),
        b_out=Tensor(np.zeros(2), requires_grad=True),
    )


def init_multi_head_params(rng: RngStream, d: int, h: int, d_g: int, gated: bool = True) -> MultiHeadParams:
    if h < 1 or d % h != 0:
        raise ConfigurationError(f"attention: d={d} must be divisible by heads={h}")
    return MultiHeadParams(
        heads=h,
        proj=init_projection_set(rng, d),
        gate=init_gate_params(rng, d, d_g) if gated else None,
        w_out=Tensor(glorot_uniform(rng, d, d), requires_grad=True),
        b_out=Tensor(np.zeros(d), requires_grad=True),
    )


# -- masks --------------------------------------------------------------------


def build_quadrant_mask(quad: QuadrantMask) -> np.ndarray:
    """Additive (s, s) mask dropping the requested quadrants."""
    if quad.disable_self and quad.disable_co:
        raise ConfigurationError("build_quadrant_mask: self and co cannot both be disabled")
    s = quad.m + quad.n
    mask = np.zeros((s, s))
    m = quad.m
    if quad.disable_self:
        mask[:m, :m] = MASK_DROP
        mask[m:, m:] = MASK_DROP
    if quad.disable_co:
        mask[:m, m:] = MASK_DROP
        mask[m:, :m] = MASK_DROP
    return mask


def key_pad_mask(valid: np.ndarray) -> np.ndarray:
    """Additive mask over keys: shape ``valid.shape[:-1] + (1, s)``."""
    valid = np.asarray(valid, dtype=bool)
    return np.where(valid, 0.0, MASK_DROP)[..., None, :]


def _combine_masks(valid: np.ndarray | None, quad: QuadrantMask | None, heads_axis: bool):
    mask = None
    if valid is not None:
        mask = key_pad_mask(valid)
        if heads_axis:
            mask = mask[..., None, :, :]
    if quad is not None:
        qm = build_quadrant_mask(quad)
        mask = qm if mask is None else mask + qm
    return mask


# -- core attention -----------------------------------------------------------


def project_qkv(z: Tensor, proj: ProjectionSet) -> tuple[Tensor, Tensor, Tensor]:
    q = add(matmul(z, proj.w_q), proj.b_q)
    k = add(matmul(z, proj.w_k), proj.b_k)
    v = add(matmul(z, proj.w_v), proj.b_v)
    return q, k, v


def compute_gates(q: Tensor, k: Tensor, gate: GateParams) -> tuple[Tensor, Tensor]:
    """Per-position gates in (0, 1): column 0 scales queries, column 1 keys.

    Returned with a trailing singleton axis so they broadcast across the
    feature axis (the same scalar gates every feature of its row).
    """
    qg = add(matmul(q, gate.w_q), gate.b_q)
    kg = add(matmul(k, gate.w_k), gate.b_k)
    m = sigmoid(add(matmul(mul(qg, kg), gate.w_out), gate.b_out))  # (..., s, 2)
    return slice_axis(m, -1, 0, 1), slice_axis(m, -1, 1, 2)


def _attend(q, k, v, gate_q, gate_k, mask, scale_width) -> tuple[Tensor, AttentionState]:
    """Single arithmetic path shared by the plain, gated and multi-head calls."""
    if (gate_q is None) != (gate_k is None):
        raise ConfigurationError("attention: supply both gates or neither")
    raw_gq = gate_q
    raw_gk = gate_k
    if gate_q is not None:
        q = mul(q, gate_q)
        k = mul(k, gate_k)
    logits = mul(matmul(q, transpose(k)), 1.0 / sqrt(scale_width))
    if mask is None:
        mask = np.zeros((1, logits.data.shape[-1]))
    weights = masked_softmax_rows(logits, mask)
    out = matmul(weights, v)
    state = AttentionState(
        logits=logits.data,
        weights=weights.data,
        gate_q=None if raw_gq is None else raw_gq.data[..., 0],
        gate_k=None if raw_gk is None else raw_gk.data[..., 0],
    )
    return out, state


def gated_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    gate_q: Tensor | None,
    gate_k: Tensor | None,
    pad_valid: np.ndarray | None = None,
    quad: QuadrantMask | None = None,
) -> tuple[Tensor, AttentionState]:
    """Scaled dot-product attention with optional query/key gates.

    ``q``/``k``/``v`` share trailing shape ``(s, w)``; any leading axes
    (batch, heads) broadcast.  Gates, when given, have shape ``(..., s, 1)``
    and multiply queries and keys only; passing ``None`` for both runs the
    ungated path, which is arithmetically identical to gates of exactly 1.
    ``pad_valid`` is a boolean key validity array ``(..., s)``; ``quad``
    drops whole quadrants.  Scaling is ``1/sqrt(w)``, i.e. per-head width
    when called on per-head slices.
    """
    width = q.data.shape[-1]
    if k.data.shape[-1] != width:
        raise DimensionError(f"gated_attention: q width {width} != k width {k.data.shape[-1]}")
    mask = _combine_masks(pad_valid, quad, heads_axis=False)
    return _attend(q, k, v, gate_q, gate_k, mask, width)


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, s, d = x.data.shape
    x = reshape(x, (*lead, s, h, d // h))
    return swap_axes(x, -3, -2)  # (..., h, s, d/h)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, dh = x.data.shape
    return reshape(swap_axes(x, -3, -2), (*lead, s, h * dh))


def canonical_visual_order(values: np.ndarray, m: int) -> np.ndarray:
    """Content-derived ordering of the visual rows (text rows stay put).

    Rows are compared by the raw bit patterns of their float64 entries, so
    the order is a pure function of row *content*: feeding the same rows in
    any order yields the same canonical arrangement.  Returns int indices of
    shape ``values.shape[:-2] + (s,)``.
    """
    s = values.shape[-2]
    n = s - m
    lead = values.shape[:-2]
    vis = np.ascontiguousarray(values[..., m:, :]).view(np.uint64)
    flat = vis.reshape(-1, n, vis.shape[-1])
    orders = np.empty((flat.shape[0], n), dtype=np.int64)
    for i in range(flat.shape[0]):
        orders[i] = np.lexsort(flat[i].T[::-1])
    full = np.empty((flat.shape[0], s), dtype=np.int64)
    full[:, :m] = np.arange(m)
    full[:, m:] = m + orders
    return full.reshape(*lead, s)


def multi_head_gsa(
    seq: UnifiedSequence,
    params: MultiHeadParams,
    quad: QuadrantMask | None = None,
    gate_override: tuple[Tensor, Tensor] | None = None,
) -> tuple[Tensor, AttentionState]:
    """Gated multi-head attention over the unified sequence.

    Q/K/V are split into ``heads`` width-``d/h`` slices; the position gates
    are computed once at full width and shared across heads; head outputs
    are concatenated and passed through a learned d x d output projection.
    Visual rows are canonicalised (see module docstring) so visual-row
    permutations of the input permute the output bitwise.

    ``gate_override`` replaces the learned gates with fixed per-row values
    (input row order, trailing singleton feature axis).  It exists for
    diagnostics: pinning both gates to exactly 1.0 must reproduce the
    ungated layer bit-for-bit, something a sigmoid can never emit.
    """
    d = seq.z.data.shape[-1]
    h = params.heads
    if d % h != 0:
        raise ConfigurationError(f"multi_head_gsa: d={d} not divisible by heads={h}")
    if quad is not None and (quad.m != seq.m or quad.n != seq.n):
        raise DimensionError(
            f"multi_head_gsa: quadrant extents ({quad.m},{quad.n}) != sequence ({seq.m},{seq.n})"
        )

    order = canonical_visual_order(seq.z.data, seq.m)
    inverse = np.argsort(order, axis=-1)
    z = permute_rows(seq.z, order)
    valid = np.take_along_axis(np.broadcast_to(seq.valid, z.data.shape[:-1]), order, axis=-1)

    q, k, v = project_qkv(z, params.proj)
    if gate_override is not None:
        target = z.data.shape[:-1] + (1,)
        pinned = [
            Tensor(np.broadcast_to(np.asarray(g.data if isinstance(g, Tensor) else g), target).copy())
            for g in gate_override
        ]
        gate_q = permute_rows(pinned[0], order)
        gate_k = permute_rows(pinned[1], order)
    elif params.gate is not None:
        gate_q, gate_k = compute_gates(q, k, params.gate)  # (..., s, 1)
    else:
        gate_q = gate_k = None
    if gate_q is not None:
        *lead, s, _ = gate_q.data.shape
        gq_h = reshape(gate_q, (*lead, 1, s, 1))
        gk_h = reshape(gate_k, (*lead, 1, s, 1))
    else:
        gq_h = gk_h = None

    mask = _combine_masks(valid, quad, heads_axis=True)
    ctx, state = _attend(
        _split_heads(q, h), _split_heads(k, h), _split_heads(v, h),
        gq_h, gk_h, mask, d // h,
    )

    out = add(matmul(_merge_heads(ctx), params.w_out), params.b_out)
    out = permute_rows(out, inverse)

    state = AttentionState(
        logits=state._logits,
        weights=state._weights,
        gate_q=None if gate_q is None else gate_q.data[..., 0],
        gate_k=None if gate_k is None else gate_k.data[..., 0],
        inverse=inverse,
    )
    return out, state


def _uncanonical_state(arr: np.ndarray, inverse: np.ndarray) -> np.ndarray:
    """Undo row/column canonicalisation on an (..., h, s, s) or (..., s, s) map."""
    idx = inverse
    if arr.ndim == idx.ndim + 2:  # head axis present
        rows = idx[..., None, :, None]
        cols = idx[..., None, None, :]
    else:
        rows = idx[..., :, None]
        cols = idx[..., None, :]
    arr = np.take_along_axis(arr, rows, axis=-2)
    return np.take_along_axis(arr, cols, axis=-1)
