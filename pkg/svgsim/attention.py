# Copyright 2016-2020 Christoph Reiter
# SPDX-License-Identifier: MIT

"""Attention kernels.

Every kernel keeps the softmax state of a query row as an unnormalized
output, a running maximum and a running sum, and visits key tiles in
ascending order. The running sum is accumulated by the same contraction as
the output (a ones column is appended to V), so it is rounded the same way.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .appconfig import QK_NORM_EPSILON, ROPE_THETA_BASE
from .layout import LayoutSpec, Permutation, apply_row_permutation
from .masks import (BlockMask, MaskError, MaskSpec, Predicate, build_block_mask,
                    frame_major_pass_predicate, predicate_matrix, sink_indices)
from .tensor import InvariantError, Matrix, ShapeError, check_matrix, matmul
from .utils import ceil_div

# Applied to every Q and K tile right before the score product
TileTransform = Callable[[Matrix], Matrix]


class SoftmaxPartial(NamedTuple):
    o: Matrix
    m: np.ndarray
    l: np.ndarray


class AttentionOutput(NamedTuple):
    o: Matrix
    flops_counted: int


def empty_partial(rows: int, d: int, dtype: Union[str, np.dtype] = "float64") -> SoftmaxPartial:
    return SoftmaxPartial(
        np.zeros((rows, d), dtype=dtype),
        np.full(rows, -np.inf, dtype=dtype),
        np.zeros(rows, dtype=dtype))


def _rescale(old_max: np.ndarray, new_max: np.ndarray) -> np.ndarray:
    # rows that saw no key yet contribute nothing
    empty = np.isneginf(old_max)
    diff = np.where(empty, 0, old_max - np.where(empty, 0, new_max))
    return np.where(empty, 0, np.exp(diff)).astype(old_max.dtype)


def merge_partials(a: SoftmaxPartial, b: SoftmaxPartial) -> SoftmaxPartial:
    """Softmax state over the union of two disjoint key sets"""

    if a.o.shape != b.o.shape or a.m.shape != b.m.shape:
        raise ShapeError("cannot merge partials of shape %r and %r" % (a.o.shape, b.o.shape))

    m = np.maximum(a.m, b.m)
    alpha = _rescale(a.m, m)
    beta = _rescale(b.m, m)
    return SoftmaxPartial(
        a.o * alpha[:, None] + b.o * beta[:, None],
        m,
        a.l * alpha + b.l * beta)


def finalize(p: SoftmaxPartial) -> Matrix:
    empty = np.flatnonzero(p.l == 0)
    if len(empty):
        raise InvariantError("query row %d attended no keys" % empty[0])
    return p.o / p.l[:, None]


def _check_qkv(q: Matrix, k: Matrix, v: Matrix) -> Tuple[int, int]:
    for name, m in (("q", q), ("k", k), ("v", v)):
        check_matrix(m, name)
    if not q.shape == k.shape == v.shape:
        raise ShapeError("q, k, v must share one S x D shape, got %r, %r, %r" % (
            q.shape, k.shape, v.shape))
    return q.shape


def _default_scale(d: int, scale: Optional[float]) -> float:
    return 1.0 / math.sqrt(d) if scale is None else scale


def _with_ones(v: Matrix) -> Matrix:
    return np.concatenate([v, np.ones((v.shape[0], 1), dtype=v.dtype)], axis=1)


def _tile_partial(s: Matrix, v_tile: Matrix, excluded: Optional[np.ndarray] = None) -> SoftmaxPartial:
    """Softmax state of one tile from its scaled scores"""

    if excluded is not None and excluded.any():
        s = s.copy()
        s[:, excluded] = -np.inf
    m = s.max(axis=1)
    dead = np.isneginf(m)
    p = np.exp(s - np.where(dead, 0, m)[:, None])
    pv = matmul(p, v_tile)
    return SoftmaxPartial(pv[:, :-1], m, pv[:, -1])


def _stream(q: Matrix, k: Matrix, v: Matrix, grid: np.ndarray, block_size: int, scale: float,
            excluded: Optional[np.ndarray] = None,
            transform: Optional[TileTransform] = None) -> Tuple[SoftmaxPartial, int]:
    """Tiled streaming softmax over the active tiles of `grid`.

    Query tiles run over the rows of q, key tiles over the rows of k; edge
    tiles keep their true extents. Keys flagged in `excluded` are masked at
    element level inside active tiles. The scores of a query tile against
    all of its active key tiles come from one product; `matmul` rounds each
    element independently of its neighbours, so they equal tile-by-tile
    products bit for bit.
    """

    B = block_size
    Sq, D = q.shape
    Sk = k.shape[0]
    if grid.shape != (ceil_div(Sq, B), ceil_div(Sk, B)):
        raise ShapeError("block grid %r does not match %d x %d at block size %d" % (
            grid.shape, Sq, Sk, B))

    v1 = _with_ones(v)
    key_tiles: Dict[int, Matrix] = {}
    out = empty_partial(Sq, D, q.dtype)
    flops = 0

    for bq in range(grid.shape[0]):
        active = np.flatnonzero(grid[bq])
        if not len(active):
            continue
        rows = slice(bq * B, min(Sq, (bq + 1) * B))
        q_tile = q[rows] if transform is None else transform(q[rows])
        for bk in active:
            if bk not in key_tiles:
                cols = slice(bk * B, min(Sk, (bk + 1) * B))
                key_tiles[bk] = k[cols] if transform is None else transform(k[cols])
        scores = matmul(q_tile, np.concatenate([key_tiles[bk] for bk in active]).T) * scale

        running: Optional[SoftmaxPartial] = None
        offset = 0
        for bk in active:
            cols = slice(bk * B, min(Sk, (bk + 1) * B))
            width = cols.stop - cols.start
            tile = _tile_partial(scores[:, offset:offset + width], v1[cols],
                                 None if excluded is None else excluded[cols])
            running = tile if running is None else merge_partials(running, tile)
            flops += 4 * (rows.stop - rows.start) * width * D
            offset += width
        assert running is not None
        out.o[rows], out.m[rows], out.l[rows] = running
    return out, flops


def _check_mask(mask: BlockMask, seq_len: int) -> None:
    if mask.seq_len != seq_len:
        raise ShapeError("block mask covers %d tokens, inputs have %d" % (mask.seq_len, seq_len))
    empty = mask.empty_rows()
    if empty:
        raise MaskError("query block row %d has no active key block" % empty[0])


def attention_dense(q: Matrix, k: Matrix, v: Matrix, scale: Optional[float] = None,
                    block_size: int = 64) -> AttentionOutput:
    S, D = _check_qkv(q, k, v)
    nb = ceil_div(S, block_size)
    partial, flops = _stream(q, k, v, np.ones((nb, nb), dtype=bool), block_size,
                             _default_scale(D, scale))
    return AttentionOutput(finalize(partial), flops)


def attention_masked_shared(q: Matrix, k: Matrix, v: Matrix, predicates: Sequence[Predicate],
                            scale: Optional[float] = None,
                            rows: Optional[np.ndarray] = None) -> List[AttentionOutput]:
    """Element-exact masked attention under several masks sharing one score product.

    Each output is bit-identical to `attention_masked_reference` with the
    same predicate.
    """

    S, D = _check_qkv(q, k, v)
    rows = np.arange(S, dtype=np.int64) if rows is None else np.asarray(rows, dtype=np.int64)
    keys = np.arange(S, dtype=np.int64)
    masks = []
    for predicate in predicates:
        active = predicate_matrix(predicate, rows, keys)
        empty = np.flatnonzero(~active.any(axis=1))
        if len(empty):
            raise MaskError("query row %d has no active key" % rows[empty[0]])
        masks.append(active)

    scores = matmul(q[rows], k.T) * _default_scale(D, scale)
    v1 = _with_ones(v)
    outputs = []
    for active in masks:
        masked = np.where(active, scores, -np.inf)
        p = np.exp(masked - masked.max(axis=1, keepdims=True))
        pv = matmul(p, v1)
        outputs.append(AttentionOutput(pv[:, :-1] / pv[:, -1:], 4 * int(np.count_nonzero(active)) * D))
    return outputs


def attention_masked_reference(q: Matrix, k: Matrix, v: Matrix, predicate: Predicate,
                               scale: Optional[float] = None,
                               rows: Optional[np.ndarray] = None) -> AttentionOutput:
    """Element-exact masked softmax attention, the oracle of every sparse path.

    With `rows` only those query rows are computed, in the given order.
    """

    return attention_masked_shared(q, k, v, [predicate], scale, rows)[0]


def attention_block_sparse(q: Matrix, k: Matrix, v: Matrix, mask: BlockMask,
                           scale: Optional[float] = None,
                           transform: Optional[TileTransform] = None) -> AttentionOutput:
    S, D = _check_qkv(q, k, v)
    _check_mask(mask, S)
    partial, flops = _stream(q, k, v, mask.grid, mask.block_size, _default_scale(D, scale),
                             transform=transform)
    return AttentionOutput(finalize(partial), flops)


def attention_temporal_frame_major(q: Matrix, k: Matrix, v: Matrix, spec: MaskSpec,
                                   perm: Permutation, block_size: int,
                                   scale: Optional[float] = None,
                                   transform: Optional[TileTransform] = None) -> AttentionOutput:
    """Temporal attention computed in frame-major order.

    The band pass runs block-sparse over the conjugated temporal mask with
    sink keys removed, the sink pass runs dense against the gathered sink
    keys. Both partials are merged and the output is moved back to
    token-major order.
    """

    S, D = _check_qkv(q, k, v)
    if spec.layout.seq_len != S or perm.size != S:
        raise ShapeError("layout covers %d tokens, permutation %d, inputs %d" % (
            spec.layout.seq_len, perm.size, S))
    scale = _default_scale(D, scale)

    qp = apply_row_permutation(q, perm)
    kp = apply_row_permutation(k, perm)
    vp = apply_row_permutation(v, perm)

    sinks = sink_indices(spec)
    excluded = np.zeros(S, dtype=bool)
    excluded[perm.forward[sinks]] = True

    band = build_block_mask(frame_major_pass_predicate(spec, perm), spec.layout, block_size)
    partial, flops = _stream(qp, kp, vp, band.grid, block_size, scale,
                             excluded=excluded, transform=transform)

    if len(sinks):
        grid = np.ones((ceil_div(S, block_size), ceil_div(len(sinks), block_size)), dtype=bool)
        sink_partial, sink_flops = _stream(qp, k[sinks], v[sinks], grid, block_size, scale,
                                           transform=transform)
        partial = merge_partials(partial, sink_partial)
        flops += sink_flops

    o = apply_row_permutation(finalize(partial), perm.inverted())
    return AttentionOutput(o, flops)


def qk_norm(x: Matrix, epsilon: float = QK_NORM_EPSILON) -> Matrix:
    """Per-row RMS normalization"""

    check_matrix(x)
    if x.shape[1] < 1:
        raise ShapeError("qk_norm needs D >= 1")
    rms = np.sqrt(np.mean(x * x, axis=1, keepdims=True) + epsilon)
    return x / rms


def rope(x: Matrix, positions: np.ndarray, theta_base: float = ROPE_THETA_BASE) -> Matrix:
    """1-D rotary embedding: pair (2i, 2i+1) turns by pos * theta_base^(-2i/D)"""

    check_matrix(x)
    S, D = x.shape
    if D % 2:
        raise ShapeError("rope needs an even head dimension, got %d" % D)
    positions = np.asarray(positions)
    if positions.shape != (S,):
        raise ShapeError("need one position per row")

    freqs = theta_base ** (-np.arange(0, D, 2, dtype=np.float64) / D)
    angles = positions.astype(np.float64)[:, None] * freqs[None, :]
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)
    even, odd = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


class Dense(NamedTuple):
    pass


class Spatial(NamedTuple):
    c_s: int


class Temporal(NamedTuple):
    c_t: int


FlopsKind = Union[Dense, Spatial, Temporal]


def flops_closed_form(layout: LayoutSpec, d: int, kind: FlopsKind) -> int:
    """Attention FLOPs of one head over the video tokens.

    Text and first-frame sinks are left out. For Temporal the count is the
    number of offsets attended per frame.
    """

    N, L = layout.num_frames, layout.tokens_per_frame
    if isinstance(kind, Spatial):
        return 4 * L * L * d * kind.c_s * N
    elif isinstance(kind, Temporal):
        return 4 * N * N * d * kind.c_t * L
    return 4 * (L * N) ** 2 * d
