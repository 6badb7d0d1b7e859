# Copyright 2016-2020 Christoph Reiter
# SPDX-License-Identifier: MIT

"""Spatial and temporal attention masks.

Predicates are vectorized: they take broadcastable integer arrays of query
and key indices and return a boolean array of the broadcast shape.
"""

from __future__ import annotations

import logging
from enum import Enum
from functools import partial
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np

from .appconfig import PREDICATE_CHUNK_ROWS
from .layout import LayoutSpec, Permutation
from .tensor import SvgSimError
from .utils import ceil_div

logger = logging.getLogger(__name__)

Predicate = Callable[[np.ndarray, np.ndarray], np.ndarray]


class MaskError(SvgSimError, ValueError):
    pass


class MaskKind(Enum):
    SPATIAL = "spatial"
    TEMPORAL = "temporal"


class MaskSpec(NamedTuple):
    layout: LayoutSpec
    c_s: int
    c_t: int
    include_first_frame: bool = True
    include_text: bool = True

    @classmethod
    def create(cls, layout: LayoutSpec, c_s: int, c_t: int,
               include_first_frame: bool = True, include_text: bool = True) -> MaskSpec:
        problems = []
        if not 1 <= c_s <= layout.num_frames:
            problems.append("c_s must be in [1, %d], got %d" % (layout.num_frames, c_s))
        if not 1 <= c_t <= layout.video_len:
            problems.append("c_t must be in [1, %d], got %d" % (layout.video_len, c_t))
        if problems:
            raise MaskError("; ".join(problems))
        return cls(layout, c_s, c_t, include_first_frame, include_text)

    @property
    def window_back(self) -> int:
        """Frames before the query frame in a centred window"""

        return (self.c_s - 1) // 2

    @property
    def window_forward(self) -> int:
        return self.c_s // 2

    def window_start(self, frames: np.ndarray) -> np.ndarray:
        """First frame of the spatial window of each query frame.

        The window is centred where it fits and shifted inward at the ends
        of the video, so it always spans exactly c_s frames.
        """

        last = self.layout.num_frames - self.c_s
        return np.clip(np.asarray(frames) - self.window_back, 0, last)

    @property
    def temporal_half_width(self) -> int:
        return (ceil_div(self.c_t, self.layout.num_frames) - 1) // 2

    @property
    def temporal_offsets(self) -> int:
        """Offsets per frame covered by the slash of an interior query"""

        return 2 * self.temporal_half_width + 1

    def without_sinks(self) -> MaskSpec:
        return self._replace(include_first_frame=False, include_text=False)


def _check_indices(layout: LayoutSpec, q: np.ndarray, k: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    q = np.asarray(q, dtype=np.int64)
    k = np.asarray(k, dtype=np.int64)
    S = layout.seq_len
    for name, a in (("query", q), ("key", k)):
        if a.size and (a.min() < 0 or a.max() >= S):
            raise MaskError("%s index out of range [0, %d)" % (name, S))
    return q, k


def _frame(layout: LayoutSpec, i: np.ndarray) -> np.ndarray:
    return np.where(i >= layout.text_len, (i - layout.text_len) // layout.tokens_per_frame, -1)


def _offset(layout: LayoutSpec, i: np.ndarray) -> np.ndarray:
    return np.where(i >= layout.text_len, (i - layout.text_len) % layout.tokens_per_frame, -1)


def sink_columns(spec: MaskSpec, k: np.ndarray) -> np.ndarray:
    """Keys every query attends: text tokens and the first frame"""

    T, L = spec.layout.text_len, spec.layout.tokens_per_frame
    k = np.asarray(k, dtype=np.int64)
    sink = np.zeros(k.shape, dtype=bool)
    if spec.include_text:
        sink |= k < T
    if spec.include_first_frame:
        sink |= (k >= T) & (k < T + L)
    return sink


def sink_indices(spec: MaskSpec) -> np.ndarray:
    return np.flatnonzero(sink_columns(spec, np.arange(spec.layout.seq_len)))


def spatial_predicate(spec: MaskSpec, q: np.ndarray, k: np.ndarray) -> np.ndarray:
    layout = spec.layout
    q, k = _check_indices(layout, q, k)
    T = layout.text_len
    fq = _frame(layout, q)
    fk = _frame(layout, k)
    start = spec.window_start(fq)
    window = (q >= T) & (k >= T) & (fk >= start) & (fk < start + spec.c_s)
    return (q < T) | sink_columns(spec, k) | window


def slash_predicate(spec: MaskSpec, q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """The slash alone: video pairs whose offsets differ by at most w"""

    layout = spec.layout
    q, k = _check_indices(layout, q, k)
    T = layout.text_len
    near = np.abs(_offset(layout, q) - _offset(layout, k)) <= spec.temporal_half_width
    return (q >= T) & (k >= T) & near


def temporal_predicate(spec: MaskSpec, q: np.ndarray, k: np.ndarray) -> np.ndarray:
    q, k = _check_indices(spec.layout, q, k)
    return (q < spec.layout.text_len) | sink_columns(spec, k) | slash_predicate(spec, q, k)


def all_pairs(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    return np.ones(np.broadcast(q, k).shape, dtype=bool)


def spatial_mask(spec: MaskSpec) -> Predicate:
    return partial(spatial_predicate, spec)


def temporal_mask(spec: MaskSpec) -> Predicate:
    return partial(temporal_predicate, spec)


def mask_for(spec: MaskSpec, kind: MaskKind) -> Predicate:
    if kind is MaskKind.SPATIAL:
        return spatial_mask(spec)
    return temporal_mask(spec)


def band_predicate(spec: MaskSpec, q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """The slash in frame-major coordinates: a band of offset slots"""

    T, N = spec.layout.text_len, spec.layout.num_frames
    q, k = _check_indices(spec.layout, q, k)
    slot_distance = np.abs((q - T) // N - (k - T) // N)
    return (q >= T) & (k >= T) & (slot_distance <= spec.temporal_half_width)


def band_half_width(spec: MaskSpec) -> int:
    """Largest |q' - k'| of a band pair in frame-major coordinates"""

    return spec.temporal_half_width * spec.layout.num_frames + spec.layout.num_frames - 1


def conjugate_predicate(predicate: Predicate, perm: Permutation) -> Predicate:
    """The predicate seen through `perm`: p'(q', k') = p(inverse[q'], inverse[k'])"""

    inverse = perm.inverse

    def conjugated(q: np.ndarray, k: np.ndarray) -> np.ndarray:
        return predicate(inverse[np.asarray(q)], inverse[np.asarray(k)])

    return conjugated


class BlockMask(NamedTuple):
    block_size: int
    seq_len: int
    grid: np.ndarray

    @property
    def num_blocks(self) -> int:
        return self.grid.shape[0]

    @property
    def active_block_count(self) -> int:
        return int(np.count_nonzero(self.grid))

    def block_extents(self) -> np.ndarray:
        """True number of tokens in every block, the last one may be short"""

        extents = np.full(self.num_blocks, self.block_size, dtype=np.int64)
        extents[-1] = self.seq_len - (self.num_blocks - 1) * self.block_size
        return extents

    def active_area(self) -> int:
        """Element pairs covered by the active tiles, edges at true extents"""

        extents = self.block_extents()
        return int(extents @ self.grid.astype(np.int64) @ extents)

    def empty_rows(self) -> List[int]:
        return [int(r) for r in np.flatnonzero(~self.grid.any(axis=1))]

    def expanded(self) -> Predicate:
        """Element predicate of the tiles: true everywhere inside active blocks"""

        B, grid = self.block_size, self.grid

        def predicate(q: np.ndarray, k: np.ndarray) -> np.ndarray:
            return grid[np.asarray(q) // B, np.asarray(k) // B]

        return predicate


def predicate_matrix(predicate: Predicate, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Predicate over rows x cols as a dense boolean matrix"""

    active = np.asarray(predicate(rows[:, None], cols[None, :]), dtype=bool)
    return np.broadcast_to(active, (len(rows), len(cols)))


def build_block_mask(predicate: Predicate, layout: LayoutSpec, block_size: int) -> BlockMask:
    """A tile is active iff any of its element pairs is active"""

    if block_size < 1:
        raise MaskError("block size must be >= 1")

    S = layout.seq_len
    nb = ceil_div(S, block_size)
    padded = nb * block_size
    keys = np.arange(S, dtype=np.int64)
    grid = np.zeros((nb, nb), dtype=bool)

    for bq in range(nb):
        rows = np.arange(bq * block_size, min(S, (bq + 1) * block_size), dtype=np.int64)
        cols = predicate_matrix(predicate, rows, keys).any(axis=0)
        if padded != S:
            cols = np.concatenate([cols, np.zeros(padded - S, dtype=bool)])
        grid[bq] = cols.reshape(nb, block_size).any(axis=1)

    grid.setflags(write=False)
    return BlockMask(block_size, S, grid)


def density(mask: BlockMask) -> float:
    """Active fraction of the padded block grid"""

    return mask.active_block_count / float(mask.num_blocks ** 2)


def element_coverage(mask: BlockMask) -> float:
    """Fraction of the S x S element pairs computed by the active tiles"""

    return mask.active_area() / float(mask.seq_len ** 2)


def count_pairs(predicate: Predicate, rows: np.ndarray, cols: np.ndarray) -> int:
    count = 0
    for start in range(0, len(rows), PREDICATE_CHUNK_ROWS):
        chunk = rows[start:start + PREDICATE_CHUNK_ROWS]
        count += int(np.count_nonzero(predicate_matrix(predicate, chunk, cols)))
    return count


def video_tokens(layout: LayoutSpec) -> np.ndarray:
    return np.arange(layout.text_len, layout.seq_len, dtype=np.int64)


def element_density(predicate: Predicate, layout: LayoutSpec,
                    rows: Optional[np.ndarray] = None, cols: Optional[np.ndarray] = None) -> float:
    """Exhaustive active fraction over rows x cols (default: all tokens)"""

    all_tokens = np.arange(layout.seq_len, dtype=np.int64)
    rows = all_tokens if rows is None else np.asarray(rows, dtype=np.int64)
    cols = all_tokens if cols is None else np.asarray(cols, dtype=np.int64)
    total = len(rows) * len(cols)
    if total == 0:
        return 0.0
    return count_pairs(predicate, rows, cols) / float(total)


def interior_frames(spec: MaskSpec) -> np.ndarray:
    """Frames whose spatial window is centred on them"""

    return np.arange(spec.window_back, spec.layout.num_frames - spec.window_forward)


def interior_offsets(spec: MaskSpec) -> np.ndarray:
    w = spec.temporal_half_width
    return np.arange(w, spec.layout.tokens_per_frame - w)


def interior_rows(spec: MaskSpec, kind: MaskKind) -> np.ndarray:
    """Video queries whose window is centred or whose slash is not clipped"""

    layout = spec.layout
    tokens = video_tokens(layout)
    if kind is MaskKind.SPATIAL:
        frames = interior_frames(spec)
        keep = np.isin(_frame(layout, tokens), frames)
    else:
        offsets = interior_offsets(spec)
        keep = np.isin(_offset(layout, tokens), offsets)
    return tokens[keep]


class TokenClasses(NamedTuple):
    reps: np.ndarray
    weights: np.ndarray


def _classes(reps: List[int], weights: List[int]) -> TokenClasses:
    return TokenClasses(np.asarray(reps, dtype=np.int64), np.asarray(weights, dtype=np.int64))


def _query_classes(spec: MaskSpec, kind: MaskKind, video_only: bool, interior: bool) -> TokenClasses:
    T, N, L = spec.layout
    reps: List[int] = []
    weights: List[int] = []
    if T > 0 and not video_only and not interior:
        reps.append(0)
        weights.append(T)
    if kind is MaskKind.SPATIAL:
        # the spatial predicate sees only the frame of a video query
        frames = interior_frames(spec) if interior else range(N)
        for f in frames:
            reps.append(T + int(f) * L)
            weights.append(L)
    else:
        # the temporal predicate sees only the offset of a video query
        offsets = interior_offsets(spec) if interior else range(L)
        for p in offsets:
            reps.append(T + int(p))
            weights.append(N)
    return _classes(reps, weights)


def _key_classes(spec: MaskSpec, kind: MaskKind, video_only: bool) -> TokenClasses:
    T, N, L = spec.layout
    reps: List[int] = []
    weights: List[int] = []
    if T > 0 and not video_only:
        reps.append(0)
        weights.append(T)
    if kind is MaskKind.SPATIAL:
        for f in range(N):
            reps.append(T + f * L)
            weights.append(L)
    else:
        # first-frame keys differ from the rest only through the sink
        for p in range(L):
            reps.append(T + p)
            weights.append(1)
            if N > 1:
                reps.append(T + L + p)
                weights.append(N - 1)
    return _classes(reps, weights)


def class_density(spec: MaskSpec, kind: MaskKind, video_only: bool = False,
                  interior: bool = False) -> float:
    """Exact element density of the spatial or temporal predicate.

    Tokens the predicate cannot tell apart are grouped into classes and
    each class is evaluated once through a representative, weighted by its
    size. The result equals `element_density` over the same region but
    costs O(N^2) or O(L^2) instead of O(S^2).
    """

    predicate = mask_for(spec, kind)
    rows = _query_classes(spec, kind, video_only, interior)
    cols = _key_classes(spec, kind, video_only)
    total = int(rows.weights.sum()) * int(cols.weights.sum())
    if total == 0:
        return 0.0

    count = 0
    for start in range(0, len(rows.reps), PREDICATE_CHUNK_ROWS):
        chunk = slice(start, start + PREDICATE_CHUNK_ROWS)
        active = predicate_matrix(predicate, rows.reps[chunk], cols.reps).astype(np.int64)
        count += int(rows.weights[chunk] @ active @ cols.weights)
    logger.debug("%s class density: %d / %d", kind.value, count, total)
    return count / float(total)


def frame_major_pass_predicate(spec: MaskSpec, perm: Permutation) -> Predicate:
    """Temporal pairs without sink keys, in frame-major coordinates"""

    def no_sinks(q: np.ndarray, k: np.ndarray) -> np.ndarray:
        return temporal_predicate(spec, q, k) & ~sink_columns(spec, k)

    return conjugate_predicate(no_sinks, perm)


def frame_major_reference_predicate(spec: MaskSpec, perm: Permutation, block_size: int) -> Predicate:
    """Token-major predicate the frame-major temporal path is exact against.

    The band pass computes whole tiles of the conjugated pass predicate, the
    sink pass computes the sink columns, so a pair is attended iff its key is
    a sink or it falls into an active band tile.
    """

    band = build_block_mask(frame_major_pass_predicate(spec, perm), spec.layout, block_size)
    tiles = band.expanded()
    forward = perm.forward

    def predicate(q: np.ndarray, k: np.ndarray) -> np.ndarray:
        q, k = _check_indices(spec.layout, q, k)
        return sink_columns(spec, k) | tiles(forward[q], forward[k])

    return predicate


def banded_violations(mask: BlockMask, spec: MaskSpec, perm: Permutation) -> List[Tuple[int, int]]:
    """Active tiles of a frame-major temporal mask outside band and sinks.

    A tile is allowed when it holds a text query row, a sink column, or a
    pair within `band_half_width` of the diagonal.
    """

    B, S = mask.block_size, mask.seq_len
    T = spec.layout.text_len
    reach = band_half_width(spec)
    sink_blocks = np.zeros(mask.num_blocks, dtype=bool)
    sink_blocks[np.unique(perm.forward[sink_indices(spec)] // B)] = True

    violations = []
    for bq, bk in zip(*np.nonzero(mask.grid)):
        r0, r1 = bq * B, min(S, (bq + 1) * B) - 1
        c0, c1 = bk * B, min(S, (bk + 1) * B) - 1
        if r0 < T or sink_blocks[bk]:
            continue
        gap = max(0, c0 - r1, r0 - c1)
        if gap > reach:
            violations.append((int(bq), int(bk)))
    return violations
