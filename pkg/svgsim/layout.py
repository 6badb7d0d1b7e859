# Copyright 2016-2020 Christoph Reiter
# SPDX-License-Identifier: MIT

"""Token geometry of a video DiT sequence.

A sequence is `text_len` text tokens followed by `num_frames` frames of
`tokens_per_frame` tokens each (token-major order). The frame-major order
keeps the text prefix in place and lists, for every in-frame offset, that
offset's token in each frame.
"""

from __future__ import annotations

from typing import NamedTuple, Union

import numpy as np

from .appconfig import TEXT_PLACEMENT
from .tensor import Matrix, ShapeError, SvgSimError, check_matrix


class LayoutError(SvgSimError, ValueError):
    pass


class LayoutSpec(NamedTuple):
    text_len: int
    num_frames: int
    tokens_per_frame: int

    @classmethod
    def create(cls, text_len: int, num_frames: int, tokens_per_frame: int) -> LayoutSpec:
        if TEXT_PLACEMENT != "prefix":
            raise LayoutError("unsupported text placement %r" % TEXT_PLACEMENT)
        problems = []
        if text_len < 0:
            problems.append("text_len must be >= 0")
        if num_frames < 1:
            problems.append("num_frames must be >= 1")
        if tokens_per_frame < 1:
            problems.append("tokens_per_frame must be >= 1")
        if problems:
            raise LayoutError("; ".join(problems))
        return cls(text_len, num_frames, tokens_per_frame)

    @property
    def video_len(self) -> int:
        return self.num_frames * self.tokens_per_frame

    @property
    def seq_len(self) -> int:
        return self.text_len + self.video_len

    def frame_ids(self) -> np.ndarray:
        """Frame of every token, -1 for text"""

        ids = np.full(self.seq_len, -1, dtype=np.int64)
        ids[self.text_len:] = np.arange(self.video_len) // self.tokens_per_frame
        return ids

    def offset_ids(self) -> np.ndarray:
        """In-frame offset of every token, -1 for text"""

        ids = np.full(self.seq_len, -1, dtype=np.int64)
        ids[self.text_len:] = np.arange(self.video_len) % self.tokens_per_frame
        return ids


class TextToken(NamedTuple):
    index: int


class VideoToken(NamedTuple):
    frame: int
    offset: int


TokenCoord = Union[TextToken, VideoToken]


def coord_of(i: int, spec: LayoutSpec) -> TokenCoord:
    if not 0 <= i < spec.seq_len:
        raise LayoutError("token index %d out of range [0, %d)" % (i, spec.seq_len))
    if i < spec.text_len:
        return TextToken(i)
    f, p = divmod(i - spec.text_len, spec.tokens_per_frame)
    return VideoToken(f, p)


def index_of(c: TokenCoord, spec: LayoutSpec) -> int:
    if isinstance(c, TextToken):
        if not 0 <= c.index < spec.text_len:
            raise LayoutError("text index %d out of range [0, %d)" % (c.index, spec.text_len))
        return c.index
    if not 0 <= c.frame < spec.num_frames:
        raise LayoutError("frame %d out of range [0, %d)" % (c.frame, spec.num_frames))
    if not 0 <= c.offset < spec.tokens_per_frame:
        raise LayoutError("offset %d out of range [0, %d)" % (c.offset, spec.tokens_per_frame))
    return spec.text_len + c.frame * spec.tokens_per_frame + c.offset


class Permutation(NamedTuple):
    forward: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_forward(cls, forward: np.ndarray) -> Permutation:
        forward = np.array(forward, dtype=np.int64)
        if forward.ndim != 1:
            raise LayoutError("permutation must be 1-D")
        n = len(forward)
        inverse = np.full(n, -1, dtype=np.int64)
        if n and (forward.min() < 0 or forward.max() >= n):
            raise LayoutError("permutation entries out of range")
        inverse[forward] = np.arange(n, dtype=np.int64)
        if np.any(inverse < 0):
            raise LayoutError("not a bijection")
        forward.setflags(write=False)
        inverse.setflags(write=False)
        return cls(forward, inverse)

    @classmethod
    def identity(cls, n: int) -> Permutation:
        return cls.from_forward(np.arange(n, dtype=np.int64))

    def inverted(self) -> Permutation:
        return Permutation(self.inverse, self.forward)

    @property
    def size(self) -> int:
        return len(self.forward)


def frame_major_permutation(spec: LayoutSpec) -> Permutation:
    """Video token (f, p) moves to T + p*N + f, text stays in place"""

    T, N, L = spec.text_len, spec.num_frames, spec.tokens_per_frame
    forward = np.arange(spec.seq_len, dtype=np.int64)
    video = np.arange(spec.video_len, dtype=np.int64)
    forward[T:] = T + (video % L) * N + video // L
    return Permutation.from_forward(forward)


def apply_row_permutation(m: Matrix, perm: Permutation) -> Matrix:
    """Row i of `m` becomes row perm.forward[i] of the result"""

    check_matrix(m)
    if m.shape[0] != perm.size:
        raise ShapeError("matrix has %d rows, permutation covers %d" % (m.shape[0], perm.size))
    out = np.empty_like(m)
    out[perm.forward] = m
    return out
