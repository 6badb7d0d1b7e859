# Copyright 2016-2020 Christoph Reiter
# SPDX-License-Identifier: MIT

"""Dense numerics shared by every other module.

A Matrix is a plain 2-D numpy array of float32 or float64. Precision is a
run-wide choice: float64 is used for the equivalence oracles, float32 for
benchmark runs.

Random matrices come from numpy's Philox-4x64 counter-based bit generator,
with normals drawn by numpy's ziggurat sampler (`Generator.standard_normal`).
The same seed gives the same matrix on every platform.
"""

import math
from typing import NamedTuple, Sequence, Union

import numpy as np

from .appconfig import MATMUL_TILE_ELEMENTS, PRECISIONS, PSNR_CAP_DB

Matrix = np.ndarray

Seed = Union[int, Sequence[int]]


class SvgSimError(Exception):
    pass


class ShapeError(SvgSimError, ValueError):
    pass


class InvariantError(SvgSimError):
    pass


class ErrorStats(NamedTuple):
    mse: float
    psnr_db: float
    max_abs_diff: float


def get_dtype(precision: str) -> np.dtype:
    if precision not in PRECISIONS:
        raise ValueError("unknown precision %r" % precision)
    return np.dtype(precision)


def check_matrix(m: Matrix, name: str = "matrix") -> None:
    if m.ndim != 2:
        raise ShapeError("%s must be 2-D, got shape %r" % (name, m.shape))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product accumulated in a fixed k order.

    out[i, j] = ((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...

    Every element is rounded exactly like a naive triple loop, so results do
    not depend on BLAS kernels, thread counts or on which other rows and
    columns are computed alongside. Rows are processed in bands small enough
    for the accumulator and one scratch product to stay in cache.
    """

    check_matrix(a, "a")
    check_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("cannot multiply %r by %r" % (a.shape, b.shape))

    dtype = np.result_type(a, b)
    b = np.ascontiguousarray(b, dtype=dtype)
    rows, inner = a.shape
    cols = b.shape[1]
    out = np.zeros((rows, cols), dtype=dtype)
    if out.size == 0:
        return out

    band = max(1, MATMUL_TILE_ELEMENTS // cols)
    scratch = np.empty((min(band, rows), cols), dtype=dtype)
    for start in range(0, rows, band):
        acc = out[start:start + band]
        # one contiguous row per k
        a_band = np.ascontiguousarray(a[start:start + band].T, dtype=dtype)
        buf = scratch[:len(acc)]
        for k in range(inner):
            np.multiply(a_band[k][:, None], b[k], out=buf)
            acc += buf
    return out


def softmax_rows(m: Matrix) -> Matrix:
    check_matrix(m)
    if m.shape[1] < 1:
        raise ShapeError("softmax needs at least one column")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def make_rng(seed: Seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def derive_seed(*parts: int) -> int:
    """Fold several integers into one 63-bit seed"""

    state = np.random.SeedSequence(list(parts)).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def gaussian_matrix(rows: int, cols: int, seed: Seed, dtype: Union[str, np.dtype] = "float64") -> Matrix:
    if rows < 1 or cols < 1:
        raise ShapeError("gaussian_matrix needs rows, cols >= 1")
    return make_rng(seed).standard_normal((rows, cols), dtype=np.dtype(dtype))


def error_stats(reference: Matrix, test: Matrix) -> ErrorStats:
    """MSE, PSNR and max abs difference of `test` against `reference`.

    The PSNR peak is max |reference|; an all-zero reference uses peak 1.
    PSNR is capped at PSNR_CAP_DB, which is also returned when the MSE is 0
    or too small to divide by.
    """

    if reference.shape != test.shape:
        raise ShapeError("shape mismatch: %r vs %r" % (reference.shape, test.shape))

    ref = np.asarray(reference, dtype=np.float64)
    diff = np.asarray(test, dtype=np.float64) - ref
    mse = float(np.mean(diff * diff)) if diff.size else 0.0
    max_abs_diff = float(np.max(np.abs(diff))) if diff.size else 0.0

    peak = float(np.max(np.abs(ref))) if ref.size else 0.0
    if peak == 0.0:
        peak = 1.0

    if mse == 0.0:
        psnr = PSNR_CAP_DB
    else:
        ratio = peak * peak / mse
        if not math.isfinite(ratio):
            psnr = PSNR_CAP_DB
        else:
            psnr = min(PSNR_CAP_DB, 10.0 * math.log10(ratio))

    return ErrorStats(mse, psnr, max_abs_diff)


def check_finite(m: Matrix, what: str) -> None:
    if not np.all(np.isfinite(m)):
        raise InvariantError("%s contains non-finite values" % what)
