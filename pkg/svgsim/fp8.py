# Copyright 2016-2020 Christoph Reiter
# SPDX-License-Identifier: MIT

"""Software E4M3 quantization of attention inputs.

The format is the finite-only E4M3 variant: 1 sign, 4 exponent (bias 7) and
3 mantissa bits, max magnitude 448, subnormals man/8 * 2^-6, and the all-ones
exponent+mantissa pattern reserved for NaN. Tiles are scaled symmetrically
so their max |value| lands on 448.
"""

from typing import NamedTuple, Optional

import numpy as np

from .attention import AttentionOutput, attention_block_sparse
from .masks import BlockMask
from .tensor import Matrix, ShapeError, check_finite

E4M3_MAX = 448.0


def _code_values() -> np.ndarray:
    codes = np.arange(256)
    sign = np.where(codes >> 7, -1.0, 1.0)
    exponent = (codes >> 3) & 0xF
    mantissa = (codes & 0x7).astype(np.float64)
    magnitude = np.where(
        exponent == 0,
        mantissa / 8.0 * 2.0 ** -6,
        (1.0 + mantissa / 8.0) * 2.0 ** (exponent - 7.0))
    values = sign * magnitude
    values[(exponent == 0xF) & (mantissa == 7)] = np.nan
    values.setflags(write=False)
    return values


# value of every code point, NaN for 0x7F and 0xFF
E4M3_VALUES = _code_values()

# codes 0..126 are the non-negative finite values in increasing order
_MAGNITUDES = E4M3_VALUES[:127]


class QuantizedTile(NamedTuple):
    codes: np.ndarray
    scale: float
    dtype: np.dtype

    @property
    def shape(self) -> tuple:
        return self.codes.shape


def round_to_e4m3(y: np.ndarray) -> np.ndarray:
    """Codes of the nearest E4M3 values, ties to even, saturating at 448"""

    magnitude = np.minimum(np.abs(np.asarray(y, dtype=np.float64)), E4M3_MAX)
    hi = np.searchsorted(_MAGNITUDES, magnitude, side="left")
    lo = np.maximum(hi - 1, 0)
    hi = np.minimum(hi, len(_MAGNITUDES) - 1)

    below = magnitude - _MAGNITUDES[lo]
    above = _MAGNITUDES[hi] - magnitude
    pick_hi = (above < below) | ((above == below) & (hi % 2 == 0))
    code = np.where(pick_hi, hi, lo).astype(np.uint8)

    negative = (np.asarray(y) < 0) & (code != 0)
    return code | (negative.astype(np.uint8) << 7)


def quantize_e4m3(tile: Matrix) -> QuantizedTile:
    check_finite(tile, "fp8 input tile")
    peak = float(np.max(np.abs(tile))) if tile.size else 0.0
    scale = peak / E4M3_MAX if peak > 0 else 1.0
    codes = round_to_e4m3(np.asarray(tile, dtype=np.float64) / scale)
    return QuantizedTile(codes, scale, tile.dtype)


def dequantize(qt: QuantizedTile) -> Matrix:
    return (E4M3_VALUES[qt.codes] * qt.scale).astype(qt.dtype)


def fake_quantize(tile: Matrix) -> Matrix:
    if tile.ndim != 2:
        raise ShapeError("fp8 tiles are 2-D")
    return dequantize(quantize_e4m3(tile))


def attention_block_sparse_fp8(q: Matrix, k: Matrix, v: Matrix, mask: BlockMask,
                               scale: Optional[float] = None,
                               quantize: bool = True) -> AttentionOutput:
    """Block-sparse attention with every Q and K tile passed through E4M3.

    V and the accumulation stay at full precision. With `quantize` off this is
    exactly `attention_block_sparse`.
    """

    return attention_block_sparse(q, k, v, mask, scale,
                                  transform=fake_quantize if quantize else None)
