# type: ignore

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from svgsim.attention import attention_block_sparse
from svgsim.fp8 import (E4M3_MAX, E4M3_VALUES, attention_block_sparse_fp8, dequantize,
                        fake_quantize, quantize_e4m3, round_to_e4m3)
from svgsim.layout import LayoutSpec
from svgsim.masks import MaskSpec, build_block_mask, spatial_mask, temporal_mask
from svgsim.tensor import InvariantError, ShapeError, gaussian_matrix

FINITE = E4M3_VALUES[np.isfinite(E4M3_VALUES)]


def test_code_table():
    assert len(E4M3_VALUES) == 256
    assert E4M3_VALUES[0x7E] == 448.0
    assert E4M3_VALUES[0xFE] == -448.0
    assert E4M3_VALUES[0x01] == 2.0 ** -9
    assert E4M3_VALUES[0x08] == 2.0 ** -6
    assert E4M3_VALUES[0x38] == 1.0
    assert np.isnan(E4M3_VALUES[0x7F]) and np.isnan(E4M3_VALUES[0xFF])
    assert np.all(np.diff(E4M3_VALUES[:127]) > 0)
    assert E4M3_MAX == FINITE.max()


def test_round_zero_and_negative_zero():
    assert round_to_e4m3(np.array([0.0, -0.0])).tolist() == [0, 0]


def test_round_ties_to_even():
    # 1.0625 is halfway between 1.0 (0x38) and 1.125 (0x39)
    assert round_to_e4m3(np.array([1.0625]))[0] == 0x38
    # 1.1875 is halfway between 1.125 (0x39) and 1.25 (0x3A)
    assert round_to_e4m3(np.array([1.1875]))[0] == 0x3A
    assert round_to_e4m3(np.array([-1.1875]))[0] == 0xBA


def test_round_saturates():
    assert round_to_e4m3(np.array([1000.0, -1e30, 460.0])).tolist() == [0x7E, 0xFE, 0x7E]


def test_round_tiny_goes_to_zero():
    assert round_to_e4m3(np.array([2.0 ** -11]))[0] == 0
    assert round_to_e4m3(np.array([-2.0 ** -11]))[0] == 0


def test_grid_points_exact():
    tile = (FINITE * 0.25).reshape(2, -1)
    assert np.array_equal(fake_quantize(tile), tile)


def test_zero_tile():
    qt = quantize_e4m3(np.zeros((3, 4)))
    assert qt.scale == 1.0
    assert not qt.codes.any()
    assert np.array_equal(dequantize(qt), np.zeros((3, 4)))


def test_quantize_rejects_non_finite():
    with pytest.raises(InvariantError):
        quantize_e4m3(np.array([[1.0, np.inf]]))


def test_fake_quantize_needs_matrix():
    with pytest.raises(ShapeError):
        fake_quantize(np.ones(4))


def test_gaussian_tile_nearest_code():
    x = gaussian_matrix(64, 64, 7)
    qt = quantize_e4m3(x)
    assert qt.scale == pytest.approx(np.max(np.abs(x)) / 448.0)
    y = x / qt.scale
    got = E4M3_VALUES[qt.codes]
    best = np.min(np.abs(y[..., None] - FINITE), axis=-1)
    assert np.array_equal(np.abs(y - got), best)

    back = dequantize(qt)
    normal = np.abs(y) >= 2.0 ** -6
    assert np.all(np.abs(back - x)[normal] <= 0.0625 * np.abs(x)[normal])
    assert np.all(np.abs(back - x)[~normal] <= 2.0 ** -10 * qt.scale)


def test_peak_maps_to_max_code():
    x = gaussian_matrix(8, 8, 8)
    qt = quantize_e4m3(x)
    peak = np.unravel_index(np.argmax(np.abs(x)), x.shape)
    assert qt.codes[peak] & 0x7F == 0x7E


@pytest.mark.parametrize("precision", ["float64", "float32"])
def test_fake_quantize_idempotent(precision):
    qt = quantize_e4m3(gaussian_matrix(16, 16, 9, precision))
    again = quantize_e4m3(dequantize(qt))
    assert np.array_equal(again.codes, qt.codes)
    assert again.scale == pytest.approx(qt.scale, rel=1e-6)
    once = fake_quantize(gaussian_matrix(16, 16, 9, precision))
    assert np.array_equal(quantize_e4m3(once).codes, quantize_e4m3(fake_quantize(once)).codes)


def test_fake_quantize_keeps_dtype():
    assert fake_quantize(gaussian_matrix(4, 4, 10, "float32")).dtype == np.float32


@settings(max_examples=200, deadline=None)
@given(st.floats(-500, 500), st.floats(-500, 500))
def test_rounding_is_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    codes = round_to_e4m3(np.array([lo, hi]))
    assert E4M3_VALUES[codes[0]] <= E4M3_VALUES[codes[1]]


def small_case(seed):
    layout = LayoutSpec.create(4, 3, 12)
    spec = MaskSpec.create(layout, 1, 6)
    q, k, v = (gaussian_matrix(layout.seq_len, 8, [seed, i]) for i in range(3))
    return spec, q, k, v


@pytest.mark.parametrize("mask_fn", [spatial_mask, temporal_mask])
def test_unquantized_path_matches_kernel(mask_fn):
    spec, q, k, v = small_case(11)
    mask = build_block_mask(mask_fn(spec), spec.layout, 8)
    plain = attention_block_sparse(q, k, v, mask)
    off = attention_block_sparse_fp8(q, k, v, mask, quantize=False)
    assert np.array_equal(off.o, plain.o)
    assert off.flops_counted == plain.flops_counted


def test_quantized_path_is_close():
    spec, q, k, v = small_case(12)
    mask = build_block_mask(spatial_mask(spec), spec.layout, 8)
    plain = attention_block_sparse(q, k, v, mask).o
    fp8 = attention_block_sparse_fp8(q, k, v, mask).o
    assert not np.array_equal(fp8, plain)
    assert np.max(np.abs(fp8 - plain)) <= 1.0


def test_quantized_constant_v():
    spec, q, k, _ = small_case(13)
    v = np.tile(np.array([0.5, -2.0, 4.0, 1.0, -0.25, 8.0, 2.0, -1.0]), (spec.layout.seq_len, 1))
    mask = build_block_mask(temporal_mask(spec), spec.layout, 8)
    assert np.array_equal(attention_block_sparse_fp8(q, k, v, mask).o, v)


def test_grid_inputs_are_unchanged():
    spec, _, _, v = small_case(14)
    S, B = spec.layout.seq_len, 8
    rng = np.random.default_rng(15)
    q = FINITE[rng.integers(0, len(FINITE), (S, 8))] / 64
    k = FINITE[rng.integers(0, len(FINITE), (S, 8))] / 64
    # every row tile carries the max magnitude so the tile scale is a power of two
    q[::B, 0] = 448.0 / 64
    k[::B, 0] = 448.0 / 64
    mask = build_block_mask(spatial_mask(spec), spec.layout, B)
    assert np.array_equal(attention_block_sparse_fp8(q, k, v, mask).o,
                          attention_block_sparse(q, k, v, mask).o)
