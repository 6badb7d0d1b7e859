# Copyright 2016-2020 Christoph Reiter
# SPDX-License-Identifier: MIT

import os

# Text tokens sit in front of the video tokens. Only "prefix" is implemented.
TEXT_PLACEMENT = "prefix"

DEFAULT_BLOCK_SIZE = 64
MIN_BLOCK_SIZE_HINT = 16

PSNR_CAP_DB = 100.0

QK_NORM_EPSILON = 1e-6
ROPE_THETA_BASE = 10000.0

SAMPLE_FRACTION = 0.01
MIN_SAMPLES = 32
WARMUP_FRACTION = 0.25

# Rows per chunk when a predicate is evaluated against all keys
PREDICATE_CHUNK_ROWS = 256

# Accumulator elements per row band of the fixed-order matrix product
MATMUL_TILE_ELEMENTS = 1 << 16

# Tile edge of the dense attention every sparse output is compared against
ORACLE_BLOCK_SIZE = 512

PRECISIONS = ("float32", "float64")
HEAD_POLICIES = ("adaptive", "spatial", "temporal", "oracle")

OUTPUT_DIR_ENV = "SVGSIM_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "out"


def get_output_dir() -> str:
    return os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR)


# name -> (text_len, num_frames, tokens_per_frame, c_s, c_t, head_dim, num_heads)
#
# The full presets carry the published model geometries. The mini presets
# keep N and c_s and pick c_t so that the slash covers ~30% of the offsets.
PRESETS = {
    "cogvideo": (226, 11, 4080, 4, 1224, 64, 48),
    "hunyuan": (256, 33, 3600, 10, 1200, 128, 24),
    "cogvideo-mini": (32, 11, 128, 4, 418, 64, 8),
    "hunyuan-mini": (32, 33, 112, 10, 1200, 64, 8),
}

REPORT_SCHEMA_FILE = os.path.join(
    os.path.dirname(os.path.realpath(__file__)), "schema", "report.schema.json")
TEMPLATE_DIR = os.path.join(
    os.path.dirname(os.path.realpath(__file__)), "templates")

# Above this many tokens cmd_bench counts densities only and runs no kernels
BENCH_COMPUTE_LIMIT = 4096
