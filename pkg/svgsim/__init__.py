# Copyright 2016-2020 Christoph Reiter
# SPDX-License-Identifier: MIT

from .tensor import SvgSimError, ShapeError, InvariantError
from .layout import LayoutError, LayoutSpec, frame_major_permutation
from .masks import MaskError, MaskSpec
from .profiler import HeadClass, ProfileConfig
from .pipeline import WorkloadSpec, run_pipeline

__all__ = [
    "SvgSimError", "ShapeError", "InvariantError", "LayoutError", "MaskError",
    "LayoutSpec", "MaskSpec", "frame_major_permutation", "HeadClass",
    "ProfileConfig", "WorkloadSpec", "run_pipeline",
]
