# Copyright 2016-2020 Christoph Reiter
# SPDX-License-Identifier: MIT

"""Online head classification from a few sampled query rows.

For every head the sampled rows are attended three times: without a mask,
with the spatial mask and with the temporal mask. The mask whose output is
closer to the unmasked one (mean squared difference) wins; a tie goes to
temporal.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import Executor
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .appconfig import MIN_SAMPLES, SAMPLE_FRACTION
from .attention import attention_masked_shared
from .masks import MaskSpec, all_pairs, spatial_mask, temporal_mask
from .tensor import Matrix, SvgSimError, derive_seed, make_rng

logger = logging.getLogger(__name__)

HeadInputs = Tuple[Matrix, Matrix, Matrix]


class ProfileError(SvgSimError, ValueError):
    pass


class HeadClass(Enum):
    SPATIAL = "spatial"
    TEMPORAL = "temporal"
    DENSE = "dense"


class ProfileConfig(NamedTuple):
    sample_fraction: float = SAMPLE_FRACTION
    min_samples: int = MIN_SAMPLES
    seed: int = 0
    shared_indices: bool = True

    def sample_count(self, seq_len: int) -> int:
        if not 0 < self.sample_fraction <= 1:
            raise ProfileError("sample_fraction must be in (0, 1]")
        # the epsilon keeps exact products like 0.01 * 3200 from rounding up
        wanted = math.ceil(self.sample_fraction * seq_len - 1e-9)
        return min(seq_len, max(self.min_samples, wanted))


class ProfileResult(NamedTuple):
    mse_spatial: float
    mse_temporal: float
    chosen: HeadClass
    sampled_indices: np.ndarray
    flops: int


def sample_indices(seq_len: int, t: int, seed: int) -> np.ndarray:
    """t distinct rows drawn uniformly without replacement, sorted"""

    if not 1 <= t <= seq_len:
        raise ProfileError("cannot sample %d of %d rows" % (t, seq_len))
    picked = make_rng(seed).choice(seq_len, size=t, replace=False)
    return np.sort(picked).astype(np.int64)


def step_indices(seq_len: int, cfg: ProfileConfig, step: int, head: int = 0) -> np.ndarray:
    if cfg.shared_indices:
        seed = derive_seed(cfg.seed, step)
    else:
        seed = derive_seed(cfg.seed, step, head)
    return sample_indices(seq_len, cfg.sample_count(seq_len), seed)


def _mse(a: Matrix, b: Matrix) -> float:
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(diff * diff))


def profile_head(q: Matrix, k: Matrix, v: Matrix, spec: MaskSpec, cfg: ProfileConfig,
                 indices: Optional[np.ndarray] = None, step: int = 0) -> ProfileResult:
    S, D = q.shape
    if indices is None:
        indices = step_indices(S, cfg, step)

    full, spatial, temporal = (out.o for out in attention_masked_shared(
        q, k, v, [all_pairs, spatial_mask(spec), temporal_mask(spec)], rows=indices))

    mse_s = _mse(full, spatial)
    mse_t = _mse(full, temporal)
    chosen = HeadClass.SPATIAL if mse_s < mse_t else HeadClass.TEMPORAL
    # three passes, each counted as full sampled rows
    flops = 3 * 4 * len(indices) * S * D
    return ProfileResult(mse_s, mse_t, chosen, indices, flops)


def oracle_classify(q: Matrix, k: Matrix, v: Matrix, spec: MaskSpec) -> ProfileResult:
    """Selection over every query row"""

    S = q.shape[0]
    return profile_head(q, k, v, spec, ProfileConfig(sample_fraction=1.0),
                        indices=np.arange(S, dtype=np.int64))


def profile_step(heads: Sequence[HeadInputs], spec: MaskSpec, cfg: ProfileConfig, step: int,
                 executor: Optional[Executor] = None) -> List[ProfileResult]:
    """Profile every head of one step, concurrently when an executor is given.

    Results come back in head order whatever the executor.
    """

    S = spec.layout.seq_len
    calls = [(q, k, v, spec, cfg, step_indices(S, cfg, step, h)) for h, (q, k, v) in enumerate(heads)]
    if executor is None:
        results = [profile_head(*call) for call in calls]
    else:
        results = list(executor.map(lambda call: profile_head(*call), calls))
    for h, result in enumerate(results):
        logger.debug("step %d head %d: mse_s=%.3g mse_t=%.3g -> %s",
                     step, h, result.mse_spatial, result.mse_temporal, result.chosen.value)
    return results


def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    if not 0 <= warmup_fraction <= 1:
        raise ProfileError("warmup_fraction must be in [0, 1]")
    return min(total_steps, math.ceil(warmup_fraction * total_steps - 1e-9))


def classify_heads(heads: Sequence[HeadInputs], spec: MaskSpec, cfg: ProfileConfig,
                   step: int, total_steps: int, warmup_fraction: float,
                   executor: Optional[Executor] = None) -> List[HeadClass]:
    if not 0 <= step < total_steps:
        raise ProfileError("step %d outside [0, %d)" % (step, total_steps))
    if step < warmup_steps(total_steps, warmup_fraction):
        return [HeadClass.DENSE] * len(heads)
    return [r.chosen for r in profile_step(heads, spec, cfg, step, executor)]
