# Copyright 2016-2020 Christoph Reiter
# SPDX-License-Identifier: MIT

"""Multi-step runs over synthetic workloads with planted head types.

A spatial head gets one direction per frame, a temporal head one direction
per bucket of in-frame offsets, so attention mass concentrates inside the
frame or along the offset slash. Text tokens share their own direction.
"""

from __future__ import annotations

import asyncio
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .appconfig import DEFAULT_BLOCK_SIZE, HEAD_POLICIES, ORACLE_BLOCK_SIZE, WARMUP_FRACTION
from .attention import (AttentionOutput, TileTransform, attention_block_sparse, attention_dense,
                        attention_temporal_frame_major, qk_norm, rope)
from .fp8 import fake_quantize
from .layout import LayoutSpec, Permutation, frame_major_permutation
from .masks import BlockMask, MaskSpec, build_block_mask, spatial_mask
from .profiler import (HeadClass, HeadInputs, ProfileConfig, ProfileResult, oracle_classify,
                       profile_step, warmup_steps)
from .report import (Agreement, ClassificationRecord, FlopsLedger, HeadRecord, PipelineReport,
                     ReportConfig, StepRecord)
from .tensor import (InvariantError, ShapeError, check_finite, derive_seed, error_stats, get_dtype,
                     make_rng)
from .utils import ceil_div

logger = logging.getLogger(__name__)


class PlantedHead(NamedTuple):
    kind: HeadClass
    flip_step: Optional[int] = None
    alpha: Optional[float] = None

    def kind_at(self, step: int) -> HeadClass:
        if self.flip_step is None or step < self.flip_step:
            return self.kind
        if self.kind is HeadClass.SPATIAL:
            return HeadClass.TEMPORAL
        return HeadClass.SPATIAL


class WorkloadSpec(NamedTuple):
    layout: LayoutSpec
    head_dim: int
    num_heads: int
    num_steps: int
    planted: Tuple[PlantedHead, ...]
    alpha: float = 8.0
    seed: int = 0
    bucket_width: int = 1
    qk_norm: bool = False
    rope: bool = False
    precision: str = "float64"

    @classmethod
    def create(cls, layout: LayoutSpec, head_dim: int, planted: Sequence[PlantedHead],
               num_steps: int, mask_spec: Optional[MaskSpec] = None, **kwargs: Any) -> WorkloadSpec:
        """Bucket width follows the slash so a bucket fits inside one window"""

        bucket_width = 1 if mask_spec is None else mask_spec.temporal_half_width + 1
        spec = cls(layout, head_dim, len(planted), num_steps, tuple(planted),
                   bucket_width=bucket_width, **kwargs)
        spec.check()
        return spec

    def check(self) -> None:
        problems = []
        if self.num_heads < 1:
            problems.append("need at least one head")
        if len(self.planted) != self.num_heads:
            problems.append("%d planted types for %d heads" % (len(self.planted), self.num_heads))
        if self.head_dim < 1:
            problems.append("head_dim must be >= 1")
        if self.num_steps < 1:
            problems.append("need at least one step")
        if self.bucket_width < 1:
            problems.append("bucket_width must be >= 1")
        for h, p in enumerate(self.planted):
            if p.kind is HeadClass.DENSE:
                problems.append("head %d: only spatial and temporal can be planted" % h)
        if problems:
            raise ShapeError("; ".join(problems))

    def head_alpha(self, head: int) -> float:
        alpha = self.planted[head].alpha
        return self.alpha if alpha is None else alpha


def alternating_heads(num_heads: int) -> List[PlantedHead]:
    return [PlantedHead(HeadClass.SPATIAL if h % 2 == 0 else HeadClass.TEMPORAL)
            for h in range(num_heads)]


def _unit_rows(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    u = rng.standard_normal((rows, cols))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


# stream tags for derive_seed
_DIRECTIONS, _QUERY, _KEY, _VALUE = range(4)


def _head_inputs(spec: WorkloadSpec, step: int, head: int) -> HeadInputs:
    layout = spec.layout
    T, N, L = layout
    D = spec.head_dim
    alpha = spec.head_alpha(head)
    kind = spec.planted[head].kind_at(step)

    # directions stay fixed per head across steps, only the noise changes
    rng = make_rng(derive_seed(spec.seed, head, _DIRECTIONS))
    text_dir = _unit_rows(rng, 1, D)
    frame_dirs = _unit_rows(rng, N, D)
    bucket_dirs = _unit_rows(rng, ceil_div(L, spec.bucket_width), D)

    base = np.empty((layout.seq_len, D))
    base[:T] = text_dir
    if kind is HeadClass.SPATIAL:
        base[T:] = frame_dirs[layout.frame_ids()[T:]]
    else:
        base[T:] = bucket_dirs[layout.offset_ids()[T:] // spec.bucket_width]
    base *= alpha

    def noise(tag: int) -> np.ndarray:
        return make_rng(derive_seed(spec.seed, step, head, tag)).standard_normal((layout.seq_len, D))

    q = base + noise(_QUERY)
    k = base + noise(_KEY)
    v = noise(_VALUE)
    if spec.qk_norm:
        q, k = qk_norm(q), qk_norm(k)
    if spec.rope:
        positions = np.arange(layout.seq_len)
        q, k = rope(q, positions), rope(k, positions)

    dtype = get_dtype(spec.precision)
    return q.astype(dtype), k.astype(dtype), v.astype(dtype)


def generate_workload(spec: WorkloadSpec) -> Iterator[List[HeadInputs]]:
    """Per step the (q, k, v) of every head, generated lazily"""

    spec.check()
    for step in range(spec.num_steps):
        yield [_head_inputs(spec, step, h) for h in range(spec.num_heads)]


class HeadOutcome(NamedTuple):
    dense: AttentionOutput
    sparse: AttentionOutput


class _Kernels:
    """Block masks and permutation reused by every head of a run"""

    def __init__(self, mask_spec: MaskSpec, block_size: int, fp8: bool) -> None:
        self.mask_spec = mask_spec
        self.block_size = block_size
        self.transform: Optional[TileTransform] = fake_quantize if fp8 else None
        self.spatial: BlockMask = build_block_mask(spatial_mask(mask_spec), mask_spec.layout, block_size)
        self.perm: Permutation = frame_major_permutation(mask_spec.layout)

    def run(self, head_class: HeadClass, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> HeadOutcome:
        dense = attention_dense(q, k, v, block_size=ORACLE_BLOCK_SIZE)
        if head_class is HeadClass.SPATIAL:
            sparse = attention_block_sparse(q, k, v, self.spatial, transform=self.transform)
        elif head_class is HeadClass.TEMPORAL:
            sparse = attention_temporal_frame_major(q, k, v, self.mask_spec, self.perm,
                                                    self.block_size, transform=self.transform)
        else:
            sparse = dense
        check_finite(sparse.o, "%s attention output" % head_class.value)
        return HeadOutcome(dense, sparse)


async def _fan_out(executor: ThreadPoolExecutor, func: Callable[..., Any],
                   calls: Sequence[Tuple[Any, ...]]) -> List[Any]:
    loop = asyncio.get_running_loop()
    awaitables = [loop.run_in_executor(executor, func, *args) for args in calls]
    return list(await asyncio.gather(*awaitables))


class _Classification(NamedTuple):
    chosen: HeadClass
    profile: Optional[ProfileResult]
    oracle: Optional[HeadClass]


async def _classify_step(executor: ThreadPoolExecutor, heads: List[HeadInputs], mask_spec: MaskSpec,
                         cfg: ProfileConfig, step: int, warmup: bool, head_policy: str,
                         oracle_check: bool) -> List[_Classification]:
    H = len(heads)
    if warmup:
        return [_Classification(HeadClass.DENSE, None, None)] * H
    if head_policy == "spatial":
        return [_Classification(HeadClass.SPATIAL, None, None)] * H
    if head_policy == "temporal":
        return [_Classification(HeadClass.TEMPORAL, None, None)] * H

    oracles: List[Optional[ProfileResult]] = [None] * H
    if head_policy == "oracle" or oracle_check:
        oracles = await _fan_out(
            executor, oracle_classify, [(q, k, v, mask_spec) for q, k, v in heads])
    if head_policy == "oracle":
        return [_Classification(r.chosen, r, r.chosen) for r in oracles]

    # profile_step spreads the heads over `executor` itself
    profiles = await asyncio.get_running_loop().run_in_executor(
        None, profile_step, heads, mask_spec, cfg, step, executor)

    result = []
    for profile, oracle in zip(profiles, oracles):
        result.append(_Classification(
            profile.chosen, profile, None if oracle is None else oracle.chosen))
    return result


def _agreement(pairs: Sequence[Tuple[HeadClass, HeadClass]]) -> Optional[float]:
    if not pairs:
        return None
    return sum(1 for a, b in pairs if a is b) / float(len(pairs))


def run_pipeline(workload: WorkloadSpec, mask_spec: MaskSpec, profile_cfg: ProfileConfig,
                 warmup_fraction: float = WARMUP_FRACTION, block_size: int = DEFAULT_BLOCK_SIZE,
                 fp8: bool = False, head_policy: str = "adaptive", oracle_check: bool = False,
                 threads: int = 1) -> PipelineReport:
    """Run every step: warmup steps dense, then classify and dispatch each head.

    Outputs are compared against dense attention of the same head. Heads of
    one step run on a pool of `threads` workers; the report does not depend
    on the worker count.
    """

    if workload.layout != mask_spec.layout:
        raise ShapeError("workload and mask spec disagree on the layout")
    if head_policy not in HEAD_POLICIES:
        raise ValueError("unknown head policy %r" % head_policy)

    S, D = workload.layout.seq_len, workload.head_dim
    n_warmup = warmup_steps(workload.num_steps, warmup_fraction)
    kernels = _Kernels(mask_spec, block_size, fp8)
    dense_per_head = 4 * S * S * D

    return asyncio.run(_run(workload, mask_spec, profile_cfg, kernels, n_warmup,
                            head_policy, oracle_check, threads, dense_per_head,
                            warmup_fraction, fp8))


async def _run(workload: WorkloadSpec, mask_spec: MaskSpec, cfg: ProfileConfig, kernels: _Kernels,
               n_warmup: int, head_policy: str, oracle_check: bool, threads: int,
               dense_per_head: int, warmup_fraction: float, fp8: bool) -> PipelineReport:
    step_records: List[StepRecord] = []
    head_records: List[HeadRecord] = []
    dense_total = warmup_total = sparse_total = profiling_total = 0
    planted_pairs: List[Tuple[HeadClass, HeadClass]] = []
    oracle_pairs: List[Tuple[HeadClass, HeadClass]] = []
    densities: List[float] = []

    with ThreadPoolExecutor(max_workers=threads) as executor:
        for step, heads in enumerate(generate_workload(workload)):
            warmup = step < n_warmup
            classes = await _classify_step(executor, heads, mask_spec, cfg, step, warmup,
                                           head_policy, oracle_check)
            outcomes: List[HeadOutcome] = await _fan_out(
                executor, kernels.run, [(c.chosen, q, k, v) for c, (q, k, v) in zip(classes, heads)])

            step_flops = step_profiling = 0
            for h, (c, outcome) in enumerate(zip(classes, outcomes)):
                stats = error_stats(outcome.dense.o, outcome.sparse.o)
                dense_total += outcome.dense.flops_counted
                step_flops += outcome.sparse.flops_counted
                profile_flops = 0 if c.profile is None else c.profile.flops
                step_profiling += profile_flops

                planted = workload.planted[h].kind_at(step)
                if not warmup:
                    densities.append(outcome.sparse.flops_counted / float(dense_per_head))
                    if workload.head_alpha(h) > 0:
                        planted_pairs.append((c.chosen, planted))
                    if c.oracle is not None:
                        oracle_pairs.append((c.chosen, c.oracle))

                head_records.append(HeadRecord(
                    step=step, head=h, head_class=c.chosen,
                    mse_spatial=None if c.profile is None else c.profile.mse_spatial,
                    mse_temporal=None if c.profile is None else c.profile.mse_temporal,
                    planted=planted, oracle=c.oracle,
                    mse=stats.mse, psnr_db=stats.psnr_db, max_abs_diff=stats.max_abs_diff,
                    flops=outcome.sparse.flops_counted,
                    density=outcome.sparse.flops_counted / float(dense_per_head)))

            all_stats = error_stats(np.concatenate([o.dense.o for o in outcomes]),
                                    np.concatenate([o.sparse.o for o in outcomes]))
            if warmup:
                warmup_total += step_flops
            else:
                sparse_total += step_flops
            profiling_total += step_profiling
            step_records.append(StepRecord(
                step=step, warmup=warmup, mse=all_stats.mse, psnr_db=all_stats.psnr_db,
                max_abs_diff=all_stats.max_abs_diff, flops=step_flops,
                profiling_flops=step_profiling))
            logger.info("step %d/%d%s: psnr %.2f dB", step + 1, workload.num_steps,
                        " (warmup)" if warmup else "", all_stats.psnr_db)

    H, steps = workload.num_heads, workload.num_steps
    if dense_total != H * steps * dense_per_head:
        raise InvariantError("dense FLOPs ledger does not close")

    mean_density = float(np.mean(densities)) if densities else 1.0
    warm = n_warmup / float(steps)
    profiled = steps - n_warmup
    profiling_share = profiling_total / float(profiled * H * dense_per_head) if profiled else 0.0
    closed_form = 1.0 / (warm + (1.0 - warm) * (mean_density + profiling_share))

    histogram: Dict[str, int] = {c.value: 0 for c in HeadClass}
    for r in head_records:
        histogram[r.head_class.value] += 1

    layout, spec = workload.layout, mask_spec
    return PipelineReport(
        config=ReportConfig(
            text_len=layout.text_len, num_frames=layout.num_frames,
            tokens_per_frame=layout.tokens_per_frame, head_dim=workload.head_dim,
            num_heads=H, steps=steps, c_s=spec.c_s, c_t=spec.c_t,
            include_text=spec.include_text, include_first_frame=spec.include_first_frame,
            block_size=kernels.block_size, sample_fraction=cfg.sample_fraction,
            min_samples=cfg.min_samples, warmup_fraction=warmup_fraction,
            head_policy=head_policy, fp8=fp8, precision=workload.precision,
            alpha=workload.alpha, seed=workload.seed),
        steps=step_records,
        heads=head_records,
        flops=FlopsLedger(
            dense_total=dense_total, warmup_total=warmup_total, sparse_total=sparse_total,
            profiling_total=profiling_total,
            reduction_ratio=dense_total / float(warmup_total + sparse_total + profiling_total),
            mean_density=mean_density, closed_form_ratio=closed_form),
        agreement=Agreement(
            planted=_agreement(planted_pairs), planted_pairs=len(planted_pairs),
            oracle=_agreement(oracle_pairs), oracle_pairs=len(oracle_pairs)),
        histogram=histogram,
        mean_psnr_db=float(np.mean([s.psnr_db for s in step_records])))


def classify_workload(workload: WorkloadSpec, mask_spec: MaskSpec, profile_cfg: ProfileConfig,
                      warmup_fraction: float = WARMUP_FRACTION,
                      threads: int = 1) -> List[ClassificationRecord]:
    """Only the classification of every (step, head), no attention outputs"""

    n_warmup = warmup_steps(workload.num_steps, warmup_fraction)

    async def classify() -> List[ClassificationRecord]:
        records = []
        with ThreadPoolExecutor(max_workers=threads) as executor:
            for step, heads in enumerate(generate_workload(workload)):
                classes = await _classify_step(executor, heads, mask_spec, profile_cfg, step,
                                               step < n_warmup, "adaptive", False)
                for h, c in enumerate(classes):
                    records.append(ClassificationRecord(
                        step=step, head=h, head_class=c.chosen,
                        mse_spatial=None if c.profile is None else c.profile.mse_spatial,
                        mse_temporal=None if c.profile is None else c.profile.mse_temporal))
                logger.info("classified step %d/%d", step + 1, workload.num_steps)
        return records

    return asyncio.run(classify())


def compare_classifications(a: Sequence[ClassificationRecord],
                            b: Sequence[ClassificationRecord]) -> float:
    """Fraction of profiled (step, head) pairs classified alike.

    Warmup pairs do not count. Without any profiled pair the agreement is 1.
    """

    keys_a = [(r.step, r.head) for r in a]
    keys_b = [(r.step, r.head) for r in b]
    if keys_a != keys_b:
        raise ShapeError("the two runs cover different (step, head) pairs")

    pairs = [(x.head_class, y.head_class) for x, y in zip(a, b) if x.profiled and y.profiled]
    agreement = _agreement(pairs)
    return 1.0 if agreement is None else agreement


def compare_to_oracle(report_sampled: PipelineReport, report_full: PipelineReport) -> float:
    return compare_classifications(report_sampled.heads, report_full.heads)
