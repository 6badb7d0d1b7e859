# Copyright 2016-2020 Christoph Reiter
# SPDX-License-Identifier: MIT

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from typing import Any, Callable, List, Optional

import jinja2
from pydantic import ValidationError

from .appconfig import BENCH_COMPUTE_LIMIT, MIN_BLOCK_SIZE_HINT, TEMPLATE_DIR
from .attention import (Dense, Spatial, Temporal, attention_block_sparse, attention_dense,
                        attention_temporal_frame_major, flops_closed_form)
from .layout import frame_major_permutation
from .masks import (MaskKind, banded_violations, build_block_mask, class_density, conjugate_predicate,
                    density, frame_major_pass_predicate, sink_indices, spatial_mask, temporal_mask)
from .pipeline import classify_workload, compare_classifications, run_pipeline
from .report import (BenchReport, BenchRow, dump_classifications, load_classifications,
                     report_schema)
from .runconfig import ConfigError, RunConfig, load_config
from .tensor import InvariantError, derive_seed, gaussian_matrix
from .utils import pgm_bytes, write_bytes, write_text

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3

env = jinja2.Environment(
    loader=jinja2.FileSystemLoader(TEMPLATE_DIR),
    undefined=jinja2.StrictUndefined,
    keep_trailing_newline=True)


def template_filter(name: str) -> Callable:
    def wrap(f: Callable) -> Callable:
        env.filters[name] = f
        return f
    return wrap


@template_filter("pct")
def filter_pct(d: Optional[float]) -> str:
    if d is None:
        return "-"
    return "%.2f%%" % (d * 100)


@template_filter("flops")
def filter_flops(d: Optional[int]) -> str:
    if d is None:
        return "-"
    for suffix in ("", "K", "M", "G", "T"):
        if abs(d) < 1000:
            return "%.4g%s" % (d, suffix)
        d = d / 1000
    return "%.4gP" % d


@template_filter("seconds")
def filter_seconds(d: Optional[float]) -> str:
    if d is None:
        return "-"
    return "%.3fs" % d


def render(name: str, **context: Any) -> str:
    return env.get_template(name).render(**context)


# extra spellings for some RunConfig flags
FLAG_ALIASES = {
    "warmup_fraction": ["--warmup"],
}


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    """One flag per RunConfig field; values are validated by RunConfig"""

    parser.add_argument("--config", help="INI file with a [run] section")
    for name, field in RunConfig.model_fields.items():
        flags = ["--" + name.replace("_", "-")] + FLAG_ALIASES.get(name, [])
        if field.annotation is bool:
            parser.add_argument(*flags, dest=name, action=argparse.BooleanOptionalAction,
                                default=None)
        else:
            parser.add_argument(*flags, dest=name, default=None, metavar=name.upper())


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {name: getattr(args, name) for name in RunConfig.model_fields}
    cfg = load_config(args.config, overrides)
    if cfg.block_size < MIN_BLOCK_SIZE_HINT:
        logger.warning("block size %d is below %d, tiles will be poorly filled",
                       cfg.block_size, MIN_BLOCK_SIZE_HINT)
    return cfg


def cmd_run(cfg: RunConfig) -> int:
    report = run_pipeline(
        cfg.workload_spec(), cfg.mask_spec(), cfg.profile_config(),
        warmup_fraction=cfg.warmup_fraction, block_size=cfg.block_size, fp8=cfg.fp8,
        head_policy=cfg.head_policy, oracle_check=cfg.oracle_check, threads=cfg.threads)
    path = os.path.join(cfg.output_dir(), "report.json")
    write_text(path, report.to_json())
    logger.info("wrote %s", path)
    print(render("summary.txt", cfg=cfg, report=report, seq_len=cfg.layout().seq_len, path=path),
          end="")
    return EXIT_OK


def cmd_masks(cfg: RunConfig) -> int:
    spec = cfg.mask_spec()
    layout, B = spec.layout, cfg.block_size
    perm = frame_major_permutation(layout)

    masks = {
        "spatial": build_block_mask(spatial_mask(spec), layout, B),
        "temporal": build_block_mask(temporal_mask(spec), layout, B),
        "temporal_frame_major": build_block_mask(
            conjugate_predicate(temporal_mask(spec), perm), layout, B),
    }
    violations = banded_violations(masks["temporal_frame_major"], spec, perm)
    if violations:
        raise InvariantError("frame-major temporal mask is not banded, first stray block %r"
                             % (violations[0],))

    for name, mask in masks.items():
        path = os.path.join(cfg.output_dir(), name + ".pgm")
        write_bytes(path, pgm_bytes(mask.grid))
        logger.info("wrote %s", path)
        print("%-22s %d/%d blocks active (%.2f%%)" % (
            name, mask.active_block_count, mask.num_blocks ** 2, density(mask) * 100))
    return EXIT_OK


def bench_report(cfg: RunConfig) -> BenchReport:
    """Densities and FLOPs of every pattern; kernels run only on small layouts"""

    spec = cfg.mask_spec()
    layout, B = spec.layout, cfg.block_size
    assert cfg.head_dim is not None
    D, S = cfg.head_dim, layout.seq_len
    sink_free = spec.without_sinks()
    small = S <= BENCH_COMPUTE_LIMIT

    if small:
        q, k, v = (gaussian_matrix(S, D, derive_seed(cfg.seed, i), cfg.precision) for i in range(3))
        perm = frame_major_permutation(layout)

    def timed(func: Callable, *args: Any, **kwargs: Any) -> tuple:
        start = time.perf_counter()
        out = func(*args, **kwargs)
        return out.flops_counted, time.perf_counter() - start

    rows: List[BenchRow] = []

    counted: Optional[int] = None
    seconds: Optional[float] = None
    if small:
        counted, seconds = timed(attention_dense, q, k, v, block_size=B)
    rows.append(BenchRow(pattern="dense", element_density=1.0, video_density=1.0,
                         block_density=1.0, counted_flops=counted,
                         closed_form_flops=flops_closed_form(layout, D, Dense()), seconds=seconds))

    spatial_row = BenchRow(
        pattern="spatial",
        element_density=class_density(spec, MaskKind.SPATIAL),
        video_density=class_density(sink_free, MaskKind.SPATIAL, video_only=True),
        closed_form_flops=flops_closed_form(layout, D, Spatial(spec.c_s)))
    if small:
        mask = build_block_mask(spatial_mask(spec), layout, B)
        counted, seconds = timed(attention_block_sparse, q, k, v, mask)
        spatial_row = spatial_row.model_copy(update=dict(
            block_density=density(mask), counted_flops=counted, seconds=seconds))
    rows.append(spatial_row)

    temporal = dict(
        element_density=class_density(spec, MaskKind.TEMPORAL),
        video_density=class_density(sink_free, MaskKind.TEMPORAL, video_only=True),
        closed_form_flops=flops_closed_form(layout, D, Temporal(spec.temporal_offsets)))
    token_major = BenchRow(pattern="temporal token-major", **temporal)
    frame_major = BenchRow(pattern="temporal frame-major", **temporal)
    if small:
        mask = build_block_mask(temporal_mask(spec), layout, B)
        counted, seconds = timed(attention_block_sparse, q, k, v, mask)
        token_major = token_major.model_copy(update=dict(
            block_density=density(mask), counted_flops=counted, seconds=seconds))

        band = build_block_mask(frame_major_pass_predicate(spec, perm), layout, B)
        counted, seconds = timed(attention_temporal_frame_major, q, k, v, spec, perm, B)
        frame_major = frame_major.model_copy(update=dict(
            block_density=density(band), counted_flops=counted, seconds=seconds))
        logger.debug("frame-major sink pass covers %d keys", len(sink_indices(spec)))
    rows += [token_major, frame_major]

    return BenchReport(seq_len=S, block_size=B, head_dim=D, dense_flops=4 * S * S * D, rows=rows)


def cmd_bench(cfg: RunConfig) -> int:
    bench = bench_report(cfg)
    path = os.path.join(cfg.output_dir(), "bench.json")
    write_text(path, bench.to_json())
    logger.info("wrote %s", path)
    print(render("bench.txt", bench=bench), end="")
    return EXIT_OK


def cmd_classify(cfg: RunConfig, dump_path: Optional[str] = None) -> int:
    records = classify_workload(cfg.workload_spec(), cfg.mask_spec(), cfg.profile_config(),
                                warmup_fraction=cfg.warmup_fraction, threads=cfg.threads)
    path = dump_path or cfg.dump or os.path.join(cfg.output_dir(), "classification.json")
    write_text(path, dump_classifications(records))
    logger.info("wrote %s", path)
    return EXIT_OK


def cmd_compare(path_a: str, path_b: str) -> int:
    runs = []
    for path in (path_a, path_b):
        with open(path, "rb") as h:
            runs.append(load_classifications(h.read()))
    agreement = compare_classifications(*runs)
    pairs = sum(1 for r in runs[0] if r.profiled)
    print(render("compare.txt", pairs=pairs, agreement=agreement), end="")
    return EXIT_OK


def cmd_schema(path: Optional[str] = None) -> int:
    schema = report_schema()
    if path is None:
        print(schema, end="")
    else:
        write_text(path, schema)
        logger.info("wrote %s", path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svgsim", description="Sparse video attention simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug details")
    subparsers = parser.add_subparsers(dest="command", required=True)

    for name, description in [("run", "run the pipeline and write report.json"),
                       ("masks", "write PGM images of the block masks"),
                       ("bench", "count FLOPs and densities of every pattern"),
                       ("classify", "write the per-step per-head classification dump")]:
        sub = subparsers.add_parser(name, help=description)
        add_config_arguments(sub)

    compare = subparsers.add_parser("compare", help="classification agreement of two runs")
    compare.add_argument("first")
    compare.add_argument("second")

    schema = subparsers.add_parser("schema", help="print the report JSON schema")
    schema.add_argument("path", nargs="?")
    return parser


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "compare":
        return cmd_compare(args.first, args.second)
    elif args.command == "schema":
        return cmd_schema(args.path)

    cfg = config_from_args(args)
    if args.command == "run":
        return cmd_run(cfg)
    elif args.command == "masks":
        return cmd_masks(cfg)
    elif args.command == "bench":
        return cmd_bench(cfg)
    return cmd_classify(cfg)


def main(argv: List[str]) -> int:
    args = build_parser().parse_args(argv[1:])
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s:%(name)s:%(message)s")

    try:
        return dispatch(args)
    except ValidationError as e:
        print("invalid configuration:\n%s" % e, file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, OSError) as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_CONFIG
    except InvariantError as e:
        print("invariant violated: %s" % e, file=sys.stderr)
        return EXIT_INVARIANT


def run() -> None:
    sys.exit(main(sys.argv))
