# Copyright 2016-2020 Christoph Reiter
# SPDX-License-Identifier: MIT

"""Run configuration.

Values come from the [run] section of an INI file, command line flags
override them, and a preset fills the layout and mask fields left unset.
"""

from __future__ import annotations

import configparser
from typing import Any, Dict, List, Literal, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .appconfig import (DEFAULT_BLOCK_SIZE, MIN_SAMPLES, PRESETS,
                        SAMPLE_FRACTION, WARMUP_FRACTION, get_output_dir)
from .layout import LayoutSpec
from .masks import MaskSpec
from .pipeline import PlantedHead, WorkloadSpec, alternating_heads
from .profiler import HeadClass, ProfileConfig
from .tensor import SvgSimError

CONFIG_SECTION = "run"

PRESET_FIELDS = ("text_len", "num_frames", "tokens_per_frame", "c_s", "c_t", "head_dim", "num_heads")


class ConfigError(SvgSimError):
    pass


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    preset: Optional[str] = None
    text_len: Optional[int] = Field(default=None, ge=0)
    num_frames: Optional[int] = Field(default=None, ge=1)
    tokens_per_frame: Optional[int] = Field(default=None, ge=1)
    c_s: Optional[int] = Field(default=None, ge=1)
    c_t: Optional[int] = Field(default=None, ge=1)
    head_dim: Optional[int] = Field(default=None, ge=1)
    num_heads: Optional[int] = Field(default=None, ge=1)

    include_text: bool = True
    include_first_frame: bool = True
    steps: int = Field(default=40, ge=1)
    block_size: int = Field(default=DEFAULT_BLOCK_SIZE, ge=1)
    sample_fraction: float = Field(default=SAMPLE_FRACTION, gt=0, le=1)
    min_samples: int = Field(default=MIN_SAMPLES, ge=1)
    warmup_fraction: float = Field(default=WARMUP_FRACTION, ge=0, le=1)
    head_policy: Literal["adaptive", "spatial", "temporal", "oracle"] = "adaptive"
    oracle_check: bool = False
    fp8: bool = False
    precision: Literal["float32", "float64"] = "float64"
    seed: int = 0
    threads: int = Field(default=1, ge=1)

    # comma separated s/t per head, or "alternate"
    planted: str = "alternate"
    # comma separated head:step pairs
    flips: str = ""
    alpha: float = Field(default=8.0, ge=0)
    qk_norm: bool = False
    rope: bool = False

    output: Optional[str] = None
    dump: Optional[str] = None

    @model_validator(mode="before")
    @classmethod
    def _apply_preset(cls, data: Any) -> Any:
        if not isinstance(data, Mapping) or not data.get("preset"):
            return data
        name = data["preset"]
        if name not in PRESETS:
            raise ValueError("unknown preset %r, known: %s" % (name, ", ".join(sorted(PRESETS))))
        filled = dict(data)
        for key, value in zip(PRESET_FIELDS, PRESETS[name]):
            if filled.get(key) is None:
                filled[key] = value
        return filled

    @model_validator(mode="after")
    def _check_consistency(self) -> RunConfig:
        problems: List[str] = []
        missing = [f for f in PRESET_FIELDS if getattr(self, f) is None]
        if missing:
            problems.append("missing %s (set them or pick a preset)" % ", ".join(missing))
        else:
            N, L = self.num_frames, self.tokens_per_frame
            assert N is not None and L is not None
            if self.c_s is not None and self.c_s > N:
                problems.append("c_s=%d exceeds num_frames=%d" % (self.c_s, N))
            if self.c_t is not None and self.c_t > N * L:
                problems.append("c_t=%d exceeds the %d video tokens" % (self.c_t, N * L))
            if self.rope and self.head_dim is not None and self.head_dim % 2:
                problems.append("rope needs an even head_dim")
            try:
                self.planted_heads()
            except ValueError as e:
                problems.append(str(e))
        if self.block_size & (self.block_size - 1):
            problems.append("block_size must be a power of two, got %d" % self.block_size)
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def layout(self) -> LayoutSpec:
        assert self.text_len is not None and self.num_frames is not None
        assert self.tokens_per_frame is not None
        return LayoutSpec.create(self.text_len, self.num_frames, self.tokens_per_frame)

    def mask_spec(self) -> MaskSpec:
        assert self.c_s is not None and self.c_t is not None
        return MaskSpec.create(self.layout(), self.c_s, self.c_t,
                               include_first_frame=self.include_first_frame,
                               include_text=self.include_text)

    def profile_config(self) -> ProfileConfig:
        return ProfileConfig(self.sample_fraction, self.min_samples, self.seed)

    def planted_heads(self) -> List[PlantedHead]:
        assert self.num_heads is not None
        if self.planted == "alternate":
            heads = alternating_heads(self.num_heads)
        else:
            kinds = {"s": HeadClass.SPATIAL, "t": HeadClass.TEMPORAL,
                     "spatial": HeadClass.SPATIAL, "temporal": HeadClass.TEMPORAL}
            names = [n.strip().lower() for n in self.planted.split(",") if n.strip()]
            if len(names) == 1:
                names *= self.num_heads
            if len(names) != self.num_heads:
                raise ValueError("planted lists %d heads, num_heads is %d" % (len(names), self.num_heads))
            unknown = [n for n in names if n not in kinds]
            if unknown:
                raise ValueError("unknown planted type %r" % unknown[0])
            heads = [PlantedHead(kinds[n]) for n in names]

        for item in (i.strip() for i in self.flips.split(",") if i.strip()):
            head, sep, step = item.partition(":")
            if not sep or not head.isdigit() or not step.isdigit():
                raise ValueError("flips entry %r is not head:step" % item)
            h = int(head)
            if h >= len(heads):
                raise ValueError("flips names head %d of %d" % (h, len(heads)))
            heads[h] = heads[h]._replace(flip_step=int(step))
        return heads

    def workload_spec(self) -> WorkloadSpec:
        assert self.head_dim is not None
        return WorkloadSpec.create(
            self.layout(), self.head_dim, self.planted_heads(), self.steps,
            mask_spec=self.mask_spec(), alpha=self.alpha, seed=self.seed,
            qk_norm=self.qk_norm, rope=self.rope, precision=self.precision)

    def output_dir(self) -> str:
        return self.output or get_output_dir()


def read_config_file(path: str) -> Dict[str, str]:
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as h:
            parser.read_file(h)
    except OSError as e:
        raise ConfigError("cannot read config file %s: %s" % (path, e))
    except configparser.Error as e:
        raise ConfigError("cannot parse config file %s: %s" % (path, e))
    if not parser.has_section(CONFIG_SECTION):
        raise ConfigError("config file %s has no [%s] section" % (path, CONFIG_SECTION))
    return {key.replace("-", "_"): value for key, value in parser.items(CONFIG_SECTION)}


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """File values, then every override that is not None"""

    data: Dict[str, Any] = {}
    if path is not None:
        data.update(read_config_file(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return RunConfig.model_validate(data)
