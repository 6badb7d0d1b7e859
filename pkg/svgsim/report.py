# Copyright 2016-2020 Christoph Reiter
# SPDX-License-Identifier: MIT

import json
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter

from .profiler import HeadClass

REPORT_VERSION = 1


class ClassificationRecord(BaseModel):
    """One (step, head) entry of a classification dump"""

    model_config = ConfigDict(populate_by_name=True, frozen=True)

    step: int
    head: int
    mse_spatial: Optional[float] = None
    mse_temporal: Optional[float] = None
    head_class: HeadClass = Field(alias="class")

    @property
    def profiled(self) -> bool:
        return self.head_class is not HeadClass.DENSE


class HeadRecord(ClassificationRecord):
    planted: Optional[HeadClass] = None
    oracle: Optional[HeadClass] = None
    mse: float
    psnr_db: float
    max_abs_diff: float
    flops: int
    density: float


class StepRecord(BaseModel):
    step: int
    warmup: bool
    mse: float
    psnr_db: float
    max_abs_diff: float
    flops: int
    profiling_flops: int


class FlopsLedger(BaseModel):
    dense_total: int
    warmup_total: int
    sparse_total: int
    profiling_total: int
    reduction_ratio: float
    mean_density: float
    closed_form_ratio: float


class Agreement(BaseModel):
    planted: Optional[float] = None
    planted_pairs: int = 0
    oracle: Optional[float] = None
    oracle_pairs: int = 0


class ReportConfig(BaseModel):
    text_len: int
    num_frames: int
    tokens_per_frame: int
    head_dim: int
    num_heads: int
    steps: int
    c_s: int
    c_t: int
    include_text: bool
    include_first_frame: bool
    block_size: int
    sample_fraction: float
    min_samples: int
    warmup_fraction: float
    head_policy: str
    fp8: bool
    precision: str
    alpha: float
    seed: int


class PipelineReport(BaseModel):
    version: int = REPORT_VERSION
    config: ReportConfig
    steps: List[StepRecord]
    heads: List[HeadRecord]
    flops: FlopsLedger
    agreement: Agreement
    histogram: Dict[str, int]
    mean_psnr_db: float

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, indent=2) + "\n"


class BenchRow(BaseModel):
    pattern: str
    element_density: float
    video_density: float
    block_density: Optional[float] = None
    counted_flops: Optional[int] = None
    closed_form_flops: int
    seconds: Optional[float] = None


class BenchReport(BaseModel):
    seq_len: int
    block_size: int
    head_dim: int
    dense_flops: int
    rows: List[BenchRow]

    def to_json(self) -> str:
        return self.model_dump_json(indent=2) + "\n"


_dump_adapter = TypeAdapter(List[ClassificationRecord])


def dump_classifications(records: List[ClassificationRecord]) -> str:
    plain = [ClassificationRecord.model_validate(r.model_dump(include=set(ClassificationRecord.model_fields)))
             for r in records]
    return _dump_adapter.dump_json(plain, by_alias=True, indent=2).decode("utf-8") + "\n"


def load_classifications(data: bytes) -> List[ClassificationRecord]:
    """Records of either a classification dump or a full pipeline report"""

    if data.lstrip().startswith(b"["):
        return _dump_adapter.validate_json(data)
    return list(PipelineReport.model_validate_json(data).heads)


def report_schema() -> str:
    return json.dumps(PipelineReport.model_json_schema(by_alias=True), indent=2, sort_keys=True) + "\n"
