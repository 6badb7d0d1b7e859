# type: ignore

import json
import os

import jsonschema
import numpy as np
import pytest

from svgsim.appconfig import REPORT_SCHEMA_FILE
from svgsim.cli import bench_report, build_parser, main, render
from svgsim.report import PipelineReport
from svgsim.runconfig import ConfigError, RunConfig, load_config, read_config_file
from svgsim.utils import read_pgm

TINY = ["--text-len", "4", "--num-frames", "4", "--tokens-per-frame", "8", "--c-s", "2",
        "--c-t", "8", "--head-dim", "8", "--num-heads", "2", "--steps", "4", "--block-size", "8"]


def svgsim(*args):
    return main(["svgsim"] + [str(a) for a in args])


def load_report(path):
    with open(os.path.join(path, "report.json"), "rb") as h:
        return h.read()


def test_run_writes_report(tmp_path, capsys):
    assert svgsim("run", *TINY, "--output", tmp_path) == 0
    out = capsys.readouterr().out
    assert "mean PSNR" in out
    assert "report written to" in out
    report = PipelineReport.model_validate_json(load_report(tmp_path))
    assert report.config.num_heads == 2
    assert len(report.heads) == 8


def test_run_is_byte_identical(tmp_path):
    a, b, c = (tmp_path / n for n in "abc")
    assert svgsim("run", *TINY, "--output", a) == 0
    assert svgsim("run", *TINY, "--output", b) == 0
    assert svgsim("run", *TINY, "--threads", 3, "--output", c) == 0
    assert load_report(a) == load_report(b) == load_report(c)


def test_run_all_warmup(tmp_path):
    assert svgsim("run", *TINY, "--warmup", "1.0", "--output", tmp_path) == 0
    report = PipelineReport.model_validate_json(load_report(tmp_path))
    assert report.flops.reduction_ratio == 1.0
    assert report.mean_psnr_db == 100.0


def test_output_dir_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SVGSIM_OUTPUT_DIR", str(tmp_path))
    assert svgsim("run", *TINY, "--steps", 1) == 0
    assert os.path.exists(tmp_path / "report.json")


def test_invalid_config_exit_code(tmp_path, capsys):
    args = TINY + ["--c-s", "9", "--block-size", "3", "--output", tmp_path]
    assert svgsim("run", *args) == 2
    err = capsys.readouterr().err
    assert "c_s=9" in err
    assert "power of two" in err


def test_missing_layout(capsys):
    assert svgsim("bench", "--c-s", "1") == 2
    assert "missing" in capsys.readouterr().err


def test_unknown_ini_key(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\npreset = cogvideo-mini\nbogus = 1\n")
    assert svgsim("bench", "--config", ini) == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert svgsim("bench", "--config", tmp_path / "nope.ini") == 2


def test_ini_with_flag_override(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\ntext-len = 4\nnum_frames = 4\ntokens_per_frame = 8\nc_s = 2\n"
                   "c_t = 8\nhead_dim = 8\nnum_heads = 2\nsteps = 3\nblock_size = 8\n"
                   "fp8 = yes\n")
    assert read_config_file(str(ini))["text_len"] == "4"
    assert svgsim("run", "--config", ini, "--steps", 2, "--output", tmp_path) == 0
    report = PipelineReport.model_validate_json(load_report(tmp_path))
    assert report.config.steps == 2
    assert report.config.fp8


def test_ini_without_section(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[other]\nsteps = 1\n")
    with pytest.raises(ConfigError):
        read_config_file(str(ini))


def test_preset_fills_fields():
    cfg = load_config(overrides={"preset": "hunyuan", "num_heads": 2})
    assert (cfg.text_len, cfg.num_frames, cfg.tokens_per_frame) == (256, 33, 3600)
    assert cfg.num_heads == 2
    with pytest.raises(ValueError):
        load_config(overrides={"preset": "sora"})


def test_planted_and_flips():
    cfg = load_config(overrides={"preset": "cogvideo-mini", "num_heads": 3,
                                 "planted": "s,t,s", "flips": "1:5"})
    heads = cfg.planted_heads()
    assert [h.kind.value for h in heads] == ["spatial", "temporal", "spatial"]
    assert heads[1].flip_step == 5
    with pytest.raises(ValueError):
        RunConfig(preset="cogvideo-mini", flips="9:1")
    with pytest.raises(ValueError):
        RunConfig(preset="cogvideo-mini", planted="s,x,s,t,s,t,s,t")


def test_rope_needs_even_dim():
    with pytest.raises(ValueError):
        RunConfig(preset="cogvideo-mini", head_dim=7, rope=True)


def test_masks_images(tmp_path, capsys):
    args = ["--text-len", 0, "--num-frames", 4, "--tokens-per-frame", 8, "--c-s", 1,
            "--c-t", 4, "--block-size", 4, "--head-dim", 8, "--num-heads", 1]
    assert svgsim("masks", *args, "--output", tmp_path) == 0
    assert "temporal_frame_major" in capsys.readouterr().out

    with open(tmp_path / "spatial.pgm", "rb") as h:
        spatial = read_pgm(h.read())
    assert spatial.shape == (8, 8)
    for bq in range(8):
        for bk in range(8):
            assert spatial[bq, bk] == (bq // 2 == bk // 2 or bk < 2)

    with open(tmp_path / "temporal_frame_major.pgm", "rb") as h:
        band = read_pgm(h.read())
    assert band.shape == (8, 8)
    # every frame-major block holds a frame-0 sink column
    assert band.all()


def test_masks_full_window(tmp_path):
    args = ["--text-len", 0, "--num-frames", 2, "--tokens-per-frame", 8, "--c-s", 2,
            "--c-t", 4, "--block-size", 4, "--head-dim", 8, "--num-heads", 1]
    assert svgsim("masks", *args, "--output", tmp_path) == 0
    with open(tmp_path / "spatial.pgm", "rb") as h:
        assert read_pgm(h.read()).all()


@pytest.mark.parametrize("extra", [["--text-len", 2], ["--text-len", 0, "--no-include-first-frame"]])
def test_masks_window_as_wide_as_video(tmp_path, extra):
    args = ["--num-frames", 3, "--tokens-per-frame", 4, "--c-s", 3, "--c-t", 1, "--block-size", 2,
            "--head-dim", 8, "--num-heads", 1] + extra
    assert svgsim("masks", *args, "--output", tmp_path) == 0
    with open(tmp_path / "spatial.pgm", "rb") as h:
        assert read_pgm(h.read()).all()


def test_bench_small(tmp_path, capsys):
    args = ["--text-len", 0, "--num-frames", 2, "--tokens-per-frame", 8, "--c-s", 2,
            "--c-t", 4, "--block-size", 4, "--head-dim", 8, "--num-heads", 1]
    assert svgsim("bench", *args, "--output", tmp_path) == 0
    assert "temporal frame-major" in capsys.readouterr().out
    with open(tmp_path / "bench.json", "rb") as h:
        bench = json.loads(h.read())
    rows = {r["pattern"]: r for r in bench["rows"]}
    assert rows["dense"]["counted_flops"] == rows["dense"]["closed_form_flops"] == 4 * 16 * 16 * 8
    assert rows["spatial"]["element_density"] == 1.0
    assert rows["spatial"]["counted_flops"] == rows["spatial"]["closed_form_flops"]
    tm, fm = rows["temporal token-major"], rows["temporal frame-major"]
    assert fm["counted_flops"] <= tm["counted_flops"]


def test_bench_full_size_counts_only():
    bench = bench_report(load_config(overrides={"preset": "hunyuan"}))
    rows = {r.pattern: r for r in bench.rows}
    assert bench.seq_len == 256 + 33 * 3600
    assert rows["spatial"].counted_flops is None
    assert rows["spatial"].video_density == pytest.approx(10 / 33)
    assert rows["temporal frame-major"].video_density == pytest.approx((3600 * 37 - 342) / 3600 ** 2)
    assert rows["spatial"].closed_form_flops * 33 == rows["dense"].closed_form_flops * 10
    assert "-" in render("bench.txt", bench=bench)


def test_schema_matches_models(tmp_path, capsys):
    assert svgsim("schema") == 0
    printed = json.loads(capsys.readouterr().out)
    assert set(printed["properties"]) == set(PipelineReport.model_fields)
    with open(REPORT_SCHEMA_FILE, "rb") as h:
        shipped = json.loads(h.read())
    assert set(shipped["properties"]) == set(printed["properties"])
    assert sorted(shipped["required"]) == sorted(printed["required"])
    assert set(shipped["$defs"]) == set(printed["$defs"])
    for name, definition in printed["$defs"].items():
        assert set(shipped["$defs"][name].get("properties", {})) == set(definition.get("properties", {}))

    assert svgsim("schema", tmp_path / "schema.json") == 0
    assert os.path.exists(tmp_path / "schema.json")


def test_report_validates_against_shipped_schema(tmp_path, capsys):
    assert svgsim("run", *TINY, "--oracle-check", "--output", tmp_path) == 0
    report = json.loads(load_report(tmp_path))
    with open(REPORT_SCHEMA_FILE, "rb") as h:
        shipped = json.loads(h.read())
    jsonschema.validate(report, shipped)

    capsys.readouterr()
    assert svgsim("schema") == 0
    jsonschema.validate(report, json.loads(capsys.readouterr().out))

    del report["flops"]
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(report, shipped)
    report = json.loads(load_report(tmp_path))
    report["heads"][0]["class"] = "diagonal"
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(report, shipped)


def test_classify_and_compare(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert svgsim("classify", *TINY, "--dump", a) == 0
    assert svgsim("classify", *TINY, "--output", tmp_path / "out") == 0
    dump = json.loads(a.read_text())
    assert {"step", "head", "mse_spatial", "mse_temporal", "class"} == set(dump[0])
    os.rename(tmp_path / "out" / "classification.json", b)
    capsys.readouterr()
    assert svgsim("compare", a, b) == 0
    out = capsys.readouterr().out
    assert "6 profiled (step, head) pairs" in out
    assert "100.00%" in out


def test_compare_against_report(tmp_path, capsys):
    assert svgsim("classify", *TINY, "--dump", tmp_path / "a.json") == 0
    assert svgsim("run", *TINY, "--output", tmp_path) == 0
    capsys.readouterr()
    assert svgsim("compare", tmp_path / "a.json", tmp_path / "report.json") == 0
    assert "100.00%" in capsys.readouterr().out


def test_parser_flags():
    args = build_parser().parse_args(["run", "--no-include-text", "--warmup", "0.5"])
    assert args.include_text is False
    assert args.warmup_fraction == "0.5"
    assert args.include_first_frame is None


def test_pgm_round_trip():
    from svgsim.utils import pgm_bytes
    bitmap = np.array([[True, False, True], [False, False, True]])
    data = pgm_bytes(bitmap)
    assert data.startswith(b"P5\n3 2\n255\n")
    assert np.array_equal(read_pgm(data), bitmap)
