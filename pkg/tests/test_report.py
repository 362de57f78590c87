import json
import os

from mobiletl import report as rpt
from mobiletl.policy import TrainPolicy
from mobiletl.profiler import profile_model
from conftest import block, single_block_spec


def _report():
    return profile_model(single_block_spec(block(), num_classes=3),
                         TrainPolicy())


def test_csv_has_header_and_total():
    text = rpt.profile_csv(_report())
    lines = text.splitlines()
    assert lines[0] == rpt.CSV_HEADER
    assert lines[-1].startswith("TOTAL,")
    assert len(lines) == len(_report().rows) + 2


def test_json_round_trips():
    doc = json.loads(rpt.profile_json(_report()))
    assert doc["totals"]["fwd_flops"] == _report().total("fwd_flops")
    assert len(doc["rows"]) == len(_report().rows)


def test_table_includes_total_row():
    text = rpt.profile_table(_report())
    assert "TOTAL" in text


def test_atomic_write_replaces_not_appends(tmp_path):
    path = str(tmp_path / "out.txt")
    rpt.atomic_write(path, "first\n")
    rpt.atomic_write(path, "second\n")
    assert open(path).read() == "second\n"
    assert os.listdir(tmp_path) == ["out.txt"]  # no stray temp files


def test_fmt_num_keeps_ints_exact_and_rounds_floats():
    assert rpt.fmt_num(123456789) == "123456789"
    assert rpt.fmt_num(123456789.0) == "1.23457e+08"
    assert rpt.fmt_num(0.125) == "0.125"
