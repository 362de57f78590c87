"""Deterministic report emission: CSV, JSON, and aligned text tables.

All writes are atomic (temp file + rename) and bit-stable for identical
inputs: keys are sorted and floats use 6 significant digits.
"""

from __future__ import annotations

import json
import os
import tempfile

CSV_HEADER = "layer_id,kind,fwd_flops,bwd_flops,param_bytes,saved_act_bytes,temp_bytes"


def fmt_num(x) -> str:
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, int):
        return str(x)
    return format(float(x), ".6g")


def atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-report-")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def profile_csv(report) -> str:
    lines = [CSV_HEADER]
    for r in report.rows:
        lines.append(f"{r.layer_id},{r.kind},{r.fwd_flops},{r.bwd_flops},"
                     f"{r.param_bytes},{r.saved_act_bytes},{r.temp_bytes}")
    t = report.totals
    lines.append(f"TOTAL,,{t['fwd_flops']},{t['bwd_flops']},{t['param_bytes']},"
                 f"{t['saved_act_bytes']},{t['temp_bytes']}")
    return "\n".join(lines) + "\n"


def profile_json(report) -> str:
    doc = {
        "policy": report.policy_preset,
        "input_shape": list(report.input_shape),
        "rows": [{
            "layer_id": r.layer_id, "kind": r.kind,
            "fwd_flops": r.fwd_flops, "bwd_flops": r.bwd_flops,
            "param_bytes": r.param_bytes,
            "saved_act_bytes": r.saved_act_bytes,
            "temp_bytes": r.temp_bytes,
        } for r in report.rows],
        "totals": report.totals,
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def profile_table(report) -> str:
    cols = CSV_HEADER.split(",")
    rows = [[r.layer_id, r.kind, r.fwd_flops, r.bwd_flops, r.param_bytes,
             r.saved_act_bytes, r.temp_bytes] for r in report.rows]
    t = report.totals
    rows.append(["TOTAL", "", t["fwd_flops"], t["bwd_flops"], t["param_bytes"],
                 t["saved_act_bytes"], t["temp_bytes"]])
    return render_table(cols, rows)


def render_table(cols, rows) -> str:
    cells = [[str(c) for c in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(cols)]
    out = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(cols))]
    for row in cells:
        out.append("  ".join(row[i].ljust(widths[i]) for i in range(len(cols))))
    return "\n".join(out) + "\n"


def compare_csv(rows) -> str:
    header = "policy,saved_act_mb,fwd_mflops,bwd_mflops,total_mflops,trainable_params"
    lines = [header]
    for r in rows:
        lines.append(",".join([r["policy"], fmt_num(r["saved_act_mb"]),
                               fmt_num(r["fwd_mflops"]), fmt_num(r["bwd_mflops"]),
                               fmt_num(r["total_mflops"]),
                               str(r["trainable_params"])]))
    return "\n".join(lines) + "\n"


def compare_json(rows) -> str:
    rounded = [
        {k: (v if isinstance(v, (str, int)) else float(fmt_num(v)))
         for k, v in r.items()} for r in rows]
    return json.dumps({"strategies": rounded}, sort_keys=True, indent=2) + "\n"


def compare_table(rows) -> str:
    cols = ["policy", "saved_act_mb", "fwd_mflops", "bwd_mflops",
            "total_mflops", "trainable_params"]
    body = [[r["policy"], fmt_num(r["saved_act_mb"]), fmt_num(r["fwd_mflops"]),
             fmt_num(r["bwd_mflops"]), fmt_num(r["total_mflops"]),
             r["trainable_params"]] for r in rows]
    return render_table(cols, body)
