"""RunRecord persistence: per-epoch CSV, structured text report and tabulation.

``run.csv``: ``method,stage,epoch,train_loss,eval_acc,lr``; wall time is kept out
so reruns compare byte-for-byte.

``run.txt``: ``key = value`` lines. Fixed keys come first (``method``, ``stage``,
``test_acc``, ``trainable_params``, ``total_params``, ``extra_params``,
``wall_time``, ``trainable``, ``checkpoints``), then ``metric.*`` and
``config.*`` entries.
"""

from __future__ import annotations

import csv
import io
import os

from .pipeline import RunRecord


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_run_csv(path: str, records: list[RunRecord]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "stage", "epoch", "train_loss", "eval_acc", "lr"])
    for rec in records:
        for st in rec.epochs:
            w.writerow([rec.method, rec.stage, st.epoch, _fmt(st.train_loss), _fmt(st.eval_acc), _fmt(st.lr)])
    _atomic_write(path, buf.getvalue())


def read_run_csv(path: str) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def write_run_txt(path: str, rec: RunRecord, extra_params: int, config_text: str = "") -> None:
    lines = [
        f"method = {rec.method}",
        f"stage = {rec.stage}",
        f"test_acc = {_fmt(rec.metrics.get('test_acc', float('nan')))}",
        f"trainable_params = {rec.trainable_params}",
        f"total_params = {rec.total_params}",
        f"extra_params = {extra_params}",
        f"wall_time = {rec.wall_time:.3f}",
        f"trainable = {','.join(rec.trainable)}",
        f"checkpoints = {','.join(rec.checkpoints)}",
    ]
    lines += [f"metric.{k} = {_fmt(v)}" for k, v in sorted(rec.metrics.items()) if k != "test_acc"]
    for line in config_text.splitlines():
        if line.strip():
            lines.append(f"config.{line.strip()}")
    _atomic_write(path, "\n".join(lines) + "\n")


def read_run_txt(path: str) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            key, sep, val = line.rstrip("\n").partition(" = ")
            if sep:
                out[key] = val
    return out


def find_runs(root: str) -> list[str]:
    found = []
    for dirpath, _, files in os.walk(root):
        if "run.txt" in files:
            found.append(os.path.join(dirpath, "run.txt"))
    return sorted(found)


def report_table(root: str) -> list[dict]:
    """One row per run under ``root``, sorted by method then descending accuracy."""
    rows = []
    for path in find_runs(root):
        r = read_run_txt(path)
        rows.append({
            "run": os.path.relpath(os.path.dirname(path), root) or ".",
            "method": r.get("method", ""),
            "test_acc": float(r.get("test_acc", "nan")),
            "extra_params": int(r.get("extra_params", "0")),
            "trainable_params": int(r.get("trainable_params", "0")),
            "total_params": int(r.get("total_params", "0")),
        })
    rows.sort(key=lambda row: (row["method"], -row["test_acc"], row["run"]))
    return rows


def format_table(rows: list[dict]) -> str:
    head = f"{'method':<12} {'test_acc':>9} {'extra_params':>13} {'trainable':>10} {'total':>8}  run"
    lines = [head]
    for r in rows:
        lines.append(f"{r['method']:<12} {100 * r['test_acc']:>8.2f}% {r['extra_params']:>13} "
                     f"{r['trainable_params']:>10} {r['total_params']:>8}  {r['run']}")
    return "\n".join(lines) + "\n"


def write_report(root: str, rows: list[dict]) -> None:
    _atomic_write(os.path.join(root, "report.txt"), format_table(rows))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["method", "test_acc", "extra_params", "trainable_params", "total_params", "run"]
    w.writerow(cols)
    for r in rows:
        w.writerow([r[c] for c in cols])
    _atomic_write(os.path.join(root, "report.csv"), buf.getvalue())
