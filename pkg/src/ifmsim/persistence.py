"""Counts tables, result summaries and run manifests on disk."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

from ifmsim import __version__
from ifmsim.counting import CountRecord
from ifmsim.qcore import JointSetting

COUNTS_COLUMNS = ("detector", "alpha_rad", "chi_rad", "time_s", "counts")


class CountsFormatError(ValueError):
    pass


def fmt_angle(x: float) -> str:
    return f"{x:.12g}"


def fmt_value(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def _parse_value(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def counts_table_text(records: Sequence[CountRecord]) -> str:
    extra = sorted({k for r in records for k in r.coords})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COUNTS_COLUMNS + tuple(extra))
    for r in records:
        row = [r.detector, fmt_angle(r.setting.alpha), fmt_angle(r.setting.chi),
               fmt_angle(r.integration_time), fmt_value(r.observed_counts)]
        row += [fmt_value(r.coords[k]) if k in r.coords else "" for k in extra]
        w.writerow(row)
    return buf.getvalue()


def write_counts_table(records: Sequence[CountRecord], path) -> Path:
    path = Path(path)
    path.write_text(counts_table_text(records), encoding="utf-8")
    return path


def read_counts_table(path) -> list[CountRecord]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CountsFormatError(f"{path}: empty counts table")
    header = tuple(rows[0])
    if header[:5] != COUNTS_COLUMNS:
        raise CountsFormatError(f"{path}: header must start with {','.join(COUNTS_COLUMNS)}")
    extra = header[5:]
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise CountsFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            alpha, chi, t = float(row[1]), float(row[2]), float(row[3])
            counts = _parse_value(row[4])
            coords = {k: _parse_value(v) for k, v in zip(extra, row[5:]) if v != ""}
            rate = counts / t if t > 0 else 0.0
            records.append(CountRecord(JointSetting(alpha, chi), t, rate, counts, row[0], coords))
        except ValueError as exc:
            raise CountsFormatError(f"{path}:{lineno}: {exc}") from None
    return records


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Plot-ready delimited table."""
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_value(v) if not isinstance(v, str) else v for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def write_summary(summary: dict, out_dir) -> tuple[Path, Path]:
    """Flat ``key = value`` text plus the same mapping as JSON."""
    out_dir = Path(out_dir)
    lines = [f"{k} = {fmt_value(v) if not isinstance(v, str) else v}" for k, v in summary.items()]
    txt = out_dir / "summary.txt"
    txt.write_text("\n".join(lines) + "\n", encoding="utf-8")
    js = out_dir / "summary.json"
    js.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return txt, js


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, subcommand: str, config_echo: dict, seed: int, outputs: Sequence[Path],
                   inputs: Sequence[Path] = ()) -> Path:
    out_dir = Path(out_dir)
    manifest = {
        "program": "ifmsim",
        "version": __version__,
        "subcommand": subcommand,
        "seed": seed,
        "config": config_echo,
        "inputs": {Path(p).name: file_digest(p) for p in inputs},
        "outputs": {Path(p).name: file_digest(p) for p in outputs},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
