"""Append-only CSV metrics with the resolved config echoed as comments."""

from __future__ import annotations

import csv
import hashlib
import io
import time
from pathlib import Path

TIMING_COLUMNS = ("wall_ms",)
_SOURCE = Path(__file__).resolve().parent


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    from importlib.metadata import PackageNotFoundError, version

    try:
        ver = version("artifact")
    except PackageNotFoundError:
        ver = "0+unknown"
    h = hashlib.sha256()
    for p in sorted(_SOURCE.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"rrpo {ver}+src.{h.hexdigest()[:12]}"


def provenance(cfg, extra: dict | None = None) -> list[str]:
    lines = [f"code_version = {code_version()}"]
    lines += cfg.echo()
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    return lines


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsWriter:
    """One CSV per phase: ``# key = value`` provenance lines, one header, rows.

    Columns are fixed by the first row; ``run_id``, ``phase`` and ``step``
    lead and ``wall_ms`` (elapsed since the writer opened) closes each row.
    """

    def __init__(self, path, cfg, run_id: str, phase: str, extra: dict | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.run_id = run_id
        self.phase = phase
        self.columns: list[str] | None = None
        self.t0 = time.perf_counter()
        with open(self.path, "w", newline="") as fh:
            for line in provenance(cfg, extra):
                fh.write(f"# {line}\n")

    def row(self, step: int, **metrics) -> None:
        names = sorted(metrics)
        if self.columns is None:
            self.columns = names
            self._write(["run_id", "phase", "step", *names, "wall_ms"])
        elif names != self.columns:
            raise ValueError(f"metric columns changed: {names} vs {self.columns}")
        wall = int(round(1000 * (time.perf_counter() - self.t0)))
        self._write([self.run_id, self.phase, step, *(metrics[k] for k in names), wall])

    def _write(self, values) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(v) for v in values])


def read_metrics(path) -> tuple[list[str], list[dict]]:
    """Provenance comment lines and the data rows as dicts of strings."""
    comments, body = [], []
    for line in Path(path).read_text().splitlines():
        (comments if line.startswith("#") else body).append(line)
    rows = list(csv.DictReader(io.StringIO("\n".join(body))))
    return [c[1:].strip() for c in comments], rows


def strip_timing(rows: list[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k not in TIMING_COLUMNS} for r in rows]
