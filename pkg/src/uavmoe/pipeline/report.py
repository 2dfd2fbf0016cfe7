"""Report tables and their CSV / JSON encodings.

Every table is a header plus rows of scalars (int, float, str or None).
Floats are written with 6 significant digits, except latitude/longitude
columns, which keep 6 decimal places (about 0.1 m). None is an empty CSV cell
and JSON null. The JSON file carries the same rounded values as the CSV file.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError

Value = int | float | str | None

QUEUE_COLUMNS = ("lane", "queue_length_m", "timestamp_s", "start_lat", "start_lon", "end_lat", "end_lon")
SPILLBACK_COLUMNS = ("lane", "timestamp_s")
FD_CURVE_COLUMNS = ("u_kmh", "k_vpk", "q_vph")


@dataclass
class Table:
    name: str
    columns: tuple[str, ...]
    rows: list[list[Value]] = field(default_factory=list)

    def __post_init__(self):
        self.columns = tuple(self.columns)
        for row in self.rows:
            self._check(row)

    def _check(self, row) -> None:
        if len(row) != len(self.columns):
            raise ValueError(f"{self.name}: row has {len(row)} values for {len(self.columns)} columns")

    def append(self, row: list[Value]) -> None:
        self._check(row)
        self.rows.append(list(row))

    def column(self, name: str) -> list[Value]:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def row(self, key: Value) -> list[Value]:
        """First row whose first cell equals ``key``."""
        for r in self.rows:
            if r[0] == key:
                return r
        raise KeyError(key)

    def rounded(self) -> Table:
        coords = [is_coordinate(c) for c in self.columns]
        return Table(self.name, self.columns, [[_round(v, c) for v, c in zip(r, coords)] for r in self.rows])


@dataclass
class MoeReport:
    tables: dict[str, Table] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def add(self, table: Table) -> Table:
        self.tables[table.name] = table
        return table

    def __getitem__(self, name: str) -> Table:
        return self.tables[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tables


def is_coordinate(column: str) -> bool:
    return column in ("lat", "lon") or column.endswith(("_lat", "_lon"))


def format_value(v: Value, coordinate: bool = False) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return format(v, ".6f" if coordinate else ".6g")
    return str(v)


def parse_value(text: str) -> Value:
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _round(v: Value, coordinate: bool = False) -> Value:
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return None if math.isnan(v) else float(format_value(v, coordinate))
    return v


def table_to_csv(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.columns)
    coords = [is_coordinate(c) for c in table.columns]
    for r in table.rows:
        w.writerow([format_value(v, c) for v, c in zip(r, coords)])
    return buf.getvalue()


def table_from_csv(text: str, name: str = "") -> Table:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("empty CSV") from None
    return Table(name, tuple(header), [[parse_value(c) for c in r] for r in reader])


def table_to_json(table: Table) -> str:
    t = table.rounded()
    doc = {"name": t.name, "columns": list(t.columns), "rows": t.rows}
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


def table_from_json(text: str) -> Table:
    doc = json.loads(text)
    return Table(doc["name"], tuple(doc["columns"]), [list(r) for r in doc["rows"]])


def emit_report(report: MoeReport, out_dir: str | Path, fmt: str = "csv") -> list[Path]:
    """Write one file per table into ``out_dir`` (created if missing).

    All files are rendered before any is written; each file is written to a
    temporary name and renamed, so a failure never leaves a half-written file.
    """
    if fmt not in ("csv", "json"):
        raise ConfigError(f"unknown report format {fmt!r}")
    render = table_to_csv if fmt == "csv" else table_to_json
    rendered = {f"{name}.{fmt}": render(t) for name, t in report.tables.items()}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    written = []
    for fname, text in sorted(rendered.items()):
        path = out / fname
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(path)
        written.append(path)
    return written


def read_report(out_dir: str | Path, fmt: str = "csv") -> MoeReport:
    report = MoeReport()
    for path in sorted(Path(out_dir).glob(f"*.{fmt}")):
        text = path.read_text(encoding="utf-8")
        table = table_from_csv(text, path.stem) if fmt == "csv" else table_from_json(text)
        report.add(table)
    return report
