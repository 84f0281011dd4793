from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields
from pathlib import Path

COLUMNS = ("step", "l_senone", "l_domain", "class_acc", "domain_acc", "probe_acc")


@dataclass
class MetricsRow:
    step: int
    l_senone: float | None = None
    l_domain: float | None = None
    class_acc: float | None = None
    domain_acc: float | None = None
    probe_acc: float | None = None

    def as_strings(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append("" if v is None else repr(v) if isinstance(v, float) else str(v))
        return out

    @classmethod
    def from_strings(cls, values) -> "MetricsRow":
        step, *rest = values
        return cls(int(step), *(None if v == "" else float(v) for v in rest))


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in rows:
        w.writerow(row.as_strings())
    return buf.getvalue()


def write_metrics(rows, path, append: bool = False) -> None:
    path = Path(path)
    if append and path.exists() and path.stat().st_size:
        text = metrics_csv(rows).split("\n", 1)[1]
        with path.open("a") as fh:
            fh.write(text)
    else:
        path.write_text(metrics_csv(rows))


def read_metrics(path) -> list[MetricsRow]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [MetricsRow.from_strings(r) for r in reader]
