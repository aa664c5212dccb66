"""Metric records and their CSV persistence."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
SCHEMA_LINE = f"# dglearn-metrics v{SCHEMA_VERSION}"


@dataclass
class MetricRecord:
    step: int
    module_id: int
    epoch_equivalent: float
    train_loss: float = float("nan")
    train_acc: float = float("nan")
    test_acc: float = float("nan")
    grad_norm: float = float("nan")
    drift: float = float("nan")
    bits_sent: int = 0
    buffer_bytes: int = 0
    starvation_count: int = 0


COLUMNS = [f.name for f in fields(MetricRecord)]


def _fmt(v) -> str:
    if isinstance(v, Fraction):
        v = v.numerator // v.denominator if v.denominator == 1 else float(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(int(v)) if isinstance(v, (int, np.integer)) else str(v)


def records_to_csv(records: list[MetricRecord]) -> str:
    buf = io.StringIO()
    buf.write(SCHEMA_LINE + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
    return buf.getvalue()


def write_csv(records: list[MetricRecord], path: "str | Path") -> Path:
    path = Path(path)
    path.write_text(records_to_csv(records))
    return path


def read_csv(path: "str | Path") -> list[MetricRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != SCHEMA_LINE:
        raise ValueError(f"{path}: missing or unsupported metrics schema line")
    reader = csv.DictReader(lines[1:])
    if reader.fieldnames != COLUMNS:
        raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
    out = []
    for row in reader:
        kw = {}
        for f in fields(MetricRecord):
            kw[f.name] = float(row[f.name]) if f.type in ("float", float) else int(row[f.name])
        out.append(MetricRecord(**kw))
    return out


@dataclass
class TrainTrace:
    """Everything a training run reports back."""

    records: list[MetricRecord] = field(default_factory=list)
    grad_norms: list[list[float]] = field(default_factory=list)
    losses: list[list[float]] = field(default_factory=list)
    lrs: list[list[float]] = field(default_factory=list)
    drift: list[list[float]] = field(default_factory=list)
    final_test_acc: list[float] = field(default_factory=list)
    digests: list[list[str]] = field(default_factory=list)
    schedule: list[int] = field(default_factory=list)
    starvation: list[int] = field(default_factory=list)
    bits_sent: list = field(default_factory=list)
    buffer_bytes: list[int] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def for_modules(cls, n: int) -> "TrainTrace":
        return cls(grad_norms=[[] for _ in range(n)], losses=[[] for _ in range(n)],
                   lrs=[[] for _ in range(n)], drift=[[] for _ in range(n)],
                   digests=[[] for _ in range(n)], starvation=[0] * n,
                   bits_sent=[0] * n, buffer_bytes=[0] * n)

    def epoch_losses(self, module: int, batches_per_epoch: int) -> list[float]:
        """Mean training loss of ``module`` over each block of its own updates."""
        losses = self.losses[module]
        n = len(losses) // batches_per_epoch
        return [float(np.mean(losses[e * batches_per_epoch:(e + 1) * batches_per_epoch]))
                for e in range(n)]

    def as_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.records]
