"""Hit rate and mean absolute error of pick sets, pooled over gathers."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import DatasetError, DatasetManifest, read_picks
from .types import UNLABELED, ConsistencyError

DEFAULT_DELTAS = (0, 1, 2, 3, 5)
REPORT_COLUMNS = ("HR0", "HR1", "HR2", "HR3", "HR5", "MAE")


class MetricDomainError(ValueError):
    pass


def _countable(t_ref, t_pred) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(t_ref, dtype=np.int64)
    b = np.asarray(t_pred, dtype=np.int64)
    if a.shape != b.shape:
        raise ConsistencyError(f"pick sets differ in length: {a.shape} vs {b.shape}")
    keep = (a != UNLABELED) & (b != UNLABELED)
    if not keep.any():
        raise MetricDomainError("no trace is labeled in both pick sets")
    return a[keep], b[keep]


def hit_rate(t_ref, t_pred, delta: int) -> float:
    """Fraction of traces with ``|t_ref - t_pred| <= delta``, skipping unlabeled ones."""
    if delta < 0:
        raise MetricDomainError(f"delta must be >= 0, got {delta}")
    a, b = _countable(t_ref, t_pred)
    return float(np.count_nonzero(np.abs(a - b) <= delta) / a.size)


def mae(t_ref, t_pred) -> float:
    a, b = _countable(t_ref, t_pred)
    return float(np.abs(a - b).mean())


@dataclass
class MetricsReport:
    hit_rates: dict[int, float]
    mae: float
    n_traces: int
    n_excluded: int
    method: str = ""
    condition: str = ""
    deltas: tuple[int, ...] = field(default=DEFAULT_DELTAS)

    def row(self) -> dict[str, float]:
        out = {f"HR{d}": self.hit_rates[d] for d in self.deltas}
        out["MAE"] = self.mae
        return out

    def csv_header(self) -> str:
        return ",".join(["method", *[f"HR{d}" for d in self.deltas], "MAE"])

    def csv_row(self) -> str:
        vals = [repr(float(self.hit_rates[d])) for d in self.deltas] + [repr(float(self.mae))]
        return ",".join([self.method, *vals])

    def to_csv(self) -> str:
        return self.csv_header() + "\n" + self.csv_row() + "\n"

    def format_table(self) -> str:
        """Human-readable line with hit rates as percentages."""
        parts = [f"HR{d}={100 * self.hit_rates[d]:.2f}" for d in self.deltas]
        parts.append(f"MAE={self.mae:.4f}")
        return f"{self.method or '-'}: " + " ".join(parts) + f" (n={self.n_traces}, excluded={self.n_excluded})"


def pooled_report(ref: dict, pred: dict, deltas=DEFAULT_DELTAS, method: str = "") -> MetricsReport:
    """Micro-averaged metrics over all traces of all gathers in ``ref``."""
    missing = sorted(set(ref) - set(pred))
    if missing:
        raise DatasetError(f"no predicted picks for gathers: {missing}")
    a = np.concatenate([np.asarray(ref[g], dtype=np.int64) for g in sorted(ref)])
    b = np.concatenate([np.asarray(pred[g], dtype=np.int64) for g in sorted(ref)])
    deltas = tuple(int(d) for d in deltas)
    total = a.size
    a_c, b_c = _countable(a, b)
    err = np.abs(a_c - b_c)
    return MetricsReport(
        hit_rates={d: float(np.count_nonzero(err <= d) / err.size) for d in deltas},
        mae=float(err.mean()),
        n_traces=int(err.size),
        n_excluded=int(total - err.size),
        method=method,
        deltas=deltas,
    )


def evaluate(manifest: DatasetManifest, picks, deltas=DEFAULT_DELTAS, method: str = "") -> MetricsReport:
    """Score ``picks`` against the reference picks stored in ``manifest``.

    ``picks`` is either a mapping gather_id -> picks or a directory of
    ``<gather_id>.csv`` pick files.
    """
    if isinstance(picks, (str, Path)):
        directory = Path(picks)
        pred = {}
        for e in manifest.entries:
            path = directory / f"{e.gather_id}.csv"
            if not path.is_file():
                raise DatasetError(f"pick file not found: {path}")
            pred[e.gather_id] = read_picks(path, e.n_traces)
    else:
        pred = dict(picks)
    ref = {gid: manifest.load_picks(gid) for gid in manifest.gather_ids}
    return pooled_report(ref, pred, deltas, method)
