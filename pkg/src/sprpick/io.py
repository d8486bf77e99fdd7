"""On-disk dataset layout, splitting and the persistent latent-pick store.

Layout of a dataset directory::

    manifest.json
    gathers/<id>.f32     raw little-endian float32, sample-major, no header
    picks/<id>.csv       header ``trace,sample``; ``sample=-1`` is unlabeled
    latent/<id>.csv      same format, current latent picks (training runs)
    latent/EPOCH         last completed epoch
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .types import UNLABELED, ConsistencyError, Gather, PickRangeError, validate_picks

MANIFEST_NAME = "manifest.json"
_F32 = np.dtype("<f4")


class DatasetError(OSError):
    """Missing, malformed or inconsistent dataset files."""


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class GatherEntry:
    gather_id: str
    n_samples: int
    n_traces: int
    amplitude_path: str
    picks_path: str


@dataclass
class DatasetManifest:
    dataset_name: str
    sample_rate_ms: float
    entries: list[GatherEntry]
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        ids = [e.gather_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate gather ids in manifest")
        for e in self.entries:
            if e.n_samples < 1 or e.n_traces < 1:
                raise DatasetError(f"gather {e.gather_id!r}: non-positive dims {e.n_samples}x{e.n_traces}")

    @property
    def gather_ids(self) -> list[str]:
        return [e.gather_id for e in self.entries]

    def entry(self, gather_id: str) -> GatherEntry:
        for e in self.entries:
            if e.gather_id == gather_id:
                return e
        raise KeyError(gather_id)

    def subset(self, gather_ids) -> DatasetManifest:
        keep = set(gather_ids)
        return replace(self, entries=[e for e in self.entries if e.gather_id in keep])

    def to_json(self) -> dict:
        return {
            "dataset_name": self.dataset_name,
            "sample_rate_ms": self.sample_rate_ms,
            "gathers": [
                {
                    "gather_id": e.gather_id,
                    "n_samples": e.n_samples,
                    "n_traces": e.n_traces,
                    "amplitude": e.amplitude_path,
                    "picks": e.picks_path,
                }
                for e in self.entries
            ],
        }

    # lazy access -------------------------------------------------------

    def _path(self, rel: str) -> Path:
        if self.root is None:
            raise DatasetError("manifest has no root directory")
        return self.root / rel

    def load_gather(self, gather_id: str) -> Gather:
        e = self.entry(gather_id)
        path = self._path(e.amplitude_path)
        if not path.is_file():
            raise DatasetError(f"amplitude blob not found: {path}")
        raw = np.fromfile(path, dtype=_F32)
        if raw.size != e.n_samples * e.n_traces:
            raise DatasetError(
                f"{path}: {raw.size} floats, manifest says {e.n_samples}x{e.n_traces}={e.n_samples * e.n_traces}"
            )
        amp = raw.reshape(e.n_samples, e.n_traces).astype(np.float32)
        return Gather(amp, gather_id, self.sample_rate_ms)

    def load_picks(self, gather_id: str) -> np.ndarray:
        e = self.entry(gather_id)
        return read_picks(self._path(e.picks_path), e.n_traces, e.n_samples)


def write_picks(path: Path, picks) -> None:
    t = np.asarray(picks, dtype=np.int64)
    lines = ["trace,sample"] + [f"{k},{int(v)}" for k, v in enumerate(t)]
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def read_picks(path: Path, n_traces: int | None = None, n_samples: int | None = None) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"pick file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "trace,sample":
        raise DatasetError(f"{path}: expected header 'trace,sample'")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            k, s = int(parts[0]), int(parts[1])
        except (ValueError, IndexError):
            raise DatasetError(f"{path}:{lineno}: malformed row {line!r}") from None
        if len(parts) != 2 or k != len(rows):
            raise DatasetError(f"{path}:{lineno}: expected trace {len(rows)}, got {line!r}")
        rows.append(s)
    picks = np.asarray(rows, dtype=np.int64)
    if n_traces is not None and picks.size != n_traces:
        raise DatasetError(f"{path}: {picks.size} rows, expected {n_traces} traces")
    if n_samples is not None:
        try:
            validate_picks(picks, n_samples)
        except PickRangeError as exc:
            raise DatasetError(f"{path}: {exc}") from None
    return picks


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode())


def write_dataset(
    directory, gathers: list[Gather], picks: list, dataset_name: str = "synthetic"
) -> DatasetManifest:
    """Write gathers and their picks into ``directory`` and return the manifest."""
    root = Path(directory)
    if len(gathers) != len(picks):
        raise ConsistencyError(f"{len(gathers)} gathers but {len(picks)} pick sets")
    if not gathers:
        raise DatasetError("no gathers to write")
    rates = {g.sample_rate_ms for g in gathers}
    if len(rates) != 1:
        raise ConsistencyError(f"mixed sample rates {sorted(rates)}")
    entries = []
    for g, t in zip(gathers, picks):
        t = validate_picks(t, g.n_samples)
        if t.size != g.n_traces:
            raise ConsistencyError(f"gather {g.gather_id!r}: {t.size} picks for {g.n_traces} traces")
        amp_rel = f"gathers/{g.gather_id}.f32"
        pick_rel = f"picks/{g.gather_id}.csv"
        _atomic_write_bytes(root / amp_rel, np.ascontiguousarray(g.amplitude, dtype=_F32).tobytes())
        write_picks(root / pick_rel, t)
        entries.append(GatherEntry(g.gather_id, g.n_samples, g.n_traces, amp_rel, pick_rel))
    manifest = DatasetManifest(dataset_name, rates.pop(), entries, root)
    _atomic_write_text(root / MANIFEST_NAME, json.dumps(manifest.to_json(), indent=1) + "\n")
    return manifest


def read_dataset(directory) -> DatasetManifest:
    """Parse ``manifest.json``; gathers are loaded on demand."""
    root = Path(directory)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
        entries = [
            GatherEntry(
                str(g["gather_id"]), int(g["n_samples"]), int(g["n_traces"]), str(g["amplitude"]), str(g["picks"])
            )
            for g in doc["gathers"]
        ]
        manifest = DatasetManifest(str(doc["dataset_name"]), float(doc["sample_rate_ms"]), entries, root)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: malformed manifest ({exc})") from None
    for e in manifest.entries:
        for rel in (e.amplitude_path, e.picks_path):
            if not (root / rel).is_file():
                raise DatasetError(f"gather {e.gather_id!r}: referenced file not found: {root / rel}")
    return manifest


def split_dataset(
    manifest: DatasetManifest, ratios=(0.8, 0.1, 0.1), seed: int = 0
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Deterministic train/val/test partition.

    Val and test get ``floor(ratio * G)`` gathers, train keeps the rest.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = manifest.gather_ids
    n = len(ids)
    if n < sum(r > 0 for r in ratios):
        raise SplitError(f"{n} gathers cannot fill {sum(r > 0 for r in ratios)} non-empty splits")
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    order = np.random.default_rng(seed).permutation(n)
    val = [ids[i] for i in order[:n_val]]
    test = [ids[i] for i in order[n_val : n_val + n_test]]
    train = [ids[i] for i in order[n_val + n_test :]]
    return manifest.subset(train), manifest.subset(val), manifest.subset(test)


@dataclass
class LatentPickStore:
    """Current latent first-break picks of every training gather."""

    picks: dict[str, np.ndarray]
    n_samples: dict[str, int]
    epoch: int = 0

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> LatentPickStore:
        """Start from the manual picks of every gather in ``manifest``."""
        picks = {gid: manifest.load_picks(gid) for gid in manifest.gather_ids}
        dims = {e.gather_id: e.n_samples for e in manifest.entries}
        return cls.init(picks, dims)

    @classmethod
    def init(cls, manual_picks: dict, n_samples: dict) -> LatentPickStore:
        picks = {}
        for gid, t in manual_picks.items():
            picks[gid] = validate_picks(t, n_samples[gid]).copy()
        return cls(picks, {gid: int(n_samples[gid]) for gid in picks}, 0)

    def validate(self) -> None:
        for gid, t in self.picks.items():
            try:
                validate_picks(t, self.n_samples[gid])
            except PickRangeError as exc:
                raise PickRangeError(f"latent picks of gather {gid!r}: {exc}") from None

    def copy(self) -> LatentPickStore:
        return LatentPickStore({k: v.copy() for k, v in self.picks.items()}, dict(self.n_samples), self.epoch)

    def save(self, directory) -> None:
        """Write ``latent/<id>.csv`` and ``latent/EPOCH`` under ``directory``."""
        self.validate()
        latent = Path(directory) / "latent"
        for gid, t in self.picks.items():
            write_picks(latent / f"{gid}.csv", t)
        dims = {gid: self.n_samples[gid] for gid in sorted(self.picks)}
        _atomic_write_text(latent / "DIMS.json", json.dumps(dims, indent=0) + "\n")
        _atomic_write_text(latent / "EPOCH", f"{self.epoch}\n")

    @classmethod
    def load(cls, directory, expected_ids=None) -> LatentPickStore:
        latent = Path(directory) / "latent"
        epoch_file = latent / "EPOCH"
        if not epoch_file.is_file():
            raise DatasetError(f"latent store not found: {epoch_file}")
        dims = {k: int(v) for k, v in json.loads((latent / "DIMS.json").read_text()).items()}
        if expected_ids is not None and set(expected_ids) != set(dims):
            missing = sorted(set(expected_ids) - set(dims))
            extra = sorted(set(dims) - set(expected_ids))
            raise ConsistencyError(f"latent store gather set mismatch: missing {missing}, unexpected {extra}")
        picks = {gid: read_picks(latent / f"{gid}.csv", n_samples=m) for gid, m in dims.items()}
        return cls(picks, dims, int(epoch_file.read_text().strip()))

    def moved(self, manual: dict) -> int:
        """Number of traces whose latent pick differs from ``manual``."""
        return int(sum(np.count_nonzero(self.picks[g] != np.asarray(manual[g])) for g in self.picks))


__all__ = [
    "UNLABELED",
    "DatasetError",
    "DatasetManifest",
    "GatherEntry",
    "LatentPickStore",
    "SplitError",
    "read_dataset",
    "read_picks",
    "split_dataset",
    "write_dataset",
    "write_picks",
]
