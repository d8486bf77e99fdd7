"""Gathers, pick sets, label masks and trace-axis windowing.

Pick sets are plain ``int64`` vectors (one entry per trace) with
``UNLABELED`` marking traces without a pick. Label masks are ``uint8``
matrices of shape ``(n_samples, n_traces)`` holding a single 1 per
labeled column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UNLABELED = -1

#: (samples, traces) of one network input window at desk scale.
DEFAULT_WINDOW_SHAPE = (256, 64)


class PickRangeError(ValueError):
    """A pick index lies outside ``[0, n_samples)``."""


class LabelMaskError(ValueError):
    """A label mask column holds more than one positive."""


class WindowConfigError(ValueError):
    """Window shape cannot hold the gather."""


class ConsistencyError(ValueError):
    """Inputs that must agree with each other do not."""


@dataclass(frozen=True)
class Gather:
    """Amplitudes of adjacent traces, rows are samples and columns traces."""

    amplitude: np.ndarray
    gather_id: str = ""
    sample_rate_ms: float = 1.0

    def __post_init__(self):
        amp = np.asarray(self.amplitude, dtype=np.float32)
        if amp.ndim != 2 or amp.shape[0] < 1 or amp.shape[1] < 1:
            raise ValueError(f"gather {self.gather_id!r}: amplitude must be a non-empty 2-D matrix, got {amp.shape}")
        if not np.all(np.isfinite(amp)):
            raise ValueError(f"gather {self.gather_id!r}: non-finite amplitudes")
        if not self.sample_rate_ms > 0:
            raise ValueError(f"gather {self.gather_id!r}: sample_rate_ms must be positive")
        object.__setattr__(self, "amplitude", amp)

    @property
    def n_samples(self) -> int:
        return self.amplitude.shape[0]

    @property
    def n_traces(self) -> int:
        return self.amplitude.shape[1]


@dataclass(frozen=True)
class WindowedGather:
    """A zero-padded network input cut from a gather.

    ``origin`` is ``(gather_id, first_trace, first_sample)`` in the source
    gather. The real data occupies the top-left block flagged by
    ``valid_mask``.
    """

    data: np.ndarray
    valid_mask: np.ndarray
    origin: tuple[str, int, int]

    @property
    def n_valid_samples(self) -> int:
        return int(self.valid_mask[:, 0].sum()) if self.valid_mask.shape[1] else 0

    @property
    def n_valid_traces(self) -> int:
        return int(self.valid_mask[0].sum()) if self.valid_mask.shape[0] else 0


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-pixel first-break probability, strictly inside (0, 1)."""

    prob: np.ndarray
    valid_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.valid_mask is None:
            object.__setattr__(self, "valid_mask", np.ones(self.prob.shape, dtype=bool))
        if self.prob.shape != self.valid_mask.shape:
            raise ConsistencyError(f"prob shape {self.prob.shape} != valid_mask shape {self.valid_mask.shape}")


def validate_picks(picks, n_samples: int) -> np.ndarray:
    """Return ``picks`` as int64, raising if any labeled pick is out of range."""
    t = np.asarray(picks)
    if t.ndim != 1:
        raise ValueError(f"picks must be 1-D, got shape {t.shape}")
    if t.size and not np.issubdtype(t.dtype, np.integer):
        if not np.all(np.equal(np.mod(t, 1), 0)):
            raise ValueError("picks must be integer sample indices")
    t = t.astype(np.int64)
    bad = np.flatnonzero((t != UNLABELED) & ((t < 0) | (t >= n_samples)))
    if bad.size:
        k = int(bad[0])
        raise PickRangeError(f"trace {k}: pick {int(t[k])} outside [0, {n_samples})")
    return t


def pickset_to_mask(picks, dims: tuple[int, int]) -> np.ndarray:
    """One-hot encode each trace's pick; unlabeled traces give all-zero columns."""
    n_samples, n_traces = dims
    t = validate_picks(picks, n_samples)
    if t.size != n_traces:
        raise ConsistencyError(f"{t.size} picks for {n_traces} traces")
    mask = np.zeros((n_samples, n_traces), dtype=np.uint8)
    cols = np.flatnonzero(t != UNLABELED)
    mask[t[cols], cols] = 1
    return mask


def mask_to_pickset(mask) -> np.ndarray:
    y = np.asarray(mask)
    if y.ndim != 2:
        raise ValueError(f"label mask must be 2-D, got shape {y.shape}")
    counts = (y != 0).sum(axis=0)
    multi = np.flatnonzero(counts > 1)
    if multi.size:
        raise LabelMaskError(f"trace {int(multi[0])}: {int(counts[multi[0]])} positives in one column")
    picks = np.argmax(y != 0, axis=0).astype(np.int64)
    picks[counts == 0] = UNLABELED
    return picks


def window_gather(gather: Gather, shape: tuple[int, int] = DEFAULT_WINDOW_SHAPE) -> list[WindowedGather]:
    """Tile ``gather`` along the trace axis into zero-padded windows.

    ``shape`` is ``(window_samples, window_traces)``. The last window is
    padded with zero traces on the right, every window is padded with zero
    samples at the bottom.
    """
    win_m, win_n = shape
    m, n = gather.amplitude.shape
    if m > win_m:
        raise WindowConfigError(
            f"gather {gather.gather_id!r} has {m} samples; window holds only {win_m} (no sample-axis tiling)"
        )
    windows = []
    for w in range(math.ceil(n / win_n)):
        k0 = w * win_n
        k1 = min(k0 + win_n, n)
        data = np.zeros((win_m, win_n), dtype=np.float32)
        valid = np.zeros((win_m, win_n), dtype=bool)
        data[:m, : k1 - k0] = gather.amplitude[:, k0:k1]
        valid[:m, : k1 - k0] = True
        windows.append(WindowedGather(data, valid, (gather.gather_id, k0, 0)))
    return windows


def window_picks(picks, windows: list[WindowedGather]) -> list[np.ndarray]:
    """Slice a gather's picks to match ``windows``; padded columns are unlabeled."""
    t = np.asarray(picks, dtype=np.int64)
    out = []
    for win in windows:
        _, k0, s0 = win.origin
        width = win.valid_mask.shape[1]
        nv = win.n_valid_traces
        wp = np.full(width, UNLABELED, dtype=np.int64)
        seg = t[k0 : k0 + nv]
        wp[: seg.size] = np.where(seg == UNLABELED, UNLABELED, seg - s0)
        out.append(wp)
    return out


def unwindow_picks(window_picks_list, windows: list[WindowedGather]) -> np.ndarray:
    """Reassemble per-window picks in original trace order.

    Picks in padded trace columns are dropped; picks in padded sample rows
    come back unlabeled.
    """
    if len(window_picks_list) != len(windows):
        raise ConsistencyError(f"{len(window_picks_list)} pick sets for {len(windows)} windows")
    spans = sorted(((w.origin[1], w.n_valid_traces, i) for i, w in enumerate(windows)))
    expected = 0
    for k0, nv, _ in spans:
        if k0 != expected:
            kind = "overlapping" if k0 < expected else "non-contiguous"
            raise ConsistencyError(f"{kind} window origins at trace {k0} (expected {expected})")
        expected = k0 + nv
    ids = {w.origin[0] for w in windows}
    if len(ids) > 1:
        raise ConsistencyError(f"windows from several gathers: {sorted(ids)}")
    out = np.full(expected, UNLABELED, dtype=np.int64)
    for k0, nv, i in spans:
        wp = np.asarray(window_picks_list[i], dtype=np.int64)[:nv]
        s0 = windows[i].origin[2]
        m_valid = windows[i].n_valid_samples
        inside = (wp != UNLABELED) & (wp >= 0) & (wp < m_valid)
        out[k0 : k0 + nv] = np.where(inside, wp + s0, UNLABELED)
    return out
