"""Synthetic gathers with known first breaks, and the two corruption protocols."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .types import UNLABELED, Gather, validate_picks

#: Signal-noise levels of the noisy-signal study.
STUDY_NOISE_LEVELS = (0.05, 0.1, 0.2)
#: Variance of the Gaussian pick perturbation in the noisy-label study.
STUDY_LABEL_VARIANCE = 3.0


class SynthSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of one synthetic gather.

    Moveout is in samples: ``linear`` gives ``intercept + slope * k``,
    ``hyperbolic`` gives ``sqrt(intercept**2 + (slope * (k - apex))**2)``.
    """

    n_samples: int = 256
    n_traces: int = 64
    frequency_hz: float = 25.0
    sample_rate_ms: float = 2.0
    moveout: str = "linear"
    intercept: float = 40.0
    slope: float = 1.0
    apex: float = 0.0
    noise_floor: float = 0.02
    decay: float = 0.01
    onset_level: float = 0.1
    seed: int = 0
    gather_id: str = "g0000"


@dataclass(frozen=True)
class NoiseSpec:
    level: float
    seed: int = 0

    def __post_init__(self):
        if not self.level >= 0:
            raise ValueError(f"noise level must be >= 0, got {self.level}")


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def ricker(frequency_hz: float, dt_s: float, tau: np.ndarray) -> np.ndarray:
    """Ricker pulse evaluated at sample offsets ``tau`` from its peak."""
    arg = (np.pi * frequency_hz * tau * dt_s) ** 2
    return (1.0 - 2.0 * arg) * np.exp(-arg)


def onset_wavelet(frequency_hz: float, dt_s: float, onset_level: float = 0.1) -> np.ndarray:
    """Causal Ricker: zero before sample 0, first sample at ``onset_level`` of the peak.

    The leading side lobe is cut where its magnitude first reaches
    ``onset_level`` so the arrival is a clear step out of the noise.
    """
    half = int(np.ceil(3.0 / (np.pi * frequency_hz * dt_s))) + 1
    tau = np.arange(-half, half + 1, dtype=np.float64)
    w = ricker(frequency_hz, dt_s, tau)
    start = int(np.flatnonzero(np.abs(w) >= onset_level)[0])
    return w[start:]


def moveout_times(spec: SynthSpec) -> np.ndarray:
    k = np.arange(spec.n_traces, dtype=np.float64)
    if spec.moveout == "linear":
        return spec.intercept + spec.slope * k
    if spec.moveout == "hyperbolic":
        return np.sqrt(spec.intercept**2 + (spec.slope * (k - spec.apex)) ** 2)
    raise SynthSpecError(f"unknown moveout model {spec.moveout!r}")


def generate_gather(spec: SynthSpec) -> tuple[Gather, np.ndarray]:
    """Render a gather whose first break on trace k sits at the rounded moveout time."""
    picks = round_half_away(moveout_times(spec)).astype(np.int64)
    if picks.min() < 0 or picks.max() >= spec.n_samples:
        raise SynthSpecError(
            f"moveout spans samples [{picks.min()}, {picks.max()}], outside [0, {spec.n_samples})"
        )
    rng = np.random.default_rng(spec.seed)
    dt = spec.sample_rate_ms * 1e-3
    w = onset_wavelet(spec.frequency_hz, dt, spec.onset_level)
    amp = np.zeros((spec.n_samples, spec.n_traces), dtype=np.float64)
    # weaker, delayed copies give each trace a short coda after the first break
    coda = [(0, 1.0), (len(w) + 3, -0.5), (2 * len(w) + 7, 0.25)]
    for k, p in enumerate(picks):
        gain = np.exp(-spec.decay * k)
        for lag, a in coda:
            s0 = p + lag
            if s0 >= spec.n_samples:
                break
            s1 = min(s0 + len(w), spec.n_samples)
            amp[s0:s1, k] += gain * a * w[: s1 - s0]
    if spec.noise_floor > 0:
        level = spec.noise_floor * np.exp(-spec.decay * np.arange(spec.n_traces))
        amp += rng.standard_normal(amp.shape) * level
    return Gather(amp.astype(np.float32), spec.gather_id, spec.sample_rate_ms), picks


def random_spec(rng: np.random.Generator, n_samples: int, n_traces: int, gather_id: str, **overrides) -> SynthSpec:
    """Draw a varied gather spec whose moveout stays inside the record."""
    moveout = "linear" if rng.random() < 0.5 else "hyperbolic"
    lo, hi = 0.08 * n_samples, 0.7 * n_samples
    if moveout == "linear":
        # choose first and last arrival, derive intercept and slope
        a, b = rng.uniform(lo, hi, size=2)
        intercept, slope, apex = a, (b - a) / max(n_traces - 1, 1), 0.0
    else:
        apex = rng.uniform(-0.5 * n_traces, 1.5 * n_traces)
        intercept = rng.uniform(lo, 0.5 * n_samples)
        far = max(abs(apex), abs(n_traces - 1 - apex), 1.0)
        t_far = rng.uniform(intercept, hi)
        slope = np.sqrt(max(t_far**2 - intercept**2, 0.0)) / far
    params = dict(
        n_samples=n_samples,
        n_traces=n_traces,
        frequency_hz=float(rng.uniform(15.0, 35.0)),
        moveout=moveout,
        intercept=float(intercept),
        slope=float(slope),
        apex=float(apex),
        noise_floor=float(rng.uniform(0.01, 0.05)),
        decay=float(rng.uniform(0.0, 0.02)),
        seed=int(rng.integers(2**31)),
        gather_id=gather_id,
    )
    params.update(overrides)
    return SynthSpec(**params)


def random_specs(n_gathers: int, n_samples: int = 256, n_traces: int = 64, seed: int = 0, **overrides) -> list:
    rng = np.random.default_rng(seed)
    return [random_spec(rng, n_samples, n_traces, f"g{j:05d}", **overrides) for j in range(n_gathers)]


def generate_dataset(
    n_gathers: int, n_samples: int = 256, n_traces: int = 64, seed: int = 0, workers: int = 1, **overrides
):
    """Return ``(gathers, picks)`` lists for ``n_gathers`` random specs.

    Specs are drawn up front from ``seed`` so the output does not depend on
    ``workers``.
    """
    specs = random_specs(n_gathers, n_samples, n_traces, seed, **overrides)
    if workers > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(generate_gather, specs, chunksize=8))
    else:
        results = [generate_gather(s) for s in specs]
    return [g for g, _ in results], [t for _, t in results]


def signal_noise_sigma(amplitude: np.ndarray, level: float) -> np.ndarray:
    """Per-trace noise std: the trace's peak absolute amplitude times ``level``."""
    return np.max(np.abs(np.asarray(amplitude, dtype=np.float64)), axis=0) * level


def add_signal_noise(gather: Gather, spec: NoiseSpec) -> Gather:
    if spec.level == 0:
        return replace(gather, amplitude=gather.amplitude.copy())
    rng = np.random.default_rng(spec.seed)
    sigma = signal_noise_sigma(gather.amplitude, spec.level)
    noise = rng.standard_normal(gather.amplitude.shape) * sigma[None, :]
    noisy = (gather.amplitude.astype(np.float64) + noise).astype(np.float32)
    return replace(gather, amplitude=noisy)


def _discrete_gaussian_pmf(variance: float) -> tuple[np.ndarray, np.ndarray]:
    """Support and pmf of the integer Gaussian whose variance is ``variance``.

    P(k) is proportional to exp(-k^2 / (2 s^2)); ``s`` is solved by bisection
    so the variance of the integer-valued law itself matches, rather than
    that of a continuous draw before rounding (which would add about 1/12).
    """
    half = int(np.ceil(12 * np.sqrt(variance))) + 2
    k = np.arange(-half, half + 1, dtype=np.float64)

    def pmf(log_s):
        w = np.exp(-(k**2) / (2 * np.exp(2 * log_s)))
        return w / w.sum()

    lo, hi = np.log(1e-3), np.log(np.sqrt(variance) + 10.0)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if (pmf(mid) * k**2).sum() < variance:
            lo = mid
        else:
            hi = mid
    return k.astype(np.int64), pmf(0.5 * (lo + hi))


def label_noise_offsets(n: int, variance: float, seed: int) -> np.ndarray:
    """Integer Gaussian pick perturbations with mean 0 and the given variance."""
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    if variance == 0:
        return np.zeros(n, dtype=np.int64)
    support, prob = _discrete_gaussian_pmf(variance)
    return np.random.default_rng(seed).choice(support, size=n, p=prob)


def add_label_noise(picks, variance: float, seed: int, n_samples: int) -> np.ndarray:
    """Shift each labeled pick by an integer Gaussian draw, clamped to the record."""
    t = validate_picks(picks, n_samples)
    if variance == 0:
        return t.copy()
    noisy = np.clip(t + label_noise_offsets(t.size, variance, seed), 0, n_samples - 1)
    return np.where(t == UNLABELED, UNLABELED, noisy)
