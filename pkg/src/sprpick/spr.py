"""Latent first-break model: Laplace labeling prior, Bernoulli likelihood,
alternating training, and the picking / refinement inference modes.

Every labeled trace carries exactly one latent first break, so the latent
update and the refinement both reduce to an independent 1-D search per
trace over the score

    f(i) = |t_k - i| / gamma - logit(p[i, k])

where ``t`` are the manual picks and ``p`` the predicted probabilities.
The column sum of ``log(1 - p)`` is the same for every candidate and drops
out.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import DatasetManifest, LatentPickStore
from .predictor import PROB_CLAMP, DomainError, Predictor, bernoulli_terms
from .types import (
    DEFAULT_WINDOW_SHAPE,
    UNLABELED,
    ConsistencyError,
    ProbabilityMap,
    pickset_to_mask,
    unwindow_picks,
    window_gather,
    window_picks,
)

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 5.0


@dataclass(frozen=True)
class SprConfig:
    gamma: float = DEFAULT_GAMMA
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    latent_update: bool = True
    warmup_epochs: int = 0
    window_shape: tuple[int, int] = DEFAULT_WINDOW_SHAPE

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")


def _check_gamma(gamma: float) -> None:
    if not gamma > 0:
        raise DomainError(f"gamma must be positive, got {gamma}")


def _unpack(prob, valid_mask):
    if isinstance(prob, ProbabilityMap):
        valid_mask = prob.valid_mask if valid_mask is None else valid_mask
        prob = prob.prob
    prob = np.asarray(prob, dtype=np.float64)
    valid = np.ones(prob.shape, dtype=bool) if valid_mask is None else np.asarray(valid_mask, dtype=bool)
    if valid.shape != prob.shape:
        raise ConsistencyError(f"valid mask {valid.shape} does not match probabilities {prob.shape}")
    return prob, valid


def logit(prob) -> np.ndarray:
    p = np.clip(np.asarray(prob, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return np.log(p) - np.log1p(-p)


# --------------------------------------------------------------------------
# probabilistic model


def laplace_log_prior(t, s, gamma: float) -> float:
    """Log Laplace labeling prior without its normalizing constant."""
    _check_gamma(gamma)
    t = np.asarray(t, dtype=np.int64)
    s = np.asarray(s, dtype=np.int64)
    if t.shape != s.shape:
        raise ConsistencyError(f"pick sets differ in length: {t.shape} vs {s.shape}")
    labeled = t != UNLABELED
    if np.any((s == UNLABELED) != ~labeled):
        raise ConsistencyError("manual and latent picks disagree on which traces are labeled")
    return float(-np.abs(t[labeled] - s[labeled]).sum() / gamma)


def bernoulli_loglik(prob, target, valid_mask=None) -> float:
    prob, valid = _unpack(prob, valid_mask)
    target = np.asarray(target)
    if target.shape != prob.shape:
        raise ConsistencyError(f"target {target.shape} does not match probabilities {prob.shape}")
    if not valid.any():
        raise DomainError("log-likelihood over an empty valid set")
    return float(bernoulli_terms(prob[valid], target[valid]).sum())


def joint_loglik(t, s, prob, target, gamma: float, valid_mask=None) -> float:
    """Prior plus likelihood; ``target`` must be the one-hot mask of ``s``."""
    p, _ = _unpack(prob, valid_mask)
    if not np.array_equal(np.asarray(target) != 0, pickset_to_mask(s, p.shape) != 0):
        raise ConsistencyError("latent mask is not the one-hot encoding of the latent picks")
    return laplace_log_prior(t, s, gamma) + bernoulli_loglik(prob, target, valid_mask)


def trace_scores(prob, t, gamma: float, valid_mask=None) -> np.ndarray:
    """Per-pixel score ``f``; invalid pixels and unlabeled traces are ``+inf``."""
    _check_gamma(gamma)
    prob, valid = _unpack(prob, valid_mask)
    t = np.asarray(t, dtype=np.int64)
    if t.size != prob.shape[1]:
        raise ConsistencyError(f"{t.size} picks for {prob.shape[1]} traces")
    i = np.arange(prob.shape[0])[:, None]
    f = np.abs(t[None, :] - i) / gamma - logit(prob)
    return np.where(valid & (t != UNLABELED)[None, :], f, np.inf)


def latent_update(prob, t, gamma: float, valid_mask=None) -> np.ndarray:
    """Most likely latent pick of each labeled trace given ``prob`` and manual picks ``t``.

    Ties go to the earliest sample. Unlabeled traces stay unlabeled.
    """
    prob, valid = _unpack(prob, valid_mask)
    t = np.asarray(t, dtype=np.int64)
    f = trace_scores(prob, t, gamma, valid)
    labeled = t != UNLABELED
    empty = np.flatnonzero(labeled & ~valid.any(axis=0))
    if empty.size:
        raise DomainError(f"trace {int(empty[0])} is labeled but has no valid samples")
    s = np.argmin(f, axis=0).astype(np.int64)
    return np.where(labeled, s, UNLABELED)


def pick(prob, valid_mask=None) -> np.ndarray:
    """Automatic picking: per-trace argmax over valid samples (earliest on ties)."""
    prob, valid = _unpack(prob, valid_mask)
    masked = np.where(valid, prob, -np.inf)
    out = np.argmax(masked, axis=0).astype(np.int64)
    out[~valid.any(axis=0)] = UNLABELED
    return out


def refine(prob, t, gamma: float, valid_mask=None) -> np.ndarray:
    """Manual-pick refinement; traces without a manual pick fall back to :func:`pick`."""
    prob, valid = _unpack(prob, valid_mask)
    t = np.asarray(t, dtype=np.int64)
    s = latent_update(prob, t, gamma, valid)
    return np.where(t == UNLABELED, pick(prob, valid), s)


# --------------------------------------------------------------------------
# training


class _Batches:
    """Windows of the training gathers, with manual picks cut per window."""

    def __init__(self, manifest: DatasetManifest, window_shape):
        self.items = []  # (gather_id, window index)
        self.windows = {}
        self.manual = {}
        for gid in manifest.gather_ids:
            g = manifest.load_gather(gid)
            wins = window_gather(g, window_shape)
            self.windows[gid] = wins
            self.manual[gid] = manifest.load_picks(gid)
            self.items.extend((gid, w) for w in range(len(wins)))

    def order(self, seed: int, epoch: int) -> list:
        rng = np.random.default_rng([seed, epoch])
        return [self.items[i] for i in rng.permutation(len(self.items))]


def _epoch_log_header(path: Path) -> None:
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("epoch,step,loss,latent_moved_count\n")


def train_spr(
    manifest: DatasetManifest,
    predictor: Predictor,
    config: SprConfig,
    store: LatentPickStore,
    run_dir=None,
    log_path=None,
    on_epoch=None,
) -> tuple[Predictor, LatentPickStore]:
    """Alternate network steps on the latent labels with latent-label updates.

    Each step predicts with the current weights, takes one gradient step on
    the current latent masks, then re-solves the latent picks of the batch
    traces from that same (pre-step) prediction. With ``run_dir`` the
    predictor and store are checkpointed after every epoch and a run is
    resumed from the last completed epoch.
    """
    expected = set(manifest.gather_ids)
    if set(store.picks) != expected:
        raise ConsistencyError("latent store does not cover exactly the training gathers")
    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt = run_dir / "checkpoint.ckpt" if run_dir is not None else None
    if log_path is None and run_dir is not None:
        log_path = run_dir / "train_log.csv"
    log_path = Path(log_path) if log_path is not None else None

    if ckpt is not None and ckpt.is_file() and (run_dir / "latent" / "EPOCH").is_file():
        saved = LatentPickStore.load(run_dir, expected_ids=expected)
        if saved.epoch > store.epoch and hasattr(type(predictor), "load"):
            predictor = type(predictor).load(ckpt)
            store = saved
            log.info("resuming from epoch %d", store.epoch)

    batches = _Batches(manifest, config.window_shape)
    if log_path is not None:
        _epoch_log_header(log_path)

    for epoch in range(store.epoch + 1, config.epochs + 1):
        order = batches.order(config.seed, epoch)
        rows = []
        for step, start in enumerate(range(0, len(order), config.batch_size), start=1):
            chunk = order[start : start + config.batch_size]
            wins = [batches.windows[g][w] for g, w in chunk]
            latent_w = [window_picks(store.picks[g], batches.windows[g])[w] for g, w in chunk]
            manual_w = [window_picks(batches.manual[g], batches.windows[g])[w] for g, w in chunk]
            shape = wins[0].data.shape
            targets = np.stack([pickset_to_mask(s, shape) for s in latent_w])
            labeled = np.stack([np.broadcast_to(t != UNLABELED, shape) for t in manual_w])
            masks = np.stack([w.valid_mask for w in wins]) & labeled
            if not masks.any():
                continue
            loss, prob = predictor.train_step(wins, targets, masks)
            moved = 0
            if config.latent_update and epoch > config.warmup_epochs:
                for b, (g, w) in enumerate(chunk):
                    win = wins[b]
                    s_new = latent_update(prob[b], manual_w[b], config.gamma, win.valid_mask)
                    moved += int(np.count_nonzero(s_new != latent_w[b]))
                    per_window = window_picks(store.picks[g], batches.windows[g])
                    per_window[w] = s_new
                    store.picks[g] = unwindow_picks(per_window, batches.windows[g])
            rows.append(f"{epoch},{step},{loss!r},{moved}\n")
        store.epoch = epoch
        if run_dir is not None:
            if hasattr(predictor, "state"):
                predictor.state().save(ckpt)
            store.save(run_dir)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.writelines(rows)
        if on_epoch is not None:
            on_epoch(epoch, predictor, store)
        log.info("epoch %d done: %d steps", epoch, len(rows))
    return predictor, store


def train_baseline(manifest, predictor, config: SprConfig, store=None, **kwargs):
    """Plain BCE on the manual picks: latent labels are never updated."""
    if store is None:
        store = LatentPickStore.from_manifest(manifest)
    cfg = SprConfig(**{**config.__dict__, "latent_update": False})
    return train_spr(manifest, predictor, cfg, store, **kwargs)


# --------------------------------------------------------------------------
# gather-level inference


def predict_gather(predictor: Predictor, gather, window_shape=DEFAULT_WINDOW_SHAPE):
    """Windows of ``gather`` with their probability maps."""
    wins = window_gather(gather, window_shape)
    probs = predictor.predict(wins)
    return wins, probs


def pick_gather(predictor: Predictor, gather, window_shape=DEFAULT_WINDOW_SHAPE) -> np.ndarray:
    wins, probs = predict_gather(predictor, gather, window_shape)
    return unwindow_picks([pick(p, w.valid_mask) for p, w in zip(probs, wins)], wins)


def refine_gather(
    predictor: Predictor, gather, manual_picks, gamma: float = DEFAULT_GAMMA, window_shape=DEFAULT_WINDOW_SHAPE
) -> np.ndarray:
    wins, probs = predict_gather(predictor, gather, window_shape)
    manual_w = window_picks(manual_picks, wins)
    return unwindow_picks([refine(p, t, gamma, w.valid_mask) for p, t, w in zip(probs, manual_w, wins)], wins)
