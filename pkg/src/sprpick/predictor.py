"""Per-pixel first-break probability predictors.

``UNetPredictor`` is the reference encoder-decoder. Anything exposing the
same ``predict`` / ``train_step`` / ``state`` surface can be trained by
:func:`sprpick.spr.train_spr`.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .types import ConsistencyError, ProbabilityMap, WindowedGather

CHECKPOINT_MAGIC = b"SPRPICK-CHECKPOINT 1\n"
PROB_CLAMP = 1e-12
_F32 = np.dtype("<f4")


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# loss on numpy probability maps


def _clamped(prob) -> np.ndarray:
    return np.clip(np.asarray(prob, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)


def bernoulli_terms(prob, target) -> np.ndarray:
    p = _clamped(prob)
    y = np.asarray(target, dtype=np.float64)
    return y * np.log(p) + (1.0 - y) * np.log1p(-p)


def bce_loss(prob, target, valid_mask) -> float:
    """Mean binary cross-entropy over the pixels flagged in ``valid_mask``."""
    prob = prob.prob if isinstance(prob, ProbabilityMap) else np.asarray(prob)
    target = np.asarray(target)
    valid = np.asarray(valid_mask, dtype=bool)
    if prob.shape != target.shape or prob.shape != valid.shape:
        raise ShapeError(f"shapes differ: prob {prob.shape}, target {target.shape}, mask {valid.shape}")
    n = int(valid.sum())
    if n == 0:
        raise DomainError("bce_loss over an empty valid set")
    return float(-bernoulli_terms(prob[valid], target[valid]).sum() / n)


def loss_mask(valid_mask, target) -> np.ndarray:
    """Valid pixels of labeled traces; unlabeled (all-zero) target columns are dropped."""
    valid = np.asarray(valid_mask, dtype=bool)
    labeled = np.asarray(target).any(axis=-2, keepdims=True)
    return valid & labeled


# --------------------------------------------------------------------------
# reference network


@dataclass(frozen=True)
class ReferenceNetConfig:
    depth: int = 3
    width: int = 16
    kernel_size: int = 3
    learning_rate: float = 1e-4
    seed: int = 0
    pos_weight: float = 1.0

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


def _block(cin: int, cout: int, k: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, padding=k // 2),
        nn.ReLU(),
        nn.Conv2d(cout, cout, k, padding=k // 2),
        nn.ReLU(),
    )


class UNet(nn.Module):
    """Encoder-decoder with skip connections and a one-channel logit head."""

    def __init__(self, depth: int = 3, width: int = 16, kernel_size: int = 3):
        super().__init__()
        ch = [width * 2**d for d in range(depth + 1)]
        k = kernel_size
        self.depth = depth
        self.down = nn.ModuleList(_block(1 if d == 0 else ch[d - 1], ch[d], k) for d in range(depth))
        self.bottom = _block(ch[depth - 1], ch[depth], k)
        self.upsample = nn.ModuleList(nn.ConvTranspose2d(ch[d + 1], ch[d], 2, stride=2) for d in reversed(range(depth)))
        self.up = nn.ModuleList(_block(2 * ch[d], ch[d], k) for d in reversed(range(depth)))
        self.head = nn.Conv2d(width, 1, 1)

    def reset_parameters(self, head_scale: float = 1.0) -> None:
        """He-uniform weights, zero biases; the logit head is scaled by ``head_scale``."""
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        nn.init.kaiming_uniform_(self.head.weight, nonlinearity="linear")
        with torch.no_grad():
            self.head.weight.mul_(head_scale)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottom(x)
        for upsample, block in zip(self.upsample, self.up):
            x = block(torch.cat([upsample(x), skips.pop()], dim=1))
        return self.head(x)[:, 0]


def normalize_input(data, valid) -> np.ndarray:
    """Zero the padding and scale each trace to unit peak amplitude."""
    x = np.where(valid, data, 0.0).astype(np.float32)
    peak = np.abs(x).max(axis=-2, keepdims=True)
    return x / np.where(peak > 0, peak, 1.0)


def _as_batch(windows) -> tuple[np.ndarray, np.ndarray]:
    # accept a single window, a list of windows, or a (data, valid) pair
    if isinstance(windows, WindowedGather):
        windows = [windows]
    if isinstance(windows, tuple):
        data, valid = windows
        return np.asarray(data, dtype=np.float32), np.asarray(valid, dtype=bool)
    data = np.stack([w.data for w in windows])
    valid = np.stack([w.valid_mask for w in windows])
    return data, valid


@dataclass
class PredictorState:
    """Flat snapshot of weights and Adam moments."""

    descriptor: dict
    params: np.ndarray
    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray
    step: int

    def __post_init__(self):
        n = int(sum(np.prod(shape) for _, shape in self.descriptor["params"]))
        for name in ("params", "exp_avg", "exp_avg_sq"):
            arr = getattr(self, name)
            if arr.size != n:
                raise ConsistencyError(f"{name}: {arr.size} values, architecture needs {n}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{name}: non-finite values in predictor state")

    def save(self, path) -> None:
        path = Path(path)
        header = dict(self.descriptor, step=int(self.step))
        payload = b"".join(
            [
                CHECKPOINT_MAGIC,
                json.dumps(header, sort_keys=True).encode() + b"\n",
                np.ascontiguousarray(self.params, dtype=_F32).tobytes(),
                np.ascontiguousarray(self.exp_avg, dtype=_F32).tobytes(),
                np.ascontiguousarray(self.exp_avg_sq, dtype=_F32).tobytes(),
            ]
        )
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(payload)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> PredictorState:
        raw = Path(path).read_bytes()
        if not raw.startswith(CHECKPOINT_MAGIC):
            raise ValueError(f"{path}: not a sprpick checkpoint (bad header)")
        rest = raw[len(CHECKPOINT_MAGIC) :]
        nl = rest.index(b"\n")
        header = json.loads(rest[:nl])
        body = np.frombuffer(rest[nl + 1 :], dtype=_F32)
        n = int(sum(np.prod(shape) for _, shape in header["params"]))
        if body.size != 3 * n:
            raise ValueError(f"{path}: payload holds {body.size} floats, expected {3 * n}")
        step = int(header.pop("step"))
        return cls(header, body[:n].copy(), body[n : 2 * n].copy(), body[2 * n :].copy(), step)


class Predictor:
    """Interface shared by trainable predictors."""

    def predict(self, windows) -> np.ndarray:
        """Probabilities in (0, 1) for a batch, shape ``(B, M', N')``."""
        raise NotImplementedError

    def forward(self, window: WindowedGather) -> ProbabilityMap:
        return ProbabilityMap(self.predict(window)[0], window.valid_mask.copy())

    def train_step(self, windows, targets, masks) -> tuple[float, np.ndarray]:
        """One optimizer step; returns the pre-step loss and pre-step probabilities."""
        raise NotImplementedError

    def fit_step(self, windows, targets, masks) -> float:
        return self.train_step(windows, targets, masks)[0]

    @property
    def step(self) -> int:
        raise NotImplementedError


class UNetPredictor(Predictor):
    def __init__(self, config: ReferenceNetConfig | None = None):
        # denormal activations late in training slow CPU convolutions severalfold
        torch.set_flush_denormal(True)
        self.config = config or ReferenceNetConfig()
        c = self.config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(c.seed)
            self.net = UNet(c.depth, c.width, c.kernel_size)
            self.net.reset_parameters()
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=c.learning_rate)
        self._step = 0

    @property
    def step(self) -> int:
        return self._step

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def _check_shape(self, data: np.ndarray) -> None:
        q = 2**self.config.depth
        if data.ndim != 3 or data.shape[1] % q or data.shape[2] % q:
            raise ShapeError(f"input {data.shape[1:]} not divisible by 2^depth={q}")

    def logits(self, windows) -> np.ndarray:
        data, valid = _as_batch(windows)
        self._check_shape(data)
        x = torch.from_numpy(normalize_input(data, valid))[:, None]
        with torch.no_grad():
            return self.net(x).double().numpy()

    def predict(self, windows) -> np.ndarray:
        return _sigmoid(self.logits(windows))

    def _loss(self, net, x, y, m):
        logits = net(x)
        per = F.binary_cross_entropy_with_logits(
            logits, y, reduction="none", pos_weight=torch.tensor(self.config.pos_weight, dtype=y.dtype)
        )
        return (per * m).sum() / m.sum(), logits

    def train_step(self, windows, targets, masks) -> tuple[float, np.ndarray]:
        data, valid = _as_batch(windows)
        self._check_shape(data)
        targets = np.asarray(targets, dtype=np.float32)
        masks = np.asarray(masks, dtype=bool) & valid
        if targets.shape != data.shape or masks.shape != data.shape:
            raise ShapeError(f"targets {targets.shape} / masks {masks.shape} do not match batch {data.shape}")
        if not masks.any():
            raise DomainError("train_step with no valid labeled pixels")
        x = torch.from_numpy(normalize_input(data, valid))[:, None]
        y = torch.from_numpy(targets)
        m = torch.from_numpy(masks.astype(np.float32))
        self.optimizer.zero_grad(set_to_none=True)
        loss, logits = self._loss(self.net, x, y, m)
        loss.backward()
        for name, p in self.net.named_parameters():
            bad = ~torch.isfinite(p.grad)
            if bad.any():
                raise NumericError(
                    f"non-finite gradient in {name}: {int(bad.sum())} of {p.numel()} entries "
                    f"(loss={float(loss.detach())}, step={self._step})"
                )
        self.optimizer.step()
        self._step += 1
        return float(loss.detach()), _sigmoid(logits.detach().double().numpy())

    # state ---------------------------------------------------------------

    def descriptor(self) -> dict:
        return {
            "arch": "unet",
            "config": asdict(self.config),
            "params": [[name, list(p.shape)] for name, p in self.net.named_parameters()],
        }

    def state(self) -> PredictorState:
        params, m1, m2 = [], [], []
        for p in self.net.parameters():
            st = self.optimizer.state.get(p, {})
            params.append(p.detach().numpy().ravel())
            m1.append(st["exp_avg"].numpy().ravel() if st else np.zeros(p.numel(), np.float32))
            m2.append(st["exp_avg_sq"].numpy().ravel() if st else np.zeros(p.numel(), np.float32))
        return PredictorState(
            self.descriptor(),
            np.concatenate(params).astype(np.float32),
            np.concatenate(m1).astype(np.float32),
            np.concatenate(m2).astype(np.float32),
            self._step,
        )

    @classmethod
    def from_state(cls, state: PredictorState) -> UNetPredictor:
        if state.descriptor.get("arch") != "unet":
            raise ValueError(f"unsupported architecture {state.descriptor.get('arch')!r}")
        pred = cls(ReferenceNetConfig(**state.descriptor["config"]))
        expected = pred.descriptor()["params"]
        if [[n, list(s)] for n, s in expected] != [[n, list(s)] for n, s in state.descriptor["params"]]:
            raise ConsistencyError("checkpoint parameter layout does not match the architecture")
        offset = 0
        with torch.no_grad():
            for p in pred.net.parameters():
                n = p.numel()
                p.copy_(torch.from_numpy(state.params[offset : offset + n].reshape(p.shape)))
                if state.step > 0:
                    pred.optimizer.state[p] = {
                        "step": torch.tensor(float(state.step)),
                        "exp_avg": torch.from_numpy(state.exp_avg[offset : offset + n].reshape(p.shape).copy()),
                        "exp_avg_sq": torch.from_numpy(state.exp_avg_sq[offset : offset + n].reshape(p.shape).copy()),
                    }
                offset += n
        pred._step = state.step
        return pred

    def save(self, path) -> None:
        self.state().save(path)

    @classmethod
    def load(cls, path) -> UNetPredictor:
        return cls.from_state(PredictorState.load(path))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    p = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    p[~pos] = ez / (1.0 + ez)
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def grad_check(
    predictor: UNetPredictor, data, valid, targets, masks=None, h: float = 1e-4, max_params: int = 5000
) -> float:
    """Max relative error between autograd and central differences of the loss.

    Runs on a float64 copy of the network, so the predictor is untouched.
    A coordinate whose forward and backward one-sided differences disagree
    has a ReLU or max-pool switch point within +-h; its central difference
    is then re-estimated with steps h/100 and h/10^4. A wrong gradient
    disagrees at every step size, so the fallback cannot hide one.
    """
    data, valid = _as_batch((data, valid))
    if data.ndim == 2:
        data, valid = data[None], valid[None]
    targets = np.asarray(targets, dtype=np.float64).reshape(data.shape)
    masks = loss_mask(valid, targets) if masks is None else np.asarray(masks, dtype=bool).reshape(data.shape)
    if predictor.n_params > max_params:
        raise ValueError(f"grad_check is meant for tiny nets: {predictor.n_params} > {max_params} parameters")
    net = copy.deepcopy(predictor.net).double()
    x = torch.from_numpy(normalize_input(data, valid).astype(np.float64))[:, None]
    y = torch.from_numpy(targets)
    m = torch.from_numpy(masks.astype(np.float64))

    def loss_fn() -> float:
        return float(predictor._loss(net, x, y, m)[0])

    net.zero_grad()
    loss, _ = predictor._loss(net, x, y, m)
    loss.backward()
    base = float(loss.detach())
    worst = 0.0
    with torch.no_grad():
        for p in net.parameters():
            analytic = p.grad.detach().clone().view(-1)
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = float(flat[j])
                a = float(analytic[j])
                for step in (h, h * 1e-2, h * 1e-4):
                    flat[j] = orig + step
                    up = loss_fn()
                    flat[j] = orig - step
                    down = loss_fn()
                    flat[j] = orig
                    fwd, bwd = (up - base) / step, (base - down) / step
                    if abs(fwd - bwd) <= 1e-3 * max(abs(fwd), abs(bwd), 1e-3):
                        break
                numeric = (up - down) / (2 * step)
                denom = max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, abs(a - numeric) / denom)
    return worst
