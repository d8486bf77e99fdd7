import numpy as np
import pytest

from sprpick.io import LatentPickStore, read_dataset, write_dataset
from sprpick.predictor import Predictor, ReferenceNetConfig, UNetPredictor
from sprpick.spr import SprConfig, pick_gather, refine_gather, train_baseline, train_spr
from sprpick.synth import add_label_noise, generate_dataset
from sprpick.types import UNLABELED, Gather

WINDOW = (32, 16)


@pytest.fixture
def tiny(tmp_path):
    gathers, picks = generate_dataset(8, 32, 16, seed=4)
    noisy = [add_label_noise(t, 3.0, j, 32) for j, t in enumerate(picks)]
    noisy[0][:3] = UNLABELED
    return write_dataset(tmp_path / "d", gathers, noisy)


def _net(seed=0, lr=1e-3):
    return UNetPredictor(ReferenceNetConfig(depth=2, width=4, learning_rate=lr, seed=seed))


def _manual(man):
    return {g: man.load_picks(g) for g in man.gather_ids}


class UniformHalf(Predictor):
    """Frozen predictor: constant 0.5 everywhere, no trainable state."""

    def __init__(self):
        self.steps = 0

    def train_step(self, windows, targets, masks):
        self.steps += 1
        return float(np.log(2.0)), np.full(np.asarray(targets).shape, 0.5)

    def predict(self, windows):
        return np.full((len(windows), *windows[0].data.shape), 0.5)

    @property
    def step(self):
        return self.steps


def test_smoke_two_epochs(tiny, tmp_path):
    run = tmp_path / "run"
    cfg = SprConfig(epochs=2, batch_size=3, window_shape=WINDOW)
    _, store = train_spr(tiny, _net(), cfg, LatentPickStore.from_manifest(tiny), run)
    lines = (run / "train_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,loss,latent_moved_count"
    assert len(lines) == 1 + 2 * 3  # 8 windows in batches of 3
    assert all(np.isfinite(float(r.split(",")[2])) for r in lines[1:])
    assert (run / "checkpoint.ckpt").is_file()
    assert store.epoch == 2
    back = LatentPickStore.load(run, tiny.gather_ids)
    for g in tiny.gather_ids:
        np.testing.assert_array_equal(back.picks[g], store.picks[g])
    # unlabeled traces stay unlabeled
    assert np.all(store.picks["g00000"][:3] == UNLABELED)


def test_tiny_gamma_keeps_manual_picks(tiny):
    cfg = SprConfig(gamma=1e-9, epochs=2, batch_size=4, window_shape=WINDOW)
    _, store = train_spr(tiny, _net(lr=1e-2), cfg, LatentPickStore.from_manifest(tiny))
    assert store.moved(_manual(tiny)) == 0


def test_baseline_store_equals_manual_after_every_epoch(tiny):
    manual = _manual(tiny)
    seen = []

    def check(epoch, predictor, store):
        seen.append(epoch)
        assert store.moved(manual) == 0

    train_baseline(tiny, _net(), SprConfig(epochs=3, window_shape=WINDOW), on_epoch=check)
    assert seen == [1, 2, 3]


def test_baseline_equals_spr_under_uniform_predictor(tiny):
    # at p = 0.5 everywhere the latent update returns the manual pick
    _, s1 = train_spr(tiny, UniformHalf(), SprConfig(epochs=2, window_shape=WINDOW), LatentPickStore.from_manifest(tiny))
    _, s2 = train_baseline(tiny, UniformHalf(), SprConfig(epochs=2, window_shape=WINDOW))
    for g in tiny.gather_ids:
        np.testing.assert_array_equal(s1.picks[g], s2.picks[g])


def test_unlabeled_batches_are_skipped(tmp_path):
    g = Gather(np.random.default_rng(0).standard_normal((32, 16)).astype(np.float32), "a")
    man = write_dataset(tmp_path, [g], [np.full(16, UNLABELED)])
    pred = UniformHalf()
    train_spr(man, pred, SprConfig(epochs=2, window_shape=WINDOW), LatentPickStore.from_manifest(man))
    assert pred.steps == 0


def test_training_is_deterministic(tiny):
    def go():
        pred, store = train_spr(tiny, _net(seed=3), SprConfig(epochs=2, window_shape=WINDOW), LatentPickStore.from_manifest(tiny))
        return pred.state().params.tobytes(), {k: v.tobytes() for k, v in store.picks.items()}

    assert go() == go()


def test_resume_matches_uninterrupted(tiny, tmp_path):
    cfg3 = SprConfig(epochs=3, batch_size=4, window_shape=WINDOW)
    full, full_store = train_spr(tiny, _net(), cfg3, LatentPickStore.from_manifest(tiny), tmp_path / "a")

    cfg1 = SprConfig(epochs=1, batch_size=4, window_shape=WINDOW)
    train_spr(tiny, _net(), cfg1, LatentPickStore.from_manifest(tiny), tmp_path / "b")
    resumed, res_store = train_spr(tiny, _net(), cfg3, LatentPickStore.from_manifest(tiny), tmp_path / "b")

    assert resumed.step == full.step
    assert resumed.state().params.tobytes() == full.state().params.tobytes()
    for g in tiny.gather_ids:
        np.testing.assert_array_equal(res_store.picks[g], full_store.picks[g])
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()


def test_gather_inference_shapes(tiny):
    pred = _net()
    g = tiny.load_gather("g00001")
    picks = pick_gather(pred, g, WINDOW)
    assert picks.shape == (16,)
    assert np.all((picks >= 0) & (picks < 32))
    refined = refine_gather(pred, g, tiny.load_picks("g00001"), 1e-9, WINDOW)
    np.testing.assert_array_equal(refined, tiny.load_picks("g00001"))


def test_reload_dataset_for_latent_store(tiny):
    man = read_dataset(tiny.root)
    assert LatentPickStore.from_manifest(man).moved(_manual(tiny)) == 0
