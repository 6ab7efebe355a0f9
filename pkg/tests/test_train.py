import numpy as np
import pytest

from conftest import toy_separable_set
from lucenet import model as M
from lucenet import tensor as T
from lucenet import train as TR
from lucenet.data import IDENTITY_AUGMENT
from lucenet.model import DenseNetConfig, build
from lucenet.train import TrainConfig, adam_step, fit, init_adam

TINY = DenseNetConfig(input_size=16, stem_filters=4, growth_rate=2,
                      block_layout=(1, 1), compression=0.5,
                      head_dims=(4, 4, 4), head_override=True)


def tiny_config(**kw):
    defaults = dict(epochs=2, batch_size=2, lr=1e-3, regime="retrained",
                    seed=0, augment=IDENTITY_AUGMENT)
    defaults.update(kw)
    return TrainConfig(**defaults)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    model = build(TINY, seed=0)
    before = {n: p.data.copy() for n, p in model.params.items()}
    state = init_adam(model)
    for p in model.params.values():
        p.grad = np.zeros_like(p.data)
    adam_step(model, state)
    for n, p in model.params.items():
        np.testing.assert_array_equal(p.data, before[n])


def test_adam_first_step_magnitude():
    # single scalar parameter, g=10: bias correction makes |step| ~ lr
    model = build(TINY, seed=0)
    state = init_adam(model, lr=1e-4)
    name = "head.out.b"
    before = model.params[name].data.copy()
    for n, p in model.params.items():
        p.grad = np.zeros_like(p.data)
    model.params[name].grad[:] = 10.0
    adam_step(model, state)
    delta = abs(model.params[name].data[0] - before[0])
    expected = 1e-4 * 10.0 / (10.0 + 1e-8)
    assert abs(delta - expected) < 1e-9


def test_adam_two_steps_match_scalar_trace():
    # independent scalar Adam recurrence, two iterations with constant g
    g, lr, b1, b2, eps = 0.3, 1e-2, 0.9, 0.999, 1e-8
    w, m, v = 0.5, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)

    model = build(TINY, seed=0)
    state = init_adam(model, lr=lr)
    name = "head.out.b"
    model.params[name].data[:] = 0.5
    for _ in range(2):
        for n, p in model.params.items():
            p.grad = np.zeros_like(p.data)
        model.params[name].grad[:] = g
        adam_step(model, state)
    assert state.t == 2
    assert abs(model.params[name].data[0] - w) < 1e-7


def test_adam_lr_zero_changes_nothing():
    model = build(TINY, seed=1)
    before = M.parameter_fingerprint(model)
    state = init_adam(model, lr=0.0)
    rng = np.random.default_rng(0)
    for p in model.params.values():
        p.grad = rng.standard_normal(p.data.shape).astype(np.float32)
    adam_step(model, state)
    assert M.parameter_fingerprint(model) == before


def test_adam_nonfinite_update_detected():
    model = build(TINY, seed=1)
    state = init_adam(model, lr=1e30)
    for p in model.params.values():
        p.grad = np.full(p.data.shape, 1e30, dtype=np.float32)
    with pytest.raises(T.NonFiniteError, match="adam_step"):
        adam_step(model, state)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def test_fit_zero_epochs_is_identity():
    model = build(TINY, seed=2)
    before = M.parameter_fingerprint(model)
    fit(model, toy_separable_set(), tiny_config(epochs=0))
    assert M.parameter_fingerprint(model) == before


def test_fit_reduces_loss_on_separable_set():
    model = build(TINY, seed=3)
    _, history = fit(model, toy_separable_set(), tiny_config(epochs=4))
    assert len(history.mean_loss) == 4
    assert history.mean_loss[-1] < history.mean_loss[0]


def test_fit_same_seed_is_bit_identical(tmp_path):
    runs = []
    for _ in range(2):
        model = build(TINY, seed=4)
        fit(model, toy_separable_set(), tiny_config(epochs=2, seed=9))
        runs.append(model)
    assert M.parameter_fingerprint(runs[0]) == M.parameter_fingerprint(runs[1])
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    M.save_checkpoint(runs[0], p1)
    M.save_checkpoint(runs[1], p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_fit_epoch_sees_each_sample_once(monkeypatch):
    seen = []

    original = TR.augment

    def spy(sample, params, rng):
        seen.append(sample.id)
        return original(sample, params, rng)

    monkeypatch.setattr(TR, "augment", spy)
    model = build(TINY, seed=5)
    train_set = toy_separable_set(n=7)
    fit(model, train_set, tiny_config(epochs=2, batch_size=3))
    per_epoch = [sorted(seen[:7]), sorted(seen[7:])]
    expected = sorted(s.id for s in train_set)
    assert per_epoch[0] == expected and per_epoch[1] == expected


def test_fit_single_class_warns():
    model = build(TINY, seed=6)
    single = [s for s in toy_separable_set() if s.label == "loose"]
    with pytest.warns(UserWarning, match="single-class"):
        fit(model, single, tiny_config(epochs=1))


def test_fit_empty_set_aborts():
    model = build(TINY, seed=6)
    with pytest.raises(ValueError, match="empty"):
        fit(model, [], tiny_config())


def test_fit_snapshots_are_frozen_copies():
    model = build(TINY, seed=7)
    _, history = fit(model, toy_separable_set(), tiny_config(epochs=3),
                     snapshot_epochs=(1, 3))
    assert sorted(history.snapshots) == [1, 3]
    assert (M.parameter_fingerprint(history.snapshots[3])
            == M.parameter_fingerprint(model))
    assert (M.parameter_fingerprint(history.snapshots[1])
            != M.parameter_fingerprint(model))


def test_history_csv_export(tmp_path):
    model = build(TINY, seed=8)
    _, history = fit(model, toy_separable_set(), tiny_config(epochs=2))
    path = tmp_path / "history.csv"
    TR.export_history_csv(history, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,mean_loss,seconds"
    assert len(lines) == 3


# ---------------------------------------------------------------------------
# freezing across training
# ---------------------------------------------------------------------------

def test_frozen_backbone_is_bit_identical_after_fit():
    model = build(TINY, seed=10)
    M.freeze_backbone(model)
    backbone_before = {n: model.params[n].data.tobytes()
                       for n in model.backbone_names()}
    head_before = {n: model.params[n].data.tobytes() for n in model.head_names()}
    fit(model, toy_separable_set(), tiny_config(regime="pretrained", epochs=2))
    for n, raw in backbone_before.items():
        assert model.params[n].data.tobytes() == raw
    assert any(model.params[n].data.tobytes() != raw
               for n, raw in head_before.items())


def test_unfreeze_then_step_moves_backbone():
    model = build(TINY, seed=11)
    M.freeze_backbone(model)
    M.unfreeze_all(model)
    backbone_before = {n: model.params[n].data.tobytes()
                       for n in model.backbone_names()}
    fit(model, toy_separable_set(), tiny_config(epochs=1))
    assert any(model.params[n].data.tobytes() != raw
               for n, raw in backbone_before.items())


def test_fit_regime_preconditions():
    model = build(TINY, seed=12)
    with pytest.raises(ValueError, match="frozen backbone"):
        fit(model, toy_separable_set(), tiny_config(regime="pretrained"))
    M.freeze_backbone(model)
    with pytest.raises(ValueError, match="no frozen"):
        fit(model, toy_separable_set(), tiny_config(regime="retrained"))


# ---------------------------------------------------------------------------
# pretext pretraining
# ---------------------------------------------------------------------------

def test_pretext_checkpoint_loads_and_is_accurate(pretext_checkpoint):
    path, accuracy = pretext_checkpoint
    assert accuracy >= 0.8
    model = M.build_from_checkpoint(path, head_seed=1)
    assert model.config == DenseNetConfig()
    assert set(model.params) == set(M.build(DenseNetConfig(), 0).params)


def test_weak_backbone_warns(tmp_path):
    from lucenet.train import PretextConfig, pretext_pretrain
    cfg = PretextConfig(n_images=40, holdout_frac=0.5, epochs=0, seed=3)
    with pytest.warns(UserWarning, match="weak backbone"):
        _, accuracy = pretext_pretrain(TINY, cfg, tmp_path / "weak.ckpt")
    assert accuracy < 0.8
