import csv
import math

import numpy as np
import pytest

from dualbind.data import Manifest, ManifestEntry
from dualbind.energy import EnergyModel
from dualbind.trainer import (
    CHECKPOINT_NAME,
    METRICS_NAME,
    Adam,
    NonFiniteLossError,
    TrainConfig,
    choose_labeled,
    fit,
    init_state,
    make_batches,
    run_experiment,
    select_checkpoint,
    train_epoch,
)

from helpers import random_complex

FAST = dict(hidden=6, layers=1, batch_size=4)


def build(n_train=8, n_unlabeled=4, n_val=2, n_test=2):
    data, entries = {}, []
    k = 0
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        for i in range(n):
            cid = f"{split}{i}"
            unl = split == "train" and i >= n_train - n_unlabeled
            aff = None if unl else float(np.sin(k) * 2 + 5)
            data[cid] = random_complex(3, 6, seed=k, cid=cid, affinity=aff, key=f"K{k}")
            entries.append(ManifestEntry(cid, split, not unl))
            k += 1
    return Manifest(entries), data


def params_of(model):
    return {k: v.copy() for k, v in model.state_arrays().items()}


def same_params(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


def test_dual_batches_partition_the_train_split():
    m, data = build()
    cfg = TrainConfig(mode="dual", **FAST)
    batches = make_batches(m, data, cfg, np.random.default_rng(0))
    seen = [c.id for b in batches for c, _ in b]
    assert sorted(seen) == sorted(e.id for e in m.entries if e.split == "train")
    assert [len(b) for b in batches] == [4, 4]
    flags = {c.id: lab for b in batches for c, lab in b}
    assert sum(flags.values()) == 4


def test_mse_only_uses_labeled_fraction():
    m, data = build(n_train=10, n_unlabeled=0)
    cfg = TrainConfig(mode="mse_only", labeled_fraction=0.5, **FAST)
    labeled = choose_labeled(m, data, cfg)
    assert len(labeled) == 5
    batches = make_batches(m, data, cfg, np.random.default_rng(0), labeled)
    assert sorted(c.id for b in batches for c, _ in b) == sorted(labeled)
    # same seed, other mode: the same labels are chosen
    assert choose_labeled(m, data, cfg.replace(mode="dual")) == labeled


def test_modes_without_labels_raise():
    m, data = build(n_train=4, n_unlabeled=4)
    for mode in ("dual", "mse_only"):
        with pytest.raises(ValueError, match="no labeled samples"):
            make_batches(m, data, TrainConfig(mode=mode, **FAST), np.random.default_rng(0))
    assert make_batches(m, data, TrainConfig(mode="dsm_only", **FAST), np.random.default_rng(0))


def test_dsm_only_reports_no_mse():
    m, data = build()
    cfg = TrainConfig(mode="dsm_only", **FAST)
    state = init_state(cfg, m, data)
    batches = make_batches(m, data, cfg, state.shuffle_rng)
    assert all(not lab for b in batches for _, lab in b)
    _, met = train_epoch(state, batches)
    assert met.l_mse is None and met.l_dsm > 0


def run_epochs(cfg, m, data, n):
    state = init_state(cfg, m, data)
    for _ in range(n):
        state, met = train_epoch(state, make_batches(m, data, cfg, state.shuffle_rng, state.labeled_ids))
    return state, met


def test_zero_lambda_dual_retraces_mse_only():
    m, data = build(n_unlabeled=0)
    a, _ = run_epochs(TrainConfig(mode="dual", lam=0.0, **FAST), m, data, 3)
    b, _ = run_epochs(TrainConfig(mode="mse_only", **FAST), m, data, 3)
    assert same_params(a.model.state_arrays(), b.model.state_arrays())


def test_zero_learning_rate_leaves_parameters():
    m, data = build(n_train=1, n_unlabeled=0)
    cfg = TrainConfig(mode="dual", learning_rate=0.0, **FAST)
    state = init_state(cfg, m, data)
    before = params_of(state.model)
    state, _ = train_epoch(state, make_batches(m, data, cfg, state.shuffle_rng))
    assert same_params(before, state.model.state_arrays())


def test_mse_only_ignores_unlabeled_samples():
    m, data = build(n_train=8, n_unlabeled=4)
    labeled_only = Manifest([e for e in m.entries if e.labeled or e.split != "train"])
    cfg = TrainConfig(mode="mse_only", **FAST)
    a, _ = run_epochs(cfg, m, data, 2)
    b, _ = run_epochs(cfg, labeled_only, data, 2)
    assert same_params(a.model.state_arrays(), b.model.state_arrays())


def test_dual_total_identity():
    from dualbind.losses import batch_loss

    m, data = build(n_unlabeled=0)
    model = EnergyModel(hidden=6, layers=1, seed=0)
    items = [(data[f"train{i}"], True) for i in range(4)]
    total, rep = batch_loss(model, items, "dual", 2.0, (0.1, 1.0), np.random.default_rng(0))
    assert abs(total.item() - (rep.l_mse + 2.0 * rep.l_dsm)) < 1e-12


def test_mse_only_overfit_loss_decreases():
    m, data = build(n_train=10, n_unlabeled=0)
    cfg = TrainConfig(mode="mse_only", learning_rate=1e-2, **FAST)
    state = init_state(cfg, m, data)
    losses = []
    for _ in range(50):
        state, met = train_epoch(state, make_batches(m, data, cfg, state.shuffle_rng))
        losses.append(met.l_mse)
    assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])


def test_adam_first_step_moves_by_lr():
    from dualbind.autodiff import Tensor

    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    opt.step([np.array([3.0, -0.5])])
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-8)


@pytest.mark.parametrize(
    "seq, expected",
    [([0.3, 0.5, 0.4], [1, 2]), ([0.2, 0.2, 0.2], [1]), ([math.nan, 0.1, math.nan, 0.05], [2])],
)
def test_checkpoint_selection_rule(tmp_path, seq, expected):
    m, data = build()
    state = init_state(TrainConfig(checkpoint_dir=str(tmp_path), **FAST), m, data)
    best = []
    for v in seq:
        state.epoch += 1
        select_checkpoint(state, v)
        best.append(state.best_val_pearson)
    assert state.checkpoint_epochs == expected
    assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))
    assert (tmp_path / CHECKPOINT_NAME).exists()
    _, meta = EnergyModel.load(tmp_path / CHECKPOINT_NAME)
    assert meta["epoch"] == expected[-1]


def test_all_nan_validation_never_selects():
    m, data = build()
    state = init_state(TrainConfig(**FAST), m, data)
    for _ in range(3):
        state.epoch += 1
        select_checkpoint(state, math.nan)
    assert state.checkpoint_epochs == [] and state.best_arrays is None


def test_fit_writes_metrics_and_is_deterministic(tmp_path):
    m, data = build()
    cfg = TrainConfig(epochs=3, checkpoint_dir=str(tmp_path / "ck"), **FAST)
    a = fit(cfg, m, data, out_dir=tmp_path)
    b = fit(cfg.replace(checkpoint_dir=None), m, data)
    assert same_params(a.model.state_arrays(), b.model.state_arrays())
    rows = list(csv.reader(open(tmp_path / METRICS_NAME)))
    assert rows[0] == ["epoch", "l_mse", "l_dsm", "total", "val_pearson"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    mse_only = fit(TrainConfig(mode="mse_only", epochs=1, **FAST), m, data, out_dir=tmp_path)
    assert mse_only.history[0].l_dsm is None
    assert list(csv.reader(open(tmp_path / METRICS_NAME)))[1][2] == "N/A"


def test_experiment_reports():
    m, data = build()
    rep = run_experiment(TrainConfig(mode="dsm_only", epochs=1, **FAST), m, data)
    assert rep.seeds == (0, 1, 2)
    assert rep.mean_std("rmse") is None and rep.to_json()["rmse"] == "N/A"
    rep = run_experiment(TrainConfig(mode="dual", epochs=1, **FAST), m, data, seeds=(5, 5, 5))
    assert all(rep.mean_std(k)[1] == 0.0 for k in ("pearson", "rmse", "spearman"))


def test_non_finite_loss_aborts_with_diagnostics():
    m, data = build(n_unlabeled=0)
    cfg = TrainConfig(mode="mse_only", **FAST)
    state = init_state(cfg, m, data)
    state.model.head["head.out_b"].data = np.array([np.inf])
    with pytest.raises(NonFiniteLossError) as err:
        train_epoch(state, make_batches(m, data, cfg, state.shuffle_rng))
    assert err.value.epoch == 1 and err.value.ids
    assert set(err.value.to_json()) == {"epoch", "ids", "sigmas", "detail"}


@pytest.mark.parametrize(
    "kw",
    [dict(mode="both"), dict(lam=-1.0), dict(sigma_range=(0.0, 1.0)), dict(sigma_range=(1.0, 0.5)), dict(labeled_fraction=0.0)],
)
def test_bad_train_config(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_json_round_trip():
    cfg = TrainConfig(mode="dsm_only", lam=0.5, seed=4)
    d = cfg.to_json()
    assert d["lambda"] == 0.5 and "lam" not in d
    assert TrainConfig.from_json(d) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_json({"modee": "dual"})
    assert TrainConfig().lam == 2.0 and TrainConfig().sigma_range == (0.1, 1.0)
