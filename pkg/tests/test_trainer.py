import copy

import numpy as np
import pytest

import dpsparse as dps
from dpsparse import trainer as trainer_mod
from oracles import plain_sgd


def mlp(seed=0):
    model = dps.build_model([8], [
        {"kind": "fully_connected", "out": 10}, {"kind": "relu"},
        {"kind": "fully_connected", "out": 3}])
    return dps.init_he_uniform(model, seed)


def cfg(**kw):
    base = dict(lr=0.5, sigma=1.0, clip=1.0, batch_size=32, steps=10, seed=0)
    base.update(kw)
    return dps.TrainConfig(**base)


# -- config validation -------------------------------------------------------

def test_config_exactly_one_privacy_mode():
    with pytest.raises(dps.ConfigurationError):
        dps.TrainConfig(lr=0.5, batch_size=8, steps=5)
    with pytest.raises(dps.ConfigurationError):
        dps.TrainConfig(lr=0.5, epsilon=1.0, sigma=1.0, batch_size=8, steps=5)
    dps.TrainConfig(lr=0.5, epsilon=1.0, batch_size=8, steps=5)


def test_config_exactly_one_batch_mode():
    with pytest.raises(dps.ConfigurationError):
        dps.TrainConfig(lr=0.5, sigma=1.0, steps=5)
    with pytest.raises(dps.ConfigurationError):
        dps.TrainConfig(lr=0.5, sigma=1.0, batch_size=8, q=0.1, steps=5)


def test_config_exactly_one_duration_mode():
    with pytest.raises(dps.ConfigurationError):
        dps.TrainConfig(lr=0.5, sigma=1.0, batch_size=8)
    with pytest.raises(dps.ConfigurationError):
        dps.TrainConfig(lr=0.5, sigma=1.0, batch_size=8, steps=5, epochs=1.0)


def test_config_value_checks():
    for bad in (dict(lr=0.0), dict(epsilon=-1.0, sigma=None),
                dict(delta=0.0), dict(clip=0.0), dict(prune_rate=1.0),
                dict(drop_rate=-0.5), dict(seed=-1),
                dict(drop_criterion="entropy")):
        kw = dict(lr=0.5, sigma=1.0, batch_size=8, steps=5)
        kw.update(bad)
        with pytest.raises(dps.ConfigurationError):
            dps.TrainConfig(**kw)


def test_resolve_modes(blob_data):
    train, _ = blob_data                     # 192 examples
    q, b, steps = cfg(batch_size=32, steps=10).resolve(len(train))
    assert (q, b, steps) == (32 / 192, 32, 10)
    q, b, steps = cfg(batch_size=None, q=0.25, steps=None,
                      epochs=2.0).resolve(len(train))
    assert (q, b, steps) == (0.25, 48, 8)
    with pytest.raises(dps.ConfigurationError):
        cfg(batch_size=500).resolve(len(train))


# -- update mechanics ---------------------------------------------------------

def test_apply_selected_update_touches_only_selected():
    model = mlp()
    before = model.theta.copy()
    sel = model.mask_from([3, 17, 40])
    dps.apply_selected_update(model, sel, np.array([1.0, -2.0, 0.5]))
    changed = np.flatnonzero(model.theta != before)
    assert changed.tolist() == [3, 17, 40]
    with pytest.raises(dps.ConfigurationError):
        dps.apply_selected_update(model, sel, np.zeros(2))


def test_freeze_complement_validates_ownership():
    model, other = mlp(), dps.init_he_uniform(
        dps.build_model([4], [{"kind": "fully_connected", "out": 2}]), 0)
    dps.freeze_complement(model, model.empty_mask())
    with pytest.raises(dps.ConfigurationError):
        dps.freeze_complement(model, other.full_mask())


def test_evaluate_against_hand_count(blob_data):
    train, test = blob_data
    model = mlp(3)
    acc = dps.evaluate(model, test, batch_size=7)
    pred = np.argmax(model.forward(test.images), axis=1)
    assert acc == (pred == test.labels).mean()


# -- the loop invariants -----------------------------------------------------

def test_frozen_coordinates_bitwise(blob_data):
    # theta outside the selected set never moves, pruned ids never move
    train, _ = blob_data
    model = mlp(1)
    snapshots = []

    def hook(state, info):
        snapshots.append((model.theta.copy(), info["selected"],
                          info["dropped"]))

    out = dps.dp_ssgd_train(
        cfg(steps=40, drop_rate=0.6, prune_criterion="random",
            prune_rate=0.3, sigma=0.7), model, train, step_hook=hook)
    pruned = out.state.pruned
    prev = None
    for theta_after, selected, dropped in snapshots:
        if prev is not None:
            untouched = np.setdiff1d(np.arange(model.n_weights),
                                     selected.indices)
            assert np.array_equal(theta_after[untouched], prev[untouched])
        assert (theta_after[pruned.indices] == 0.0).all()
        assert len(selected.intersection(dropped)) == 0
        prev = theta_after


def test_degenerate_run_is_plain_sgd(blob_data):
    # rates 0, sigma 0, huge clip: bit-identical to the no-DP reference
    train, _ = blob_data
    seed, steps, lr = 5, 60, 0.5
    q = 32 / len(train)
    model = mlp(seed)
    reference = mlp(seed)
    assert np.array_equal(model.theta, reference.theta)

    out = dps.dp_ssgd_train(
        dps.TrainConfig(lr=lr, sigma=0.0, clip=1e9, q=q, steps=steps,
                        seed=seed), model, train)
    want = plain_sgd(reference, train.images, train.labels,
                     dps.poisson_batches(train, q, dps.batch_rng(seed)),
                     lr, b_nom=32, steps=steps)
    assert np.array_equal(model.theta, want)


def test_budget_guard_stops_overrun(blob_data, tmp_path):
    # sigma calibrated for 10 steps cannot cover 60 under the same target:
    # resuming with a longer horizon must trip the guard instead of quietly
    # exceeding epsilon
    train, _ = blob_data
    short = dps.dp_ssgd_train(
        dps.TrainConfig(lr=0.5, epsilon=0.8, delta=1e-5, batch_size=32,
                        steps=10, seed=0), mlp(0), train)
    assert short.final_eps <= 0.8 + 1e-9
    p = tmp_path / "ck.npz"
    dps.save_checkpoint(p, short.state)
    restored = dps.load_checkpoint(p)
    with pytest.raises(dps.ConfigurationError, match="budget"):
        dps.dp_ssgd_train(
            dps.TrainConfig(lr=0.5, epsilon=0.8, delta=1e-5, batch_size=32,
                            steps=60, seed=0, eval_every=5),
            restored["model"], train, resume=restored["state"])


def test_metrics_rows_and_eps_monotone(blob_data):
    train, test = blob_data
    out = dps.dp_ssgd_train(cfg(epsilon=2.0, delta=1e-5, sigma=None,
                                steps=24, eval_every=6),
                            mlp(2), train, test)
    assert [r["step"] for r in out.rows] == [6, 12, 18, 24]
    eps = [r["eps_so_far"] for r in out.rows]
    assert all(a <= b + 1e-12 for a, b in zip(eps, eps[1:]))
    assert out.rows[-1]["eps_so_far"] == out.final_eps
    for row in out.rows:
        assert set(row) == set(trainer_mod.METRICS_COLUMNS)


def test_fixed_batch_mode(blob_data):
    train, _ = blob_data
    sizes = []
    out = dps.dp_ssgd_train(cfg(steps=8, poisson=False),
                            mlp(4), train,
                            step_hook=lambda s, i: sizes.append(i["batch_size"]))
    assert sizes == [32] * 8


def test_divergence_dumps_and_raises(blob_data, tmp_path):
    train, _ = blob_data
    model = mlp(0)
    model.theta[:] = 1e200              # loss goes non-finite immediately
    dump = tmp_path / "dump.npz"
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(dps.NumericalError, match="diverged|non-finite"):
            dps.dp_ssgd_train(cfg(lr=10.0, steps=5), model, train,
                              dump_path=str(dump))
    assert dump.exists()
    back = dps.load_checkpoint(str(dump))
    assert back["state"].step == 0


def test_extreme_prune_rate_leaves_live_weights(blob_data):
    # per-layer floors mean pruning can never empty a layer, so even a 0.99
    # rate must leave trainable weights and the run must proceed
    train, _ = blob_data
    model = mlp(0)
    total = model.theta.size
    out = dps.dp_ssgd_train(cfg(steps=2, prune_rate=0.99,
                                prune_criterion="random"), model, train)
    assert 0 < len(out.state.pruned) < total
    for (start, stop), n_pruned in zip(out.state.pruned.layer_bounds,
                                       out.state.pruned.per_layer_counts):
        assert n_pruned < stop - start   # every layer keeps a live weight


# -- metrics file and checkpoints --------------------------------------------

def test_metrics_csv_bytes_stable(tmp_path, blob_data):
    train, test = blob_data
    paths = []
    for name in ("a.csv", "b.csv"):
        out = dps.dp_ssgd_train(cfg(steps=12, drop_rate=0.4, sigma=0.9),
                                mlp(6), train, test)
        p = tmp_path / name
        dps.write_metrics_csv(out.rows, p)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    header = paths[0].read_text().splitlines()[0]
    assert header == ",".join(trainer_mod.METRICS_COLUMNS)


def test_checkpoint_round_trip(tmp_path, blob_data):
    train, _ = blob_data
    model = mlp(8)
    out = dps.dp_ssgd_train(cfg(steps=15, prune_criterion="random",
                                prune_rate=0.25, epsilon=1.5, delta=1e-5,
                                sigma=None), model, train)
    p = tmp_path / "ck.npz"
    dps.save_checkpoint(p, out.state, norm_mean=0.25, norm_std=2.0)
    back = dps.load_checkpoint(p)
    assert np.array_equal(back["model"].theta, model.theta)
    assert np.array_equal(back["state"].pruned.indices,
                          out.state.pruned.indices)
    assert back["state"].step == 15
    assert back["norm_mean"] == 0.25 and back["norm_std"] == 2.0
    acct = back["state"].accountant
    assert np.array_equal(acct.rdp_eps, out.state.accountant.rdp_eps)
    assert acct.per_step is None        # recomputed lazily on resume


def test_checkpoint_version_gate(tmp_path, blob_data):
    train, _ = blob_data
    out = dps.dp_ssgd_train(cfg(steps=2), mlp(0), train)
    p = tmp_path / "ck.npz"
    dps.save_checkpoint(p, out.state)
    data = dict(np.load(p, allow_pickle=False))
    data["version"] = np.int64(99)
    np.savez(p, **data)
    with pytest.raises(dps.ConfigurationError, match="version"):
        dps.load_checkpoint(p)


def test_resume_matches_straight_run(tmp_path, blob_data):
    train, _ = blob_data
    straight_model = mlp(9)
    straight = dps.dp_ssgd_train(cfg(steps=20, drop_rate=0.5, sigma=0.8),
                                 straight_model, train)

    model = mlp(9)
    half = dps.dp_ssgd_train(cfg(steps=10, drop_rate=0.5, sigma=0.8),
                             model, train)
    p = tmp_path / "half.npz"
    dps.save_checkpoint(p, half.state)
    restored = dps.load_checkpoint(p)
    dps.dp_ssgd_train(cfg(steps=20, drop_rate=0.5, sigma=0.8),
                      restored["model"], train, resume=restored["state"])
    assert np.array_equal(restored["model"].theta, straight_model.theta)
