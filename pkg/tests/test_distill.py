"""Sandwich-scheme distillation training: gradient composition, early
stopping, controls, and closed-loop evaluation."""

import numpy as np
import pytest

from slimnav import distill, pathoracle, worldsim
from slimnav.distill import (DistillConfig, evaluate_navigation,
                             rmse_by_power, rmse_by_rho, rmse_on_dataset,
                             supervised_distillation_C,
                             supervised_distillation_S, train_navigation,
                             train_navigation_multi_seed)
from slimnav.errors import ConfigError
from slimnav.pathoracle import LabeledDataset
from slimnav.slimnet import MLPSpec, SlimMask, SlimmableMLP
from slimnav.worldsim import OBS_WIDTH, ObservationLayout


def toy_dataset(n, u, seed, depth=1):
    """Synthetic smooth regression task with the LabeledDataset shape."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, u))
    w = rng.normal(size=(u, 3)) / np.sqrt(u)
    y = np.tanh(x @ w)
    return LabeledDataset(fifo_vectors=x, targets=y, depth=depth)


@pytest.fixture(scope="module")
def toy():
    return (toy_dataset(500, 24, 0), toy_dataset(120, 24, 1),
            toy_dataset(120, 24, 2))


# ---------------------------------------------------------------------------
# config validation

def test_config_validation():
    with pytest.raises(ConfigError):
        DistillConfig(rho_min=0.0)
    with pytest.raises(ConfigError):
        DistillConfig(rho_min=1.5)
    with pytest.raises(ConfigError):
        DistillConfig(n_random_rhos=-1)
    with pytest.raises(ConfigError):
        DistillConfig(batch_size=0)
    with pytest.raises(ConfigError):
        DistillConfig(patience=0)


def test_train_rejects_bad_mode_and_empty_data(toy):
    train, val, _ = toy
    spec = MLPSpec(u=24, q=(8,), v=3)
    with pytest.raises(ConfigError):
        train_navigation(train, val, spec, DistillConfig(), mode="X")
    empty = LabeledDataset(fifo_vectors=np.zeros((0, 24)),
                           targets=np.zeros((0, 3)), depth=1)
    with pytest.raises(ConfigError):
        train_navigation(empty, val, spec, DistillConfig())


# ---------------------------------------------------------------------------
# sandwich gradient composition

def test_degenerate_sandwich_equals_plain_gradient():
    # with rho_min=1 and no random draws, every sandwich pass runs at full
    # width; the soft-target passes see zero error and contribute nothing
    spec = MLPSpec(u=10, q=(6, 4), v=2)
    net = SlimmableMLP(spec, seed=1)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 10))
    t = rng.normal(size=(16, 2))
    cfg = DistillConfig(rho_min=1.0, n_random_rhos=1)
    grads, hard = supervised_distillation_C(net, x, t, cfg, np.random.default_rng(5))
    y, cache = net.forward(x, return_cache=True)
    plain = net.backward(cache, distill._mse_grad(y, t))
    assert hard == pytest.approx(distill._mse(y, t))
    for a, b in zip(grads.weights, plain.weights):
        assert np.array_equal(a, b)
    for a, b in zip(grads.biases, plain.biases):
        assert np.array_equal(a, b)


def test_sandwich_adds_subwidth_gradients():
    # at rho_min < 1 the slim passes disagree with the soft targets, so the
    # summed gradients must differ from the plain full-width gradients
    spec = MLPSpec(u=10, q=(6, 4), v=2)
    net = SlimmableMLP(spec, seed=1)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 10))
    t = rng.normal(size=(16, 2))
    cfg = DistillConfig(rho_min=0.25, n_random_rhos=0)
    grads, _ = supervised_distillation_C(net, x, t, cfg, np.random.default_rng(5))
    y, cache = net.forward(x, return_cache=True)
    plain = net.backward(cache, distill._mse_grad(y, t))
    assert any(not np.array_equal(a, b)
               for a, b in zip(grads.weights, plain.weights))


def test_sandwich_sensing_masks_inputs():
    layout = ObservationLayout(1)
    spec = MLPSpec(u=layout.total_width, q=(12,), v=3)
    net = SlimmableMLP(spec, seed=2)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, spec.u))
    t = rng.normal(size=(8, 3))
    cfg = DistillConfig(n_random_powers=1)
    grads, _ = supervised_distillation_S(net, x, t, cfg,
                                         np.random.default_rng(3), layout)
    # rays outside every drawn power level never contribute: with the
    # minimal pair (1, 0) in the sandwich, the downward block is masked in
    # at least one pass, but the full pass keeps everything active, so all
    # first-layer rows still receive gradient
    assert grads.weights[0].shape == (spec.u, 12)
    assert np.any(grads.weights[0] != 0.0)


# ---------------------------------------------------------------------------
# training loop contract

def test_early_stopping_restores_best_snapshot(toy):
    train, val, _ = toy
    spec = MLPSpec(u=24, q=(16, 8), v=3)
    cfg = DistillConfig(max_epochs=40, patience=4, seed=3, batch_size=64)
    net, rep = train_navigation(train, val, spec, cfg)
    assert rep.val_losses[rep.best_epoch - 1] == min(rep.val_losses)
    # the returned network is the best snapshot, not the last iterate
    full = SlimMask(spec)
    recomputed = distill._mse(net.forward(val.fifo_vectors, full), val.targets)
    assert recomputed == pytest.approx(min(rep.val_losses), rel=1e-12)
    if rep.stopped_epoch < cfg.max_epochs:
        assert rep.stopped_epoch - rep.best_epoch >= cfg.patience
    assert len(rep.train_losses) == len(rep.val_losses) == rep.stopped_epoch


def test_training_is_deterministic(toy):
    train, val, _ = toy
    spec = MLPSpec(u=24, q=(12,), v=3)
    cfg = DistillConfig(max_epochs=5, seed=7)
    n1, _ = train_navigation(train, val, spec, cfg)
    n2, _ = train_navigation(train, val, spec, cfg)
    for a, b in zip(n1.weights, n2.weights):
        assert np.array_equal(a, b)
    n3, _ = train_navigation(train, val, spec,
                             DistillConfig(max_epochs=5, seed=8))
    assert any(not np.array_equal(a, b) for a, b in zip(n1.weights, n3.weights))


def test_multi_seed_keeps_best(toy):
    train, val, _ = toy
    spec = MLPSpec(u=24, q=(12,), v=3)
    cfg = DistillConfig(max_epochs=6, seed=0)
    net, best_rep, reports = train_navigation_multi_seed(
        train, val, spec, cfg, seeds=(0, 1, 2))
    assert len(reports) == 3
    assert {r.seed for r in reports} == {0, 1, 2}
    best = min(min(r.val_losses) for r in reports)
    assert min(best_rep.val_losses) == best
    full = SlimMask(spec)
    got = distill._mse(net.forward(val.fifo_vectors, full), val.targets)
    assert got == pytest.approx(best, rel=1e-12)


def test_distilled_beats_control_at_low_rho(toy):
    train, val, test = toy
    spec = MLPSpec(u=24, q=(16, 8), v=3)
    base = dict(max_epochs=30, patience=30, seed=4, batch_size=64)
    distilled, _ = train_navigation(train, val, spec, DistillConfig(**base))
    control, _ = train_navigation(train, val, spec,
                                  DistillConfig(distill=False, **base))
    r_d = rmse_on_dataset(distilled, test, SlimMask(spec, 0.25))
    r_c = rmse_on_dataset(control, test, SlimMask(spec, 0.25))
    assert r_d < r_c
    # at full width both are competent
    assert rmse_on_dataset(control, test) < 2 * rmse_on_dataset(distilled, test)


def test_training_in_sensing_mode(toy):
    layout = ObservationLayout(1)
    train = toy_dataset(400, layout.total_width, 10)
    val = toy_dataset(100, layout.total_width, 11)
    test = toy_dataset(100, layout.total_width, 12)
    spec = MLPSpec(u=layout.total_width, q=(16,), v=3)
    cfg = DistillConfig(max_epochs=8, seed=0, n_random_powers=1)
    net, rep = train_navigation(train, val, spec, cfg, mode="S",
                                layout=layout, test_ds=test)
    assert set(rep.rmse_by_power) == {(1, 0), (2, 1), (3, 2), (3, 3)}
    assert all(np.isfinite(v) for v in rep.rmse_by_power.values())
    assert rep.rmse_by_rho == {}


# ---------------------------------------------------------------------------
# metrics helpers

def test_rmse_helpers_match_manual(toy):
    _, _, test = toy
    spec = MLPSpec(u=24, q=(8,), v=3)
    net = SlimmableMLP(spec, seed=0)
    got = rmse_on_dataset(net, test)
    want = np.sqrt(np.mean((net.forward(test.fifo_vectors) - test.targets) ** 2))
    assert got == pytest.approx(want, rel=1e-12)
    table = rmse_by_rho(net, test)
    assert set(table) == {0.25, 0.5, 0.75, 1.0}
    got25 = rmse_on_dataset(net, test, SlimMask(spec, 0.25))
    assert table[0.25] == pytest.approx(got25, rel=1e-12)


def test_rmse_by_power_uses_input_masks():
    layout = ObservationLayout(1)
    test = toy_dataset(50, layout.total_width, 13)
    spec = MLPSpec(u=layout.total_width, q=(8,), v=3)
    net = SlimmableMLP(spec, seed=1)
    table = rmse_by_power(net, test, layout)
    assert len(table) == 4
    # masking away rays changes the prediction of an untrained network
    assert table[(1, 0)] != table[(3, 3)]


# ---------------------------------------------------------------------------
# closed-loop evaluation in an empty world

@pytest.fixture(scope="module")
def empty_world_net():
    grid = worldsim.generate_world((20, 20, 8), resolution=1.0)
    graph = pathoracle.build_graph(grid, vertical_locked=True)
    regions = pathoracle.partition_regions(grid, (0.6, 0.2, 0.2))
    sampler = pathoracle.TaskSampler(graph, regions, flight_z=3)
    rng = np.random.default_rng(0)
    paths = [sampler.sample("train", 6.0, rng).path for _ in range(40)]
    train = pathoracle.label_dataset(grid, paths, depth=4)
    vpaths = [sampler.sample("validation", 5.0, rng).path for _ in range(8)]
    val = pathoracle.label_dataset(grid, vpaths, depth=4)
    spec = MLPSpec(u=4 * OBS_WIDTH, q=(32, 16), v=3,
                   output_activation="tanh", output_scale=2.0)
    cfg = DistillConfig(max_epochs=40, patience=8, seed=0)
    net, _ = train_navigation(train, val, spec, cfg)
    tasks = [sampler.sample("test", 6.0, rng) for _ in range(10)]
    return grid, net, tasks


def test_evaluate_navigation_in_empty_world(empty_world_net):
    grid, net, tasks = empty_world_net
    rep = evaluate_navigation(net, grid, tasks, vertical_locked=True)
    assert rep.n_episodes == 10
    assert rep.success_rate == 1.0            # no obstacles to hit
    assert 0.5 <= rep.mean_length_ratio <= 2.0
    assert all(l.outcome == worldsim.REACHED for l in rep.episodes)


def test_evaluate_navigation_slim_still_flies(empty_world_net):
    grid, net, tasks = empty_world_net
    rep = evaluate_navigation(net, grid, tasks, rho=0.5, vertical_locked=True)
    assert rep.success_rate >= 0.8            # distilled sub-width keeps skill
