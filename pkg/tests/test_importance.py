"""Tests for activation statistics, neuron importance and the baseline importances."""

import numpy as np
import pandas as pd
import pytest

from app.core import functional as F
from app.data.datasets import Dataset
from app.data.tasks import TaskSpec
from app.errors import ContractError, DegenerateDistributionError, StateError
from app.importance.activation_stats import ActivationStats, accumulate_activation_stats, collect_activation_stats
from app.importance.baselines import PathIntegralTrace, ewc_fisher, mas_importance, si_path_integral
from app.importance.neuron_importance import (
    ImportanceMap,
    expand_to_weights,
    importance_from_stats,
    layer_importance_distribution,
    merge_task_importance,
    neuron_importance,
)
from app.network.config import NetworkConfig
from app.network.multihead import NeuronGroup, build_network
from tests.conftest import DATA_DIR, requires_mnist


def stats_of(layer_values):
    """Stats built from a single batch per layer."""
    summary = {layer: np.asarray(values, dtype=float) for layer, values in layer_values.items()}
    return accumulate_activation_stats(ActivationStats(), summary)


# =============================================================================
# Streaming statistics
# =============================================================================

def test_stream_two_then_four():
    stats = accumulate_activation_stats(ActivationStats(), {"l": np.array([[2.0]])})
    stats = accumulate_activation_stats(stats, {"l": np.array([[4.0]])})
    assert stats.count == 2
    assert stats.mean["l"][0] == pytest.approx(3.0)
    assert stats.variance()["l"][0] == pytest.approx(1.0)


def test_single_instance_has_zero_variance():
    stats = stats_of({"l": [[5.0, 1.0]]})
    np.testing.assert_array_equal(stats.variance()["l"], [0.0, 0.0])


def test_streaming_equals_two_pass(rng):
    values = rng.exponential(size=(10000, 3))
    stats = ActivationStats()
    start = 0
    for size in rng.integers(1, 400, size=200):
        stats = accumulate_activation_stats(stats, {"l": values[start:start + size]})
        start += size
        if start >= len(values):
            break
    seen = values[:min(start, len(values))]
    assert stats.count == len(seen)
    np.testing.assert_allclose(stats.mean["l"], seen.mean(axis=0), rtol=0, atol=1e-9)
    np.testing.assert_allclose(stats.variance()["l"], seen.var(axis=0), rtol=0, atol=1e-9)


def test_accumulate_does_not_mutate_input():
    stats = stats_of({"l": [[1.0], [3.0]]})
    before = stats.copy()
    accumulate_activation_stats(stats, {"l": np.array([[10.0]])})
    assert stats.count == before.count
    np.testing.assert_array_equal(stats.mean["l"], before.mean["l"])


def test_neuron_set_mismatch():
    stats = stats_of({"a": [[1.0, 2.0]]})
    with pytest.raises(ContractError):
        accumulate_activation_stats(stats, {"b": np.array([[1.0, 2.0]])})
    with pytest.raises(ContractError):
        accumulate_activation_stats(stats, {"a": np.array([[1.0, 2.0, 3.0]])})


def test_collect_matches_manual_summary(tiny_mlp_config, rng):
    net = build_network(tiny_mlp_config).add_head("t")
    x = rng.normal(size=(50, 6))
    stats = collect_activation_stats(net, x, "t", batch_size=16)
    _, summary = net.forward_with_activations(x, "t")
    assert stats.count == 50
    for layer in summary:
        np.testing.assert_allclose(stats.mean[layer], summary[layer].mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(stats.std()[layer], summary[layer].std(axis=0), atol=1e-9)


# =============================================================================
# Neuron importance
# =============================================================================

def test_constant_activation_gives_c_over_epsilon():
    omega = neuron_importance(stats_of({"l": [[2.0], [2.0], [2.0]]}), epsilon=1e-6)
    assert omega["l"][0] == pytest.approx(2.0 / 1e-6)


def test_one_and_three():
    omega = neuron_importance(stats_of({"l": [[1.0], [3.0]]}), epsilon=1e-6)
    assert omega["l"][0] == pytest.approx(2.0 / (1.0 + 1e-6))


def test_all_zero_activations_give_zero():
    omega = neuron_importance(stats_of({"l": np.zeros((4, 3))}))
    np.testing.assert_array_equal(omega["l"], np.zeros(3))


def test_mean_only_normalization():
    omega = neuron_importance(stats_of({"l": [[1.0], [3.0]]}), normalize="mean")
    assert omega["l"][0] == pytest.approx(2.0)


def test_empty_stats_is_a_state_error():
    with pytest.raises(StateError):
        neuron_importance(ActivationStats())


def test_smaller_epsilon_never_decreases_importance(rng):
    values = np.concatenate([rng.uniform(size=(20, 3)), np.full((20, 2), 0.7)], axis=1)
    stats = stats_of({"l": values})
    coarse = neuron_importance(stats, epsilon=1e-3)["l"]
    fine = neuron_importance(stats, epsilon=1e-8)["l"]
    assert (fine >= coarse).all()
    np.testing.assert_allclose(fine[:3], coarse[:3], rtol=1e-2)


def test_importance_matches_two_pass_oracle(rng):
    for _ in range(20):
        neurons = int(rng.integers(1, 6))
        values = np.maximum(rng.normal(loc=0.5, size=(int(rng.integers(2, 120)), neurons)), 0.0)
        cuts = np.sort(rng.choice(np.arange(1, len(values)), size=min(3, len(values) - 1), replace=False))
        stats = ActivationStats()
        for chunk in np.split(values, cuts):
            stats = accumulate_activation_stats(stats, {"l": chunk})
        epsilon = float(rng.choice([1e-6, 1e-3, 0.1]))
        omega = neuron_importance(stats, epsilon=epsilon)["l"]
        expected = [np.mean(values[:, j]) / (np.std(values[:, j], ddof=0) + epsilon) for j in range(neurons)]
        np.testing.assert_allclose(omega, expected, rtol=0, atol=1e-9)


# =============================================================================
# Expansion to weights
# =============================================================================

def test_dense_neuron_importance_fills_incoming_column_and_bias():
    group = NeuronGroup("trunk.0", "trunk.0.weight", "trunk.0.bias", 3, 1, 4, (4, 3))
    expanded = expand_to_weights({"trunk.0": np.array([1.0, 5.0, 2.0])}, [group])
    np.testing.assert_array_equal(expanded["trunk.0.weight"][:, 1], np.full(4, 5.0))
    assert expanded["trunk.0.bias"][1] == 5.0


def test_conv_channel_importance_fills_its_kernel():
    group = NeuronGroup("trunk.0", "trunk.0.weight", "trunk.0.bias", 2, 0, 27, (2, 3, 3, 3))
    expanded = expand_to_weights({"trunk.0": np.array([2.0, 0.5])}, [group])
    np.testing.assert_array_equal(expanded["trunk.0.weight"][0], np.full((3, 3, 3), 2.0))
    np.testing.assert_array_equal(expanded["trunk.0.weight"][1], np.full((3, 3, 3), 0.5))


def test_expanded_total_counts_fan_in_plus_bias(tiny_conv_config, rng):
    net = build_network(tiny_conv_config)
    groups = net.neuron_groups()
    omega = {g.layer: rng.uniform(size=g.neurons) for g in groups}
    expanded = expand_to_weights(omega, groups)
    assert set(expanded) == set(net.trunk_param_ids)
    expected = sum(np.sum(omega[g.layer] * (g.fan_in + 1)) for g in groups)
    assert sum(v.sum() for v in expanded.values()) == pytest.approx(expected, rel=1e-12)
    again = expand_to_weights(omega, groups)
    for pid in expanded:
        np.testing.assert_array_equal(expanded[pid], again[pid])


def test_uncovered_layer_is_a_contract_error(tiny_mlp_config):
    groups = build_network(tiny_mlp_config).neuron_groups()
    with pytest.raises(ContractError):
        expand_to_weights({"trunk.0": np.ones(5)}, groups)


# =============================================================================
# Merging and layer distribution
# =============================================================================

def test_max_merge():
    merged = merge_task_importance(ImportanceMap({"w": np.array([1.0, 4.0])}),
                                   ImportanceMap({"w": np.array([3.0, 2.0])}), "max")
    np.testing.assert_array_equal(merged.params["w"], [3.0, 4.0])


def test_merge_with_zero_prev_is_new(rng):
    new = ImportanceMap({"w": rng.uniform(size=5)})
    merged = merge_task_importance(ImportanceMap({"w": np.zeros(5)}), new)
    np.testing.assert_array_equal(merged.params["w"], new.params["w"])


def test_sum_and_replace_policies(rng):
    prev = ImportanceMap({"a": rng.uniform(size=(3, 2)), "b": rng.uniform(size=2)})
    new = ImportanceMap({"a": rng.uniform(size=(3, 2)), "b": rng.uniform(size=2)})
    summed = merge_task_importance(prev, new, "sum")
    replaced = merge_task_importance(prev, new, "replace")
    maxed = merge_task_importance(prev, new, "max")
    for pid in ("a", "b"):
        np.testing.assert_allclose(summed.params[pid], prev.params[pid] + new.params[pid])
        np.testing.assert_array_equal(replaced.params[pid], new.params[pid])
        assert (maxed.params[pid] >= prev.params[pid]).all() and (maxed.params[pid] >= new.params[pid]).all()


def test_merge_key_mismatch():
    with pytest.raises(ContractError):
        merge_task_importance(ImportanceMap({"a": np.ones(1)}), ImportanceMap({"b": np.ones(1)}))


def test_equal_layer_means_split_evenly():
    shares = layer_importance_distribution(ImportanceMap({
        "trunk.0.weight": np.full((4, 2), 3.0), "trunk.0.bias": np.full(2, 3.0),
        "trunk.1.weight": np.full((2, 2), 3.0), "trunk.1.bias": np.full(2, 3.0),
    }))
    np.testing.assert_allclose(shares.to_numpy(), [0.5, 0.5])
    assert list(shares.index) == ["trunk.0", "trunk.1"]


def test_shares_sum_to_one(tiny_conv_config, rng):
    net = build_network(tiny_conv_config)
    shares = layer_importance_distribution(
        ImportanceMap({pid: rng.uniform(size=net.params[pid].shape) for pid in net.trunk_param_ids})
    )
    assert shares.sum() == pytest.approx(1.0, abs=1e-12)


def test_all_zero_map_is_degenerate():
    with pytest.raises(DegenerateDistributionError):
        layer_importance_distribution(ImportanceMap({"trunk.0.weight": np.zeros(3)}))


def test_std_normalization_flattens_layer_shares():
    # First layer: large but noisy activations. Second layer: small, steady ones.
    stats = stats_of({
        "trunk.0": [[0.0, 0.0], [4.0, 4.0]],
        "trunk.1": [[0.3, 0.3], [0.7, 0.7]],
    })
    groups = [
        NeuronGroup("trunk.0", "trunk.0.weight", "trunk.0.bias", 2, 1, 3, (3, 2)),
        NeuronGroup("trunk.1", "trunk.1.weight", "trunk.1.bias", 2, 1, 2, (2, 2)),
    ]
    ours = layer_importance_distribution(importance_from_stats(stats, groups, normalize="std"))
    mean_only = layer_importance_distribution(importance_from_stats(stats, groups, normalize="mean"))
    assert ours["trunk.0"] < mean_only["trunk.0"]
    assert ours.max() < mean_only.max()


@pytest.mark.slow
@requires_mnist
def test_trained_conv_trunk_spreads_importance_across_layers():
    from app.data.datasets import load_mnist
    from app.training.config import TrainConfig
    from app.training.trainer import ContinualTrainer

    train, _ = load_mnist(DATA_DIR)
    images = Dataset(train.features[:3000].reshape(-1, 1, 28, 28), train.labels[:3000], "train", 10)
    task = TaskSpec(task_id=0, name="mnist", kind="classes", train_source=images, test_source=images,
                    num_classes=10, classes=tuple(range(10)))
    net = build_network(NetworkConfig(kind="conv6", input_shape=(1, 28, 28), channels=(8, 8, 16, 16, 32, 32),
                                      dense_width=64, classes_per_head=10, seed=0))
    trainer = ContinualTrainer(net, TrainConfig(alpha=0.0, epochs=3, batch_size=64, lr=0.001, method="none",
                                                reinit=False))
    trainer.train_task(task)

    features, _ = task.train_data()
    stats = collect_activation_stats(net, features, "mnist")
    conv_groups = [group for group in net.neuron_groups() if len(group.weight_shape) == 4]
    conv_stats = ActivationStats(count=stats.count,
                                 mean={g.layer: stats.mean[g.layer] for g in conv_groups},
                                 m2={g.layer: stats.m2[g.layer] for g in conv_groups})
    ours = layer_importance_distribution(importance_from_stats(conv_stats, conv_groups, normalize="std"))
    mean_only = layer_importance_distribution(importance_from_stats(conv_stats, conv_groups, normalize="mean"))
    assert ours["trunk.0"] < mean_only["trunk.0"]
    assert ours.max() < mean_only.max()


def test_importance_export(tmp_path):
    importance = ImportanceMap({"trunk.0.weight": np.array([[1.0, 2.0]]), "trunk.0.bias": np.array([1.0, 2.0])})
    frame = pd.read_csv(importance.save(tmp_path / "imp.csv"))
    assert list(frame.columns) == ["param_id", "layer", "index", "importance"]
    assert len(frame) == 4 and set(frame["layer"]) == {"trunk.0"}


# =============================================================================
# Baselines
# =============================================================================

def test_ewc_single_datum_matches_hand_gradient(rng):
    net = build_network(NetworkConfig(kind="mlp", input_shape=(3,), hidden=(4,), classes_per_head=2, seed=1))
    net.add_head("t")
    x = rng.normal(size=(1, 3))
    y = np.array([1])

    fisher = ewc_fisher(net, x, y, "t")

    p = net.params
    pre = x @ p["trunk.0.weight"] + p["trunk.0.bias"]
    h = np.maximum(pre, 0.0)
    logits = h @ p["head.t.weight"] + p["head.t.bias"]
    dlogits = F.softmax(logits) - np.eye(2)[y]
    dpre = (dlogits @ p["head.t.weight"].T) * (pre > 0)
    np.testing.assert_allclose(fisher.params["trunk.0.weight"], (x.T @ dpre) ** 2, atol=1e-12)
    np.testing.assert_allclose(fisher.params["trunk.0.bias"], dpre[0] ** 2, atol=1e-12)
    assert fisher.method == "ewc"


def test_mas_linear_output_layer_oracle(rng):
    config = NetworkConfig(kind="mlp", input_shape=(3,), hidden=(4,), classes_per_head=2, shared_head=True, seed=2)
    net = build_network(config).add_head("t")
    x = rng.normal(size=(5, 3))

    mas = mas_importance(net, x, "t")

    h = np.maximum(x @ net.params["trunk.0.weight"] + net.params["trunk.0.bias"], 0.0)
    y = h @ net.params["trunk.1.weight"] + net.params["trunk.1.bias"]
    expected = np.mean([np.abs(np.outer(h[i], 2 * y[i])) for i in range(5)], axis=0)
    np.testing.assert_allclose(mas.params["trunk.1.weight"], expected, atol=1e-12)


def test_mas_zero_outputs_give_zero(tiny_mlp_config, rng):
    net = build_network(tiny_mlp_config).add_head("t")
    for pid in net.params:
        net.params[pid][...] = 0.0
    mas = mas_importance(net, rng.normal(size=(4, 6)), "t")
    assert all(not values.any() for values in mas.params.values())


def test_si_single_step_formula():
    trace = PathIntegralTrace({"w"}, {"w": (1,)})
    trace.record({"w": np.array([-1.0])}, {"w": np.array([0.1])})
    importance = si_path_integral(trace, {"w": np.array([0.0])}, {"w": np.array([0.1])}, damping=0.1)
    assert importance.params["w"][0] == pytest.approx(0.1 / (0.01 + 0.1))


def test_si_untouched_and_negative_paths_are_zero():
    trace = PathIntegralTrace(["a", "b"], {"a": (2,), "b": (2,)})
    trace.record({"a": np.zeros(2), "b": np.array([1.0, 1.0])}, {"a": np.zeros(2), "b": np.array([0.2, 0.2])})
    start = {"a": np.zeros(2), "b": np.zeros(2)}
    end = {"a": np.zeros(2), "b": np.array([0.2, 0.2])}
    importance = si_path_integral(trace, start, end)
    np.testing.assert_array_equal(importance.params["a"], [0.0, 0.0])
    np.testing.assert_array_equal(importance.params["b"], [0.0, 0.0])


def test_si_misaligned_trace():
    trace = PathIntegralTrace(["a"], {"a": (2,)})
    with pytest.raises(ContractError):
        trace.record({"b": np.zeros(2)}, {"a": np.zeros(2)})
    with pytest.raises(ContractError):
        si_path_integral(trace, {"b": np.zeros(2)}, {"a": np.zeros(2)})


def test_baselines_need_data(tiny_mlp_config):
    net = build_network(tiny_mlp_config).add_head("t")
    with pytest.raises(StateError):
        ewc_fisher(net, np.zeros((0, 6)), np.zeros(0, dtype=int), "t")
    with pytest.raises(StateError):
        mas_importance(net, np.zeros((0, 6)), "t")


def test_every_method_covers_the_same_non_negative_keys(tiny_mlp_config, rng):
    net = build_network(tiny_mlp_config).add_head("t")
    x = rng.normal(size=(20, 6))
    y = rng.integers(0, 2, size=20)
    ids = set(net.trunk_param_ids)

    trace = PathIntegralTrace.for_params(net.params, net.trunk_param_ids)
    start = net.snapshot()
    for _ in range(3):
        net.forward(x, "t")
        grads = net.backward(rng.normal(size=(20, 2)))
        deltas = {pid: -0.01 * grads[pid] for pid in ids}
        for pid in ids:
            net.params[pid] += deltas[pid]
        trace.record(grads, deltas)

    maps = [
        importance_from_stats(collect_activation_stats(net, x, "t"), net.neuron_groups()),
        ewc_fisher(net, x, y, "t"),
        mas_importance(net, x, "t"),
        si_path_integral(trace, start, net.snapshot()),
    ]
    for importance in maps:
        assert set(importance.params) == ids
        assert all((values >= 0).all() for values in importance.params.values())
