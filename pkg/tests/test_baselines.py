import itertools

import numpy as np
import pytest

from acgkd.baselines import (EstimatorReport, _edge_probs, _hard_batch, bernoulli_generate_batch, bernoulli_params, bernoulli_score_gradient,
                             concrete_structure_gradient, deep_inversion_graphs, random_adjacency, random_dataset,
                             random_graphs, variance_bench, write_benchmark_csv, BENCH_COLUMNS)
from acgkd.generation import (CurriculumSchedule, GenConfig, GenerationTrace, PseudoGraphParams, generate_batch,
                              generation_loss)
from acgkd.tensor import no_grad


def test_random_graph_density():
    adj = random_adjacency(10_000, 6, np.random.default_rng(0))
    iu = np.triu_indices(6, k=1)
    assert abs(adj[:, iu[0], iu[1]].mean() - 0.5) <= 0.01


def test_random_graphs_shape_and_determinism():
    a = random_graphs(7, 5, 2, np.random.default_rng(3), d=4)
    b = random_graphs(7, 5, 2, np.random.default_rng(3), d=4)
    assert np.array_equal(a.adjacency, b.adjacency) and np.array_equal(a.features, b.features)
    assert np.array_equal(a.adjacency, np.swapaxes(a.adjacency, 1, 2))
    assert np.all(np.diagonal(a.adjacency, axis1=1, axis2=2) == 0)
    assert a.features.min() >= 0 and a.features.max() < 1 and a.features.shape == (5, 7, 4)


def test_random_dataset_matches_teacher_dims(micro_teacher):
    batches = random_dataset(micro_teacher, 5, 3, 4, seed=1)
    assert len(batches) == 4 and all(b.feature_dim == 3 for b in batches)


def test_deep_inversion_keeps_structure(small_teacher):
    cfg = GenConfig(num_loops=60)
    for seed in range(3):
        ref_rng = np.random.default_rng(seed)
        from acgkd.baselines import random_adjacency as ra
        expected = ra(8, 18, ref_rng)
        batch, trace = deep_inversion_graphs(small_teacher, 18, 8, cfg, np.random.default_rng(seed), return_trace=True)
        assert np.array_equal(batch.adjacency, expected)
        assert trace.rows[-1][1] < trace.rows[0][1]
        assert trace.forwards_per_iter == 1.0


def test_bernoulli_counters(micro_teacher):
    sched = CurriculumSchedule(enabled=False)
    _, _, tr = bernoulli_generate_batch(micro_teacher, 5, 3, 0, sched, GenConfig(num_loops=6), np.random.default_rng(0))
    assert tr.forwards_per_iter == 3.0
    assert tr.noise_per_iter == 2 * 5 ** 2
    _, _, tc = generate_batch(micro_teacher, 5, 3, 0, sched, GenConfig(num_loops=6), np.random.default_rng(0))
    assert tc.forwards_per_iter == 1.0 and tc.noise_per_iter == 0.0


def exact_expected_gradient(teacher, params):
    """d/dtheta E_{A ~ Bern(sigma(theta))} f(A) by enumerating every structure of one graph."""
    p = _edge_probs(params).ravel()
    grad = np.zeros_like(p)
    with no_grad():
        for bits in itertools.product([0.0, 1.0], repeat=p.size):
            a = np.array(bits)
            prob = np.prod(np.where(a == 1, p, 1 - p))
            batch = _hard_batch(params, a[None], params.node_features.data)
            f = generation_loss(teacher, batch, params.labels, 1.0)[0].item()
            grad += prob * f * (a - p)
    return grad


@pytest.mark.parametrize("seed", range(3))
def test_score_estimate_is_unbiased(micro_teacher, seed):
    rng = np.random.default_rng(seed)
    params = bernoulli_params(rng, 1, 3, 3, 2)
    exact = exact_expected_gradient(micro_teacher, params)
    draws = np.stack([bernoulli_score_gradient(micro_teacher, params, rng, feature_grad=False)[0].ravel()
                      for _ in range(2000)])
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - exact) < 4 * se + 1e-12)


def test_score_estimate_agrees_in_sign_with_reparameterized_gradient(micro_teacher):
    # one 3-node instance, 10^4 repeats, coordinates above three standard errors of the mean
    rng = np.random.default_rng(0)
    params = bernoulli_params(rng, 1, 3, 3, 2)
    concrete = concrete_structure_gradient(micro_teacher, params, np.zeros(params.edge_logits.shape)).ravel()
    draws = np.stack([bernoulli_score_gradient(micro_teacher, params, rng, feature_grad=False)[0].ravel()
                      for _ in range(10_000)])
    floor = 3 * draws.std(axis=0) / np.sqrt(len(draws))
    keep = np.abs(concrete) > floor
    assert keep.sum() >= 1
    agree = np.sign(draws.mean(axis=0)[keep]) == np.sign(concrete[keep])
    assert agree.mean() >= 0.9, (draws.mean(axis=0), concrete, floor)


def test_frozen_concrete_noise_has_zero_variance(micro_teacher):
    params = bernoulli_params(np.random.default_rng(1), 2, 4, 3, 2)
    concrete, _ = variance_bench(micro_teacher, params, repeats=100, seed=0, frozen_noise=True)
    assert concrete.gradient_variance == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_score_estimator_has_higher_variance(micro_teacher, seed):
    params = bernoulli_params(np.random.default_rng(seed), 1, 4, 3, 2)
    concrete, bern = variance_bench(micro_teacher, params, repeats=100, seed=seed)
    assert bern.gradient_variance > concrete.gradient_variance
    assert concrete.forwards_per_iter == 1.0 and bern.forwards_per_iter == 3.0


def test_report_rejects_negative_counters():
    with pytest.raises(ValueError):
        EstimatorReport("x", -1, 0, 0.0, 0.0)


def test_benchmark_csv(tmp_path):
    path = write_benchmark_csv([{"method": "concrete", "wall_time_s": 1.5, "accuracy_mean": float("nan")}],
                               tmp_path / "b.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(BENCH_COLUMNS)
    assert lines[1].startswith("concrete,,,,,1.5,,nan")
