"""Comparison generators: random graphs (RG), DeepInversion-style feature
inversion on fixed random structure (DG), and a Bernoulli structure model
trained with a two-sample score-function estimator.

The Bernoulli path exists to measure what the Concrete relaxation saves: it
needs a feature forward plus one forward per sampled structure, and fresh
n x n uniform draws for every sample on every iteration.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .generation import (CurriculumSchedule, GenConfig, GenerationTrace, PseudoGraphParams, difficulty_weight,
                         distribution_loss, generation_loss, pseudo_batch, sample_noise)
from .graphs import GraphBatch
from .models import GnnModel, frozen, model_forward
from .tensor import NumericError, Tensor, backward, no_grad

BENCH_COLUMNS = ("method", "dataset", "teacher", "forwards_per_iter", "noise_per_iter", "wall_time_s",
                 "grad_variance", "accuracy_mean", "accuracy_std")


@dataclass
class EstimatorReport:
    method: str
    forwards_per_iter: float
    noise_samples_per_iter: float
    wall_time_total: float
    gradient_variance: float
    accuracy: float = float("nan")

    def __post_init__(self):
        if self.forwards_per_iter < 0 or self.noise_samples_per_iter < 0:
            raise ValueError("counters must be non-negative")


def random_adjacency(m: int, n: int, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    iu = np.triu_indices(n, k=1)
    adj = np.zeros((m, n, n))
    adj[:, iu[0], iu[1]] = rng.random((m, iu[0].size)) < p
    return adj + adj.transpose(0, 2, 1)


def random_graphs(n: int, m: int, num_classes: int, rng: np.random.Generator, d: int = 1) -> GraphBatch:
    """Uniform(0,1) features, Bernoulli(0.5) edges, uniform labels."""
    feats = rng.random((m, n, d))
    adj = random_adjacency(m, n, rng)
    return GraphBatch(feats, adj, np.ones((m, n), dtype=bool), rng.integers(num_classes, size=m))


def random_dataset(teacher: GnnModel, n: int, m: int, num_batches: int, seed: int = 0) -> list[GraphBatch]:
    children = np.random.SeedSequence(seed).spawn(num_batches)
    spec = teacher.spec
    return [random_graphs(n, m, spec.num_classes, np.random.default_rng(c), spec.input_dim) for c in children]


def deep_inversion_graphs(teacher: GnnModel, n: int, m: int, cfg: GenConfig, rng: np.random.Generator,
                          return_trace: bool = False):
    """Fixed random structure; node features optimized on L_out + rho * L_distr."""
    start = time.perf_counter()
    teacher = frozen(teacher)
    spec = teacher.spec
    adj = random_adjacency(m, n, rng)
    feats = Tensor(rng.normal(size=(m, n, spec.input_dim)), requires_grad=True)
    labels = rng.integers(spec.num_classes, size=m)
    mask = np.ones((m, n), dtype=bool)
    opt = nn.SGD([feats], cfg.lr_feat)
    trace = GenerationTrace(graphs=m)
    for loop in range(cfg.num_loops):
        feats.grad = None
        out = model_forward(teacher, GraphBatch(feats, adj, mask, labels), "capture")
        l_out = nn.cross_entropy(out.logits, labels, spec.num_classes)
        l_distr = distribution_loss(out.bn_snapshot)
        loss = l_out + l_distr * cfg.rho
        if not np.isfinite(loss.item()):
            raise NumericError(f"inversion loss is not finite at loop {loop}")
        backward(loss, [feats])
        if cfg.grad_clip > 0:
            nn.clip_grad_norm([feats], cfg.grad_clip)
        opt.step(cfg.lr_decay ** loop)
        trace.loops += 1
        if loop % max(1, cfg.trace_stride) == 0:
            trace.rows.append((loop, l_out.item(), l_distr.item(), 0.0, float(n * m), 1.0, teacher.forward_count))
    trace.forwards = teacher.forward_count
    trace.wall_time = time.perf_counter() - start
    batch = GraphBatch(feats.data.copy(), adj, mask, labels)
    return (batch, trace) if return_trace else batch


def deep_inversion_dataset(teacher: GnnModel, n: int, m: int, num_batches: int, cfg: GenConfig,
                           seed: int = 0) -> list[GraphBatch]:
    children = np.random.SeedSequence(seed).spawn(num_batches)
    return [deep_inversion_graphs(teacher, n, m, cfg, np.random.default_rng(c)) for c in children]


# ---------------------------------------------------------------------------
# Bernoulli structure with a score-function gradient


def bernoulli_params(rng: np.random.Generator, m: int, n: int, d: int, num_classes: int) -> PseudoGraphParams:
    """Edge logits theta with p = sigmoid(theta); no node gates."""
    return PseudoGraphParams.init(rng, m, n, d, num_classes, lambda_bc=1.0, use_gates=False)


def _edge_probs(params: PseudoGraphParams) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-params.edge_logits.data))


def _hard_batch(params: PseudoGraphParams, upper: np.ndarray, features) -> GraphBatch:
    m, n = params.num_graphs, params.n
    iu = np.triu_indices(n, k=1)
    adj = np.zeros((m, n, n))
    adj[:, iu[0], iu[1]] = upper
    adj = adj + adj.transpose(0, 2, 1)
    return GraphBatch(features, adj, np.ones((m, n), dtype=bool), params.labels)


def bernoulli_score_gradient(teacher: GnnModel, params: PseudoGraphParams, rng: np.random.Generator,
                             weight: float = 1.0, rho: float = 1.0, trace: GenerationTrace | None = None,
                             feature_grad: bool = True) -> tuple[np.ndarray, dict]:
    """Structure-gradient estimate from two sampled adjacencies.

    One forward on the mean adjacency supplies the feature gradient (left in
    ``params.node_features.grad``); two forwards on sampled structures give
    losses f1, f2, and the leave-one-out score estimate is
    ``0.5 * (f1 - f2) * (A1 - A2)`` per upper-triangular coordinate, since
    d log p(A) / d theta = A - sigmoid(theta).
    """
    m, n = params.num_graphs, params.n
    p = _edge_probs(params)
    iu = np.triu_indices(n, k=1)
    if feature_grad:
        params.node_features.grad = None
        soft = _hard_batch(params, p, params.node_features)
        loss, parts = generation_loss(teacher, soft, params.labels, weight, rho)
        backward(loss, [params.node_features])
    else:
        parts = {}
    u = rng.random((2, m, n, n))
    if trace is not None:
        trace.noise_draws_loop += u.size
    samples = (u[:, :, iu[0], iu[1]] < p).astype(np.float64)
    feats = params.node_features.data
    f = []
    with no_grad():
        for k in range(2):
            loss_k, _ = generation_loss(teacher, _hard_batch(params, samples[k], feats), params.labels, weight, rho)
            f.append(loss_k.item())
    grad = 0.5 * (f[0] - f[1]) * (samples[0] - samples[1])
    return grad, parts


def bernoulli_generate_batch(teacher: GnnModel, n_nodes: int, m_graphs: int, t: int, sched: CurriculumSchedule,
                             cfg: GenConfig, rng: np.random.Generator):
    """Same loop as the Concrete generator with the structure gradient swapped
    for the score-function estimate. Returns (soft batch, params, trace)."""
    start = time.perf_counter()
    teacher = frozen(teacher)
    spec = teacher.spec
    params = bernoulli_params(rng, m_graphs, n_nodes, spec.input_dim, spec.num_classes)
    trace = GenerationTrace(graphs=m_graphs)
    weight = difficulty_weight(t, sched)
    stride = max(1, cfg.trace_stride)
    if weight == 0:
        with no_grad():
            _, parts = generation_loss(teacher, _hard_batch(params, _edge_probs(params), params.node_features.data),
                                       params.labels, 1.0, cfg.rho)
        for loop in range(0, cfg.num_loops, stride):
            trace.rows.append((loop, parts["L_out"], parts["L_distr"], parts["L_onehot"], float(n_nodes * m_graphs),
                               0.0, teacher.forward_count))
    else:
        opt_feat = nn.SGD([params.node_features], cfg.lr_feat)
        for loop in range(cfg.num_loops):
            grad, parts = bernoulli_score_gradient(teacher, params, rng, weight, cfg.rho, trace)
            if not np.isfinite(parts["L_out"]):
                raise NumericError(f"generation loss is not finite at loop {loop}")
            params.edge_logits.grad = grad
            if cfg.grad_clip > 0:
                nn.clip_grad_norm([params.edge_logits], cfg.grad_clip * weight)
                nn.clip_grad_norm([params.node_features], cfg.grad_clip * weight)
            decay = cfg.lr_decay ** loop
            params.edge_logits.data = params.edge_logits.data - cfg.lr_struct * decay * params.edge_logits.grad
            opt_feat.step(decay)
            trace.loops += 1
            if loop % stride == 0:
                trace.rows.append((loop, parts["L_out"], parts["L_distr"], parts["L_onehot"],
                                   float(n_nodes * m_graphs), weight, teacher.forward_count))
    trace.forwards = teacher.forward_count
    final = _hard_batch(params, _edge_probs(params), params.node_features.data.copy())
    trace.wall_time = time.perf_counter() - start
    return final, params, trace


def bernoulli_generate_dataset(teacher: GnnModel, n_nodes: int, m_graphs: int, sched: CurriculumSchedule,
                               cfg: GenConfig, seed: int = 0):
    children = np.random.SeedSequence(seed).spawn(sched.B)
    batches, trace = [], GenerationTrace()
    for t in range(sched.B):
        batch, _, tr = bernoulli_generate_batch(teacher, n_nodes, m_graphs, t, sched, cfg,
                                                np.random.default_rng(children[t]))
        trace.extend(tr, loop_offset=t * cfg.num_loops, forward_offset=trace.forwards)
        batches.append(batch)
    return batches, trace


# ---------------------------------------------------------------------------
# estimator benchmarks


def concrete_structure_gradient(teacher: GnnModel, params: PseudoGraphParams, noise, weight: float = 1.0,
                                rho: float = 1.0) -> np.ndarray:
    params.edge_logits.grad = None
    loss, _ = generation_loss(teacher, pseudo_batch(params, noise), params.labels, weight, rho)
    backward(loss, [params.edge_logits])
    return params.edge_logits.grad.copy()


def variance_bench(teacher: GnnModel, params: PseudoGraphParams, repeats: int = 100, seed: int = 0,
                   frozen_noise: bool = False, noise_kind: str = "gumbel") -> tuple[EstimatorReport, EstimatorReport]:
    """Per-coordinate variance of the structure gradient under repeated draws.

    The Concrete estimator redraws its noise each repeat unless
    ``frozen_noise`` is set, in which case it is deterministic.
    """
    if repeats < 2:
        raise ValueError("repeats must be >= 2")
    teacher = frozen(teacher)
    rng = np.random.default_rng(seed)
    shape = params.edge_logits.shape
    fixed = sample_noise(noise_kind, shape, rng)

    start = time.perf_counter()
    before = teacher.forward_count
    grads = []
    for _ in range(repeats):
        noise = fixed if frozen_noise else sample_noise(noise_kind, shape, rng)
        grads.append(concrete_structure_gradient(teacher, params, noise))
    concrete = EstimatorReport("concrete", (teacher.forward_count - before) / repeats,
                               0.0 if frozen_noise else float(shape[1]), time.perf_counter() - start,
                               _coordinate_variance(grads))

    start = time.perf_counter()
    before = teacher.forward_count
    trace = GenerationTrace(graphs=params.num_graphs)
    grads = [bernoulli_score_gradient(teacher, params, rng, trace=trace)[0] for _ in range(repeats)]
    bern = EstimatorReport("bernoulli", (teacher.forward_count - before) / repeats,
                           trace.noise_draws_loop / (repeats * params.num_graphs), time.perf_counter() - start,
                           _coordinate_variance(grads))
    return concrete, bern


def _coordinate_variance(grads) -> float:
    g = np.stack(grads)
    # centring on the first draw keeps identical draws at exactly zero
    return float(np.var(g - g[0], axis=0).mean())


def write_benchmark_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in BENCH_COLUMNS})
    return path


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v
