"""Pseudo-graph synthesis against a frozen teacher.

Edges are Binary Concrete relaxations ``s_ij = sigmoid((log a_ij + G_ij) / lam)``
of upper-triangular logits, node features are free parameters, and every node
carries a sigmoid gate. Gates scale feature rows, adjacency rows/columns and the
node's weight in batch statistics and pooling, and an L1 penalty on them lets
the teacher's feedback switch nodes off; the number of switched-off nodes is
the reported spatial-complexity reduction ``xi``.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .graphs import GraphBatch, GraphRecord
from .models import GnnModel, frozen, model_forward
from .tensor import NumericError, Tensor, backward, no_grad

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("loop", "L_out", "L_distr", "L_onehot", "gate_sum", "weight", "forwards_cumulative")


@dataclass
class CurriculumSchedule:
    """Piecewise difficulty weight over generated batches ``t = 0 .. B-1``."""

    k_begin: float = 0.1
    k_end: float = 0.9
    B: int = 20
    alpha: float | None = None
    lambda_final: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.k_begin < self.k_end <= 1.0:
            raise ValueError(f"need 0 <= k_begin < k_end <= 1, got {self.k_begin}, {self.k_end}")
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if self.alpha is None:
            self.alpha = self.lambda_final / (self.k_end * self.B)
        if self.alpha <= 0 or self.lambda_final <= 0 or self.B < 1:
            raise ValueError("alpha, lambda_final and B must be positive")


def difficulty_weight(t: float, sched: CurriculumSchedule) -> float:
    if not sched.enabled:
        return sched.lambda_final
    if t <= sched.k_begin * sched.B:
        return 0.0
    if t <= sched.k_end * sched.B:
        return sched.alpha * t
    return sched.lambda_final


@dataclass
class GenConfig:
    num_loops: int = 1800
    lr_struct: float = 1.0
    lr_feat: float = 0.01
    lr_decay: float = 0.999
    Q: int = 1
    rho: float = 1.0
    gate_l1_weight: float = 0.01
    noise_kind: str = "gumbel"
    lambda_bc: float = 2.0 / 3.0
    use_gates: bool = True
    resample_noise: bool = False
    trace_stride: int = 1
    grad_clip: float = 10.0  # per parameter group, 0 disables

    def __post_init__(self):
        if self.num_loops < 1 or self.Q < 1:
            raise ValueError("num_loops and Q must be >= 1")
        if self.lr_struct <= 0 or self.lr_feat <= 0:
            raise ValueError("learning rates must be positive")
        if self.noise_kind not in ("gumbel", "logistic"):
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")
        if self.lambda_bc <= 0:
            raise ValueError("Concrete temperature must be positive")


@dataclass
class PseudoGraphParams:
    edge_logits: Tensor  # m x n(n-1)/2, log alpha of the upper triangle
    node_features: Tensor  # m x n x d
    gate_logits: Tensor  # m x n
    lambda_bc: float
    labels: np.ndarray
    use_gates: bool = True

    @classmethod
    def init(cls, rng: np.random.Generator, m: int, n: int, d: int, num_classes: int,
             lambda_bc: float = 2.0 / 3.0, use_gates: bool = True, gate_init: float = 2.0):
        k = n * (n - 1) // 2
        return cls(
            Tensor(rng.normal(size=(m, k)), requires_grad=True),
            Tensor(rng.normal(size=(m, n, d)), requires_grad=True),
            Tensor(np.full((m, n), gate_init), requires_grad=use_gates),
            lambda_bc,
            rng.integers(num_classes, size=m),
            use_gates,
        )

    @property
    def num_graphs(self) -> int:
        return self.node_features.shape[0]

    @property
    def n(self) -> int:
        return self.node_features.shape[1]

    def trainable(self) -> list[Tensor]:
        return [self.edge_logits, self.node_features] + ([self.gate_logits] if self.use_gates else [])

    def gate_values(self) -> np.ndarray:
        if not self.use_gates:
            return np.ones(self.gate_logits.shape)
        return 1.0 / (1.0 + np.exp(-self.gate_logits.data))

    def effective_nodes(self) -> np.ndarray:
        return self.gate_values().sum(axis=1)

    def xi(self) -> np.ndarray:
        """Per-graph count of removed nodes, n - round(sum of gates)."""
        return self.n - np.round(self.effective_nodes()).astype(int)


def adjacency_param_count(n: int, xi: int = 0) -> int:
    """Dense adjacency parameters of an n-node graph after removing xi nodes."""
    return (n - xi) ** 2


def sample_noise(kind: str, shape, rng: np.random.Generator) -> np.ndarray:
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    if kind == "gumbel":
        return -np.log(-np.log(u))
    if kind == "logistic":
        return np.log(u) - np.log1p(-u)
    raise ValueError(f"unknown noise kind {kind!r}")


def node_gates(params: PseudoGraphParams) -> Tensor:
    if not params.use_gates:
        return Tensor(np.ones(params.gate_logits.shape))
    return nn.sigmoid(params.gate_logits)


def sample_structure(params: PseudoGraphParams, noise: np.ndarray | None = None,
                     rng: np.random.Generator | None = None, noise_kind: str = "gumbel",
                     gates: Tensor | None = None) -> Tensor:
    """Soft symmetric adjacency with zero diagonal, gated by ``g_i g_j``.

    Noise is taken from ``noise`` if given, drawn from ``rng`` otherwise, and
    zero when neither is given.
    """
    if noise is None:
        noise = sample_noise(noise_kind, params.edge_logits.shape, rng) if rng is not None else 0.0
    s = nn.sigmoid((params.edge_logits + noise) * (1.0 / params.lambda_bc))
    adj = nn.symmetrize_triu(s, params.n)
    if params.use_gates:
        g = node_gates(params) if gates is None else gates
        # the outer product is exactly symmetric, so the product with adj stays symmetric bitwise
        adj = adj * (g.reshape(g.shape + (1,)) * g.reshape(g.shape[:-1] + (1, g.shape[-1])))
    return adj


def pseudo_batch(params: PseudoGraphParams, noise=None, rng=None, noise_kind: str = "gumbel") -> GraphBatch:
    g = node_gates(params)
    adj = sample_structure(params, noise, rng, noise_kind, gates=g)
    feats = params.node_features * g.reshape(g.shape + (1,)) if params.use_gates else params.node_features
    mask = np.ones(params.gate_logits.shape, dtype=bool)
    return GraphBatch(feats, adj, mask, params.labels, node_weights=g if params.use_gates else g.data)


def distribution_loss(snapshot) -> Tensor:
    """Sum over BN layers of squared gaps between batch and running moments."""
    total = None
    for st in snapshot:
        term = nn.square(st.mean - st.running_mean).sum() + nn.square(st.var - st.running_var).sum()
        total = term if total is None else total + term
    return total


def generation_loss(teacher: GnnModel, batch: GraphBatch, labels, weight: float, rho: float = 1.0,
                    gate_l1_weight: float = 0.0) -> tuple[Tensor, dict]:
    """weight * (L_out + rho * L_distr + L_onehot + gate_l1_weight * mean_graph sum_i gate_i).

    The teacher runs with running-stat batch norm while its batch statistics
    are captured for the distribution term. Zero weight short-circuits to an
    exact zero with no forward pass.
    """
    if weight == 0:
        return Tensor(0.0), {"L_out": 0.0, "L_distr": 0.0, "L_onehot": 0.0, "gate_sum": 0.0}
    out = model_forward(teacher, batch, "capture")
    c = out.logits.shape[-1]
    l_out = nn.cross_entropy(out.logits, labels, c)
    l_distr = distribution_loss(out.bn_snapshot)
    l_onehot = nn.cross_entropy(out.logits, out.logits.data.argmax(axis=1), c)
    total = l_out + l_distr * rho + l_onehot
    gw = batch.node_weights
    gate_sum = float(np.asarray(gw.data if isinstance(gw, Tensor) else gw).sum())
    if gate_l1_weight and isinstance(gw, Tensor):
        total = total + gw.sum() * (gate_l1_weight / batch.num_graphs)
    total = total * weight
    parts = {"L_out": l_out.item(), "L_distr": l_distr.item(), "L_onehot": l_onehot.item(),
             "gate_sum": gate_sum}
    return total, parts


@dataclass
class GenerationTrace:
    rows: list = field(default_factory=list)
    forwards: int = 0
    noise_draws_init: int = 0
    noise_draws_loop: int = 0
    loops: int = 0
    wall_time: float = 0.0
    graphs: int = 1  # per-graph normalization of the noise counter

    @property
    def forwards_per_iter(self) -> float:
        return self.forwards / self.loops if self.loops else 0.0

    @property
    def noise_per_iter(self) -> float:
        """Post-initialization noise draws per graph per iteration."""
        return self.noise_draws_loop / (self.loops * self.graphs) if self.loops else 0.0

    def extend(self, other: "GenerationTrace", loop_offset: int = 0, forward_offset: int = 0):
        for r in other.rows:
            self.rows.append((r[0] + loop_offset,) + tuple(r[1:6]) + (r[6] + forward_offset,))
        self.forwards += other.forwards
        self.noise_draws_init += other.noise_draws_init
        self.noise_draws_loop += other.noise_draws_loop
        self.loops += other.loops
        self.wall_time += other.wall_time
        self.graphs = other.graphs


def write_trace_csv(trace: GenerationTrace, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in trace.rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:6]] + [r[6]])
    return path


def generate_batch(teacher: GnnModel, n_nodes: int, m_graphs: int, t: int, sched: CurriculumSchedule,
                   cfg: GenConfig, rng: np.random.Generator,
                   params: PseudoGraphParams | None = None) -> tuple[GraphBatch, PseudoGraphParams, GenerationTrace]:
    """Optimize one batch of pseudo-graphs for ``cfg.num_loops`` iterations.

    Returns the final soft batch (plain arrays), the parameters, and a trace.
    The Concrete noise for the Q samples is drawn once at initialization unless
    ``cfg.resample_noise`` is set.
    """
    start = time.perf_counter()
    teacher = frozen(teacher)
    spec = teacher.spec
    if params is None:
        params = PseudoGraphParams.init(rng, m_graphs, n_nodes, spec.input_dim, spec.num_classes,
                                        cfg.lambda_bc, cfg.use_gates)
    trace = GenerationTrace(graphs=params.num_graphs)
    weight = difficulty_weight(t, sched)
    shape = params.edge_logits.shape
    noises = [sample_noise(cfg.noise_kind, shape, rng) for _ in range(cfg.Q)]
    trace.noise_draws_init = cfg.Q * int(np.prod(shape))
    stride = max(1, cfg.trace_stride)

    if weight == 0:
        # warm-up: the batch stays at its random initialization
        with no_grad():
            _, parts = generation_loss(teacher, pseudo_batch(params, noises[0]), params.labels, 1.0,
                                       cfg.rho, cfg.gate_l1_weight)
        trace.forwards = teacher.forward_count
        for loop in range(0, cfg.num_loops, stride):
            trace.rows.append((loop, parts["L_out"], parts["L_distr"], parts["L_onehot"],
                               parts["gate_sum"], 0.0, trace.forwards))
    else:
        struct = [params.edge_logits] + ([params.gate_logits] if params.use_gates else [])
        opt_struct = nn.SGD(struct, cfg.lr_struct)
        opt_feat = nn.SGD([params.node_features], cfg.lr_feat)
        for loop in range(cfg.num_loops):
            if cfg.resample_noise:
                noises = [sample_noise(cfg.noise_kind, shape, rng) for _ in range(cfg.Q)]
                trace.noise_draws_loop += cfg.Q * int(np.prod(shape))
            for p in params.trainable():
                p.grad = None
            acc = {"L_out": 0.0, "L_distr": 0.0, "L_onehot": 0.0, "gate_sum": 0.0}
            for noise in noises:
                loss, parts = generation_loss(teacher, pseudo_batch(params, noise), params.labels, weight,
                                              cfg.rho, cfg.gate_l1_weight)
                if not np.isfinite(loss.item()):
                    raise NumericError(f"generation loss is not finite at loop {loop}")
                backward(loss * (1.0 / cfg.Q), params.trainable())
                for k in acc:
                    acc[k] += parts[k] / cfg.Q
            if cfg.grad_clip > 0:
                # threshold scales with the weight so the curriculum still sets the step size
                nn.clip_grad_norm(struct, cfg.grad_clip * weight)
                nn.clip_grad_norm([params.node_features], cfg.grad_clip * weight)
            decay = cfg.lr_decay ** loop
            opt_struct.step(decay)
            opt_feat.step(decay)
            trace.loops += 1
            if loop % stride == 0:
                trace.rows.append((loop, acc["L_out"], acc["L_distr"], acc["L_onehot"], acc["gate_sum"],
                                   weight, teacher.forward_count))
        trace.forwards = teacher.forward_count

    with no_grad():
        final = pseudo_batch(params, noises[0]).detached()
    trace.wall_time = time.perf_counter() - start
    return final, params, trace


def generate_dataset(teacher: GnnModel, n_nodes: int, m_graphs: int, sched: CurriculumSchedule,
                     cfg: GenConfig, seed: int = 0, progress=None):
    """Generate ``sched.B`` batches in curriculum order. Returns (batches, params, trace)."""
    children = np.random.SeedSequence(seed).spawn(sched.B)
    batches, all_params, trace = [], [], GenerationTrace()
    for t in range(sched.B):
        rng = np.random.default_rng(children[t])
        batch, params, tr = generate_batch(teacher, n_nodes, m_graphs, t, sched, cfg, rng)
        trace.extend(tr, loop_offset=t * cfg.num_loops, forward_offset=trace.forwards)
        batches.append(batch)
        all_params.append(params)
        if progress:
            progress(t, tr)
    return batches, all_params, trace


def harden_graph(params: PseudoGraphParams) -> list[GraphRecord]:
    """Threshold gates and zero-noise edge probabilities at 0.5."""
    gates = params.gate_values()
    iu, ju = np.triu_indices(params.n, k=1)
    out = []
    for g in range(params.num_graphs):
        keep = np.flatnonzero(gates[g] >= 0.5)
        index = {int(v): i for i, v in enumerate(keep)}
        on = params.edge_logits.data[g] >= 0
        edges = [(index[i], index[j]) for i, j, e in zip(iu, ju, on) if e and i in index and j in index]
        feats = params.node_features.data[g][keep]
        out.append(GraphRecord(len(keep), edges, feats, int(params.labels[g])))
    return out


def with_overrides(cfg: GenConfig, **kw) -> GenConfig:
    return replace(cfg, **kw)
