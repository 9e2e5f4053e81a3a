"""Student training on pseudo-graphs.

The student's node embeddings are lifted to the teacher's width by a GAT
projector, pooled, and classified by the teacher's frozen classifier. The KD
temperature comes from a small MLP whose output passes through a gradient
reversal layer, so a single backward pass gives the student a descent
direction and the temperature module an ascent direction on the same loss.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .checkpoint import load_container, save_container
from .graphs import GraphBatch, GraphRecord, make_batches
from .models import (Classifier, GnnModel, ModelSpec, ProjectorParams, embed_nodes, frozen,
                     gat_project, glorot, model_forward, readout)
from .tensor import NumericError, Tensor, backward, no_grad

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "L_cls", "L_div", "L_mse", "v_star", "tau", "beta", "test_acc")


@dataclass
class BetaSchedule:
    max_value: float = 1.0
    min_value: float = 0.0
    num_loops: int = 400

    def __post_init__(self):
        if not self.max_value >= self.min_value >= 0:
            raise ValueError("need max_value >= min_value >= 0")


def beta_at(i: float, sched: BetaSchedule) -> float:
    i = min(max(i, 0), sched.num_loops)
    cos = (1.0 + math.cos(i * math.pi / sched.num_loops)) / 2.0
    return cos * (sched.max_value - sched.min_value) + sched.min_value


def dynamic_weight(mu: float, loss: float) -> float:
    """(1 + e^-mu) / (1 + e^(L - mu)), evaluated in log space."""
    return math.exp(np.logaddexp(0.0, -mu) - np.logaddexp(0.0, loss - mu))


@dataclass
class TemperatureModule:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    tau_min: float = 1.0
    tau_max: float = 8.0

    @classmethod
    def init(cls, num_classes: int, hidden: int = 16, seed: int = 0, tau_min: float = 1.0,
             tau_max: float = 8.0, zero: bool = False) -> "TemperatureModule":
        if not 0 < tau_min <= tau_max:
            raise ValueError("need 0 < tau_min <= tau_max")
        rng = np.random.default_rng(seed)
        w1 = np.zeros((2 * num_classes, hidden)) if zero else glorot(rng, 2 * num_classes, hidden)
        w2 = np.zeros((hidden, 1)) if zero else glorot(rng, hidden, 1)
        return cls(Tensor(w1, requires_grad=True), Tensor(np.zeros(hidden), requires_grad=True),
                   Tensor(w2, requires_grad=True), Tensor(np.zeros(1), requires_grad=True), tau_min, tau_max)

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


def temperature_forward(t_logits, s_logits, module: TemperatureModule, beta: float) -> Tensor:
    """Scalar temperature in [tau_min, tau_max] from batch-mean class probabilities.

    The reversal sits between the MLP and the squashing, so only the module's
    own gradients are flipped; its inputs are detached.
    """
    def mean_probs(z):
        z = z.data if isinstance(z, Tensor) else np.asarray(z)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return (e / e.sum(axis=1, keepdims=True)).mean(axis=0)

    x = Tensor(np.concatenate([mean_probs(t_logits), mean_probs(s_logits)])[None, :])
    raw = nn.relu(x @ module.w1 + module.b1) @ module.w2 + module.b2
    raw = nn.gradient_reversal(raw, beta)
    tau = nn.sigmoid(raw) * (module.tau_max - module.tau_min) + module.tau_min
    return tau.reshape(())


@dataclass
class DistillConfig:
    epochs: int = 400
    alpha_div: float = 1.0
    alpha_mse: float = 0.1
    mu0: float = 0.0
    mu_slope: float = 0.05
    lr: float = 0.01
    lr_schedule: str = "linear"  # scale 1 -> 0 over the epochs, or "constant"
    temp_lr: float = 0.01
    beta: BetaSchedule = field(default_factory=BetaSchedule)
    tau_min: float = 1.0
    tau_max: float = 8.0
    temp_hidden: int = 16
    fixed_tau: float | None = None
    use_cl: bool = True
    reuse_classifier: bool = True
    heads: int = 4
    projector_activation: str = "elu"
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if min(self.alpha_div, self.alpha_mse) < 0:
            raise ValueError("loss weights must be >= 0")

    def mu(self, epoch: int) -> float:
        return self.mu0 + self.mu_slope * epoch

    def lr_scale(self, epoch: int) -> float:
        if self.lr_schedule == "linear":
            return 1.0 - epoch / self.epochs
        return 1.0


@dataclass
class DistillState:
    teacher: GnnModel  # frozen view
    student: GnnModel
    projector: ProjectorParams | None
    temperature: TemperatureModule
    classifier: Classifier  # teacher's (frozen) or the student's own
    student_opt: nn.Adam = None
    temp_opt: nn.SGD = None
    epoch: int = 0
    history: list = field(default_factory=list)

    def student_parameters(self) -> list[Tensor]:
        params = self.student.conv_parameters()
        if self.projector is not None:
            params += self.projector.parameters()
        if self.classifier.weight.requires_grad:
            params += self.classifier.parameters()
        return params


def init_state(teacher: GnnModel, student_spec: ModelSpec, cfg: DistillConfig, seed: int = 0) -> DistillState:
    t = teacher.spec
    if student_spec.input_dim != t.input_dim or student_spec.num_classes != t.num_classes:
        raise ValueError(f"student {student_spec} does not match teacher input/classes {t}")
    seeds = np.random.SeedSequence(seed).generate_state(3)
    student = GnnModel.init(student_spec, seed=int(seeds[0]), dropout=teacher.classifier.dropout)
    if cfg.reuse_classifier:
        projector = ProjectorParams.init(student_spec.hidden_dim, t.hidden_dim, cfg.heads, int(seeds[1]),
                                         cfg.projector_activation)
        classifier = teacher.classifier.frozen_view()
    else:
        projector = None
        classifier = student.classifier
    temp = TemperatureModule.init(t.num_classes, cfg.temp_hidden, int(seeds[2]), cfg.tau_min, cfg.tau_max)
    state = DistillState(frozen(teacher), student, projector, temp, classifier)
    state.student_opt = nn.Adam(state.student_parameters(), lr=cfg.lr)
    state.temp_opt = nn.SGD(temp.parameters(), cfg.temp_lr)
    return state


def student_forward(state: DistillState, batch: GraphBatch, mode: str = "eval", rng=None,
                    dropout_mask=None) -> tuple[Tensor, Tensor | None, Tensor]:
    """Returns (logits, pooled projected hidden or None, pooled hidden fed to the classifier)."""
    node_h = embed_nodes(state.student, batch, mode)
    if state.projector is not None:
        node_h = gat_project(node_h, batch.adjacency, state.projector, mask=batch.node_mask)
    pooled = readout(node_h, batch.node_weights)
    logits = state.classifier(pooled, "train" if mode == "train" else "eval", rng=rng, mask=dropout_mask)
    return logits, (pooled if state.projector is not None else None), pooled


def kd_loss(t_logits, t_hidden, s_logits, s_hidden_projected, labels, tau, cfg: DistillConfig):
    """L_cls + alpha_div * tau^2 KL(p_t^tau || p_s^tau) + alpha_mse * MSE(hidden).

    Teacher tensors are used as constants. Returns (total, parts).
    """
    t_logits = t_logits.data if isinstance(t_logits, Tensor) else np.asarray(t_logits)
    l_cls = nn.cross_entropy(s_logits, labels, s_logits.shape[-1])
    tau_t = tau if isinstance(tau, Tensor) else Tensor(float(tau))
    l_div = nn.kl_divergence(t_logits, s_logits, tau_t) * nn.square(tau_t)
    total = l_cls + l_div * cfg.alpha_div
    parts = {"L_cls": l_cls.item(), "L_div": l_div.item(), "L_mse": 0.0, "tau": float(tau_t.data)}
    if s_hidden_projected is not None:
        th = t_hidden.data if isinstance(t_hidden, Tensor) else np.asarray(t_hidden)
        l_mse = nn.mse(s_hidden_projected, th)
        total = total + l_mse * cfg.alpha_mse
        parts["L_mse"] = l_mse.item()
    parts["total"] = total.item()
    return total, parts


def distill_step(state: DistillState, batch: GraphBatch, epoch: int, cfg: DistillConfig,
                 rng: np.random.Generator, dropout_mask=None) -> dict:
    with no_grad():
        t_out = model_forward(state.teacher, batch, "eval")
    s_logits, s_proj, _ = student_forward(state, batch, "train", rng, dropout_mask)
    beta = beta_at(epoch, cfg.beta)
    if cfg.fixed_tau is not None:
        tau = Tensor(float(cfg.fixed_tau))
    else:
        tau = temperature_forward(t_out.logits, s_logits, state.temperature, beta)
    total, parts = kd_loss(t_out.logits, t_out.hidden, s_logits, s_proj, batch.labels, tau, cfg)
    v = dynamic_weight(cfg.mu(epoch), parts["total"]) if cfg.use_cl else 1.0
    if not np.isfinite(parts["total"]):
        raise NumericError(f"distillation loss is not finite (epoch {epoch})")
    state.student_opt.zero_grad()
    state.temp_opt.zero_grad()
    backward(total * v)
    state.student_opt.step(cfg.lr_scale(epoch))
    if cfg.fixed_tau is None:
        state.temp_opt.step()
    parts.update(v_star=v, beta=beta)
    return parts


def distill_epoch(state: DistillState, batches: list[GraphBatch], epoch: int, cfg: DistillConfig,
                  rng: np.random.Generator) -> dict:
    sums: dict = {}
    for i, batch in enumerate(batches):
        try:
            parts = distill_step(state, batch, epoch, cfg, rng)
        except NumericError as exc:
            raise NumericError(f"{exc} at batch {i}") from exc
        for k, v in parts.items():
            sums[k] = sums.get(k, 0.0) + v
    state.epoch = epoch + 1
    return {k: v / len(batches) for k, v in sums.items()}


def evaluate(state: DistillState, records: list[GraphRecord], batch_size: int = 256) -> float:
    """Argmax accuracy of student + projector + classifier on real graphs."""
    if not records:
        raise ValueError("empty test set")
    correct = 0
    with no_grad():
        for b in make_batches(records, batch_size):
            logits, _, _ = student_forward(state, b, "eval")
            correct += int((logits.data.argmax(axis=1) == b.labels).sum())
    return correct / len(records)


def distill(teacher: GnnModel, batches: list[GraphBatch], student_spec: ModelSpec, cfg: DistillConfig,
            seed: int = 0, test: list[GraphRecord] | None = None, progress=None) -> DistillState:
    state = init_state(teacher, student_spec, cfg, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    for epoch in range(cfg.epochs):
        m = distill_epoch(state, batches, epoch, cfg, rng)
        last = epoch == cfg.epochs - 1
        acc = float("nan")
        if test and (last or (cfg.eval_every and epoch % cfg.eval_every == 0)):
            acc = evaluate(state, test)
        row = (epoch, m["L_cls"], m["L_div"], m["L_mse"], m["v_star"], m["tau"], m["beta"], acc)
        state.history.append(row)
        if progress:
            progress(row)
    return state


def write_metrics_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    return path


def embeddings(state_or_model, records: list[GraphRecord], batch_size: int = 256) -> np.ndarray:
    """Pooled hidden vectors fed to the classifier, one row per record."""
    out = []
    with no_grad():
        for b in make_batches(records, batch_size):
            if isinstance(state_or_model, DistillState):
                out.append(student_forward(state_or_model, b, "eval")[2].data)
            else:
                out.append(model_forward(state_or_model, b, "eval").hidden.data)
    return np.concatenate(out)


def write_embeddings_csv(emb: np.ndarray, records: list[GraphRecord], path, ids=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = range(len(records)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"] + [f"d{i}" for i in range(emb.shape[1])])
        for i, r, row in zip(ids, records, emb):
            w.writerow([int(i), r.label] + [repr(float(v)) for v in row])
    return path


# ---------------------------------------------------------------------------
# persistence of a trained student


def save_student(state: DistillState, path, extra: dict | None = None) -> Path:
    s = state.student.spec
    arrays = {f"student.{k}": v for k, v in state.student.named_arrays().items()}
    if state.projector is not None:
        arrays.update(state.projector.named_arrays())
    for name, t in zip(("w1", "b1", "w2", "b2"), state.temperature.parameters()):
        arrays[f"temperature.{name}"] = t.data
    header = {
        "kind": "student",
        "spec": {"arch": s.arch, "num_layers": s.num_layers, "hidden_dim": s.hidden_dim,
                 "num_classes": s.num_classes, "input_dim": s.input_dim},
        "reuse_classifier": state.projector is not None,
        "heads": state.projector.heads if state.projector is not None else 0,
        "projector_activation": state.projector.activation if state.projector is not None else None,
        "tau_range": [state.temperature.tau_min, state.temperature.tau_max],
        "extra": extra or {},
    }
    return save_container(path, header, arrays)


def load_student(path, teacher: GnnModel) -> DistillState:
    header, arrays = load_container(path)
    if header.get("kind") != "student":
        raise ValueError(f"{path} is not a student checkpoint")
    spec = ModelSpec(**header["spec"])
    cfg = DistillConfig(reuse_classifier=header["reuse_classifier"], heads=max(1, header["heads"]),
                        projector_activation=header["projector_activation"] or "elu",
                        tau_min=header["tau_range"][0], tau_max=header["tau_range"][1])
    state = init_state(teacher, spec, cfg)
    if state.projector is not None and state.projector.output_dim != teacher.spec.hidden_dim:
        raise ValueError("projector output does not match teacher hidden dim")
    student_arrays = {k[len("student."):]: v for k, v in arrays.items() if k.startswith("student.")}
    _assign_model(state.student, student_arrays)
    if state.projector is not None:
        for k in range(state.projector.heads):
            state.projector.weights[k].data = arrays[f"proj{k}.weight"]
            state.projector.att_src[k].data = arrays[f"proj{k}.att_src"]
            state.projector.att_dst[k].data = arrays[f"proj{k}.att_dst"]
    for name, t in zip(("w1", "b1", "w2", "b2"), state.temperature.parameters()):
        t.data = arrays[f"temperature.{name}"]
    return state


def _assign_model(model: GnnModel, arrays: dict) -> None:
    for i, (layer, bn) in enumerate(zip(model.layers, model.bns)):
        for k in layer:
            layer[k].data = arrays[f"conv{i}.{k}"]
        bn.gamma.data = arrays[f"bn{i}.gamma"]
        bn.beta.data = arrays[f"bn{i}.beta"]
        bn.running_mean = arrays[f"bn{i}.running_mean"]
        bn.running_var = arrays[f"bn{i}.running_var"]
    model.classifier.weight.data = arrays["classifier.weight"]
    model.classifier.bias.data = arrays["classifier.bias"]
