"""GCN / GIN graph classifiers, the GAT projector, and teacher pretraining."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .checkpoint import load_container, save_container
from .graphs import GraphBatch, GraphRecord, collate, make_batches
from .tensor import ShapeError, Tensor, as_tensor, backward, no_grad

log = logging.getLogger(__name__)

_SPEC_RE = re.compile(r"^(GCN|GIN)-(\d+)-(\d+)$")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    num_layers: int
    hidden_dim: int
    num_classes: int = 2
    input_dim: int = 1

    def __post_init__(self):
        if self.arch not in ("GCN", "GIN"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.num_layers < 1 or self.hidden_dim < 1 or self.num_classes < 1 or self.input_dim < 1:
            raise ValueError(f"layers and dims must be >= 1: {self}")

    @property
    def name(self) -> str:
        return f"{self.arch}-{self.num_layers}-{self.hidden_dim}"

    @classmethod
    def parse(cls, text: str, num_classes: int = 2, input_dim: int = 1) -> "ModelSpec":
        m = _SPEC_RE.match(text.strip())
        if not m:
            raise ValueError(f"model spec {text!r} is not of the form ARCH-LAYERS-DIM")
        return cls(m.group(1), int(m.group(2)), int(m.group(3)), num_classes, input_dim)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class Classifier:
    """Dropout followed by a linear map from the pooled hidden vector."""

    weight: Tensor
    bias: Tensor
    dropout: float = 0.5

    @classmethod
    def init(cls, rng, in_dim: int, num_classes: int, dropout: float = 0.5) -> "Classifier":
        return cls(Tensor(glorot(rng, in_dim, num_classes), requires_grad=True),
                   Tensor(np.zeros(num_classes), requires_grad=True), dropout)

    def frozen_view(self) -> "Classifier":
        # shares the arrays; optimizers rebind .data, so the source is never touched
        return Classifier(Tensor(self.weight.data), Tensor(self.bias.data), self.dropout)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, pooled, mode: str = "eval", rng=None, mask=None) -> Tensor:
        pooled = as_tensor(pooled)
        if mode == "train" and self.dropout > 0:
            if mask is None:
                if rng is None:
                    raise ValueError("train-mode dropout needs an rng or a mask")
                mask = rng.random(pooled.shape) >= self.dropout
            pooled = nn.dropout(pooled, mask, self.dropout)
        return pooled @ self.weight + self.bias


@dataclass
class GnnModel:
    spec: ModelSpec
    layers: list  # per layer: dict of name -> Tensor
    bns: list  # per layer BatchNormState
    classifier: Classifier
    gin_eps: float = 0.0
    forward_count: int = 0

    @classmethod
    def init(cls, spec: ModelSpec, seed: int = 0, dropout: float = 0.5) -> "GnnModel":
        rng = np.random.default_rng(seed)
        layers, bns = [], []
        d_in = spec.input_dim
        for _ in range(spec.num_layers):
            h = spec.hidden_dim
            if spec.arch == "GCN":
                layers.append({"weight": Tensor(glorot(rng, d_in, h), requires_grad=True)})
            else:
                layers.append({
                    "w1": Tensor(glorot(rng, d_in, h), requires_grad=True),
                    "b1": Tensor(np.zeros(h), requires_grad=True),
                    "w2": Tensor(glorot(rng, h, h), requires_grad=True),
                    "b2": Tensor(np.zeros(h), requires_grad=True),
                })
            bns.append(nn.BatchNormState(h))
            d_in = h
        clf = Classifier.init(rng, spec.hidden_dim, spec.num_classes, dropout)
        return cls(spec, layers, bns, clf)

    def conv_parameters(self) -> list[Tensor]:
        out = []
        for layer, bn in zip(self.layers, self.bns):
            out.extend(layer[k] for k in sorted(layer))
            out.extend([bn.gamma, bn.beta])
        return out

    def parameters(self) -> list[Tensor]:
        return self.conv_parameters() + self.classifier.parameters()

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (layer, bn) in enumerate(zip(self.layers, self.bns)):
            for k in sorted(layer):
                out[f"conv{i}.{k}"] = layer[k].data
            out[f"bn{i}.gamma"] = bn.gamma.data
            out[f"bn{i}.beta"] = bn.beta.data
            out[f"bn{i}.running_mean"] = bn.running_mean
            out[f"bn{i}.running_var"] = bn.running_var
        out["classifier.weight"] = self.classifier.weight.data
        out["classifier.bias"] = self.classifier.bias.data
        return out

    def save(self, path, extra: dict | None = None):
        s = self.spec
        header = {
            "kind": "gnn_model",
            "spec": {"arch": s.arch, "num_layers": s.num_layers, "hidden_dim": s.hidden_dim,
                     "num_classes": s.num_classes, "input_dim": s.input_dim},
            "gin_eps": self.gin_eps,
            "dropout": self.classifier.dropout,
            "bn_momentum": self.bns[0].momentum,
            "extra": extra or {},
        }
        return save_container(path, header, self.named_arrays())

    @classmethod
    def load(cls, path) -> "GnnModel":
        header, arrays = load_container(path)
        if header.get("kind") != "gnn_model":
            raise ValueError(f"{path} is not a model checkpoint")
        spec = ModelSpec(**header["spec"])
        model = cls.init(spec, seed=0, dropout=header["dropout"])
        model.gin_eps = header["gin_eps"]
        expected = model.named_arrays()
        if set(expected) != set(arrays):
            raise ValueError(f"{path}: parameter names do not match spec {spec.name}")
        for name, ref in expected.items():
            if arrays[name].shape != ref.shape:
                raise ValueError(f"{path}: {name} has shape {arrays[name].shape}, expected {ref.shape}")
        for i, (layer, bn) in enumerate(zip(model.layers, model.bns)):
            for k in layer:
                layer[k].data = arrays[f"conv{i}.{k}"]
            bn.gamma.data = arrays[f"bn{i}.gamma"]
            bn.beta.data = arrays[f"bn{i}.beta"]
            bn.running_mean = arrays[f"bn{i}.running_mean"]
            bn.running_var = arrays[f"bn{i}.running_var"]
            bn.momentum = header["bn_momentum"]
        model.classifier.weight.data = arrays["classifier.weight"]
        model.classifier.bias.data = arrays["classifier.bias"]
        return model


def frozen(model: GnnModel) -> GnnModel:
    """View of ``model`` whose tensors share data but never require grad."""
    layers = [{k: Tensor(v.data) for k, v in layer.items()} for layer in model.layers]
    bns = [nn.BatchNormState(bn.dim, bn.momentum, bn.eps, Tensor(bn.gamma.data), Tensor(bn.beta.data),
                             bn.running_mean, bn.running_var) for bn in model.bns]
    return GnnModel(model.spec, layers, bns, model.classifier.frozen_view(), model.gin_eps)


# ---------------------------------------------------------------------------
# layers


def normalized_adjacency(adj) -> Tensor:
    """D^-1/2 (A + I) D^-1/2 with degrees taken from the (soft) weights."""
    if isinstance(adj, Tensor) and adj.requires_grad:
        n = adj.shape[-1]
        a = adj + np.eye(n)
        d = nn.power(a.sum(axis=-1, keepdims=True), -0.5)  # m x n x 1
        return a * d * nn.transpose(d)
    a = np.asarray(adj.data if isinstance(adj, Tensor) else adj) + np.eye(adj.shape[-1])
    d = a.sum(axis=-1) ** -0.5
    return Tensor(a * d[..., :, None] * d[..., None, :])


def gcn_layer(h, adj, weight: Tensor, mask=None, a_hat: Tensor | None = None) -> Tensor:
    """ReLU(Â h W); ``a_hat`` may be passed to reuse one normalization across layers."""
    if a_hat is None:
        a_hat = normalized_adjacency(adj)
    h = as_tensor(h)
    if weight.shape[1] < weight.shape[0]:
        out = a_hat @ (h @ weight)
    else:
        out = (a_hat @ h) @ weight
    out = nn.relu(out)
    if mask is not None:
        out = out * np.asarray(mask, dtype=np.float64)[..., None]
    return out


def gin_layer(h, adj, params: dict, eps: float = 0.0, mask=None) -> Tensor:
    """ReLU(MLP((1 + eps) h_i + sum_j a_ij h_j)) with a two-layer ReLU MLP."""
    h = as_tensor(h)
    z = as_tensor(adj) @ h
    z = z + h * (1.0 + eps) if eps != -1.0 else z
    z = nn.relu(z @ params["w1"] + params["b1"])
    out = nn.relu(z @ params["w2"] + params["b2"])
    if mask is not None:
        out = out * np.asarray(mask, dtype=np.float64)[..., None]
    return out


def readout(h: Tensor, weights) -> Tensor:
    """Weighted mean pooling over nodes: sum_i w_i h_i / sum_i w_i."""
    w = as_tensor(weights)
    w3 = w.reshape(w.shape + (1,))
    return (h * w3).sum(axis=1) / w.sum(axis=1, keepdims=True)


@dataclass
class ForwardResult:
    logits: Tensor
    hidden: Tensor  # pooled, m x hidden_dim
    bn_snapshot: list  # list of nn.BNStats (train/capture modes)
    node_hidden: Tensor  # m x n x hidden_dim


def embed_nodes(model: GnnModel, batch: GraphBatch, mode: str = "eval",
                capture: list | None = None) -> Tensor:
    spec = model.spec
    if batch.feature_dim != spec.input_dim:
        raise ShapeError(f"batch feature dim {batch.feature_dim} != model input dim {spec.input_dim}")
    bn_mode = {"train": "train", "eval": "eval", "capture": "capture"}[mode]
    model.forward_count += 1
    mask = batch.node_mask
    h = as_tensor(batch.features)
    a_hat = normalized_adjacency(batch.adjacency) if spec.arch == "GCN" else None
    for layer, bn in zip(model.layers, model.bns):
        if spec.arch == "GCN":
            h = gcn_layer(h, None, layer["weight"], a_hat=a_hat)
        else:
            h = gin_layer(h, batch.adjacency, layer, model.gin_eps)
        h = nn.batch_norm(h, bn, bn_mode, weights=batch.node_weights, capture=capture)
        h = h * mask[..., None].astype(np.float64)
    return h


def model_forward(model: GnnModel, batch: GraphBatch, mode: str = "eval", rng=None,
                  dropout_mask=None, classifier: Classifier | None = None) -> ForwardResult:
    """Full forward: conv stack with BN after every layer, mean readout, classifier.

    ``mode`` is ``train`` (batch-stat BN, dropout), ``eval`` or ``capture``
    (running-stat BN, batch statistics captured for the feature-distribution loss).
    """
    snapshot: list = []
    capture = snapshot if mode in ("train", "capture") else None
    node_h = embed_nodes(model, batch, mode, capture)
    pooled = readout(node_h, batch.node_weights)
    clf = classifier or model.classifier
    logits = clf(pooled, "train" if mode == "train" else "eval", rng=rng, mask=dropout_mask)
    return ForwardResult(logits, pooled, snapshot, node_h)


# ---------------------------------------------------------------------------
# GAT projector


@dataclass
class ProjectorParams:
    weights: list  # K tensors, student_dim x teacher_dim
    att_src: list  # K tensors, teacher_dim x 1
    att_dst: list
    activation: str = "elu"
    slope: float = 0.2

    @classmethod
    def init(cls, student_dim: int, teacher_dim: int, heads: int = 4, seed: int = 0,
             activation: str = "elu") -> "ProjectorParams":
        if heads < 1:
            raise ValueError("projector needs at least one head")
        rng = np.random.default_rng(seed)
        return cls(
            [Tensor(glorot(rng, student_dim, teacher_dim), requires_grad=True) for _ in range(heads)],
            [Tensor(glorot(rng, teacher_dim, 1), requires_grad=True) for _ in range(heads)],
            [Tensor(glorot(rng, teacher_dim, 1), requires_grad=True) for _ in range(heads)],
            activation,
        )

    @property
    def heads(self) -> int:
        return len(self.weights)

    @property
    def output_dim(self) -> int:
        return self.weights[0].shape[1]

    def parameters(self) -> list[Tensor]:
        return self.weights + self.att_src + self.att_dst

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in range(self.heads):
            out[f"proj{k}.weight"] = self.weights[k].data
            out[f"proj{k}.att_src"] = self.att_src[k].data
            out[f"proj{k}.att_dst"] = self.att_dst[k].data
        return out


_ACTIVATIONS = {"elu": nn.elu, "relu": nn.relu, "identity": lambda x: x,
                "leaky_relu": nn.leaky_relu, "sigmoid": nn.sigmoid}


def gat_project(h_s, adj, proj: ProjectorParams, mask=None, return_attention: bool = False):
    """Multi-head graph attention, heads averaged after the activation.

    Attention runs over N(i) and i itself; soft adjacency weights the
    un-normalized scores, which reduces to the masked softmax for 0/1 edges.
    """
    h_s = as_tensor(h_s)
    n = h_s.shape[-2]
    if isinstance(adj, Tensor) and adj.requires_grad:
        support = adj + np.eye(n)
    else:
        support = Tensor(np.asarray(adj.data if isinstance(adj, Tensor) else adj) + np.eye(n))
    act = _ACTIVATIONS[proj.activation]
    out, attn = None, []
    for w, a_src, a_dst in zip(proj.weights, proj.att_src, proj.att_dst):
        wh = h_s @ w
        scores = nn.leaky_relu(wh @ a_src + nn.transpose(wh @ a_dst), proj.slope)
        shift = scores.data.max(axis=-1, keepdims=True)
        ex = nn.exp(scores - shift) * support
        alpha = ex / nn.row_sum(ex)
        attn.append(alpha)
        head = act(alpha @ wh)
        out = head if out is None else out + head
    out = out * (1.0 / proj.heads)
    if mask is not None:
        out = out * np.asarray(mask, dtype=np.float64)[..., None]
    return (out, attn) if return_attention else out


# ---------------------------------------------------------------------------
# teacher pretraining


@dataclass
class TeacherConfig:
    epochs: int = 200
    lr: float = 0.01
    batch_size: int = 32
    weight_decay: float = 0.0
    dropout: float = 0.5
    lr_schedule: str = "cosine"  # or "constant"
    eval_every: int = 1


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)  # (epoch, loss, train_acc, test_acc)

    @property
    def final_test_acc(self) -> float | None:
        return self.rows[-1][3] if self.rows else None


def predict(model: GnnModel, records: list[GraphRecord], batch_size: int = 256,
            classifier: Classifier | None = None) -> np.ndarray:
    preds = []
    with no_grad():
        for b in make_batches(records, batch_size):
            preds.append(model_forward(model, b, "eval", classifier=classifier).logits.data.argmax(axis=1))
    return np.concatenate(preds)


def accuracy(model: GnnModel, records: list[GraphRecord], **kw) -> float:
    if not records:
        raise ValueError("accuracy of an empty record set")
    labels = np.array([r.label for r in records])
    return float((predict(model, records, **kw) == labels).mean())


def train_teacher(train: list[GraphRecord], spec: ModelSpec, cfg: TeacherConfig | None = None,
                  seed: int = 0, test: list[GraphRecord] | None = None) -> tuple[GnnModel, TrainHistory]:
    """Cross-entropy training with Adam; returns the final-epoch model."""
    if not train:
        raise ValueError("empty training split")
    cfg = cfg or TeacherConfig()
    model = GnnModel.init(spec, seed=seed, dropout=cfg.dropout)
    opt = nn.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(seed + 1)
    hist = TrainHistory()
    for epoch in range(cfg.epochs):
        scale = 1.0
        if cfg.lr_schedule == "cosine":
            scale = 0.5 * (1.0 + np.cos(np.pi * epoch / cfg.epochs))
        total, count = 0.0, 0
        for batch in make_batches(train, cfg.batch_size, seed=int(rng.integers(2**31)), balanced=True):
            out = model_forward(model, batch, "train", rng=rng)
            loss = nn.cross_entropy(out.logits, batch.labels, spec.num_classes)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"teacher loss diverged at epoch {epoch}")
            opt.zero_grad()
            backward(loss)
            opt.step(scale)
            total += loss.item() * batch.num_graphs
            count += batch.num_graphs
        last = epoch == cfg.epochs - 1
        if last or (cfg.eval_every and epoch % cfg.eval_every == 0):
            train_acc = accuracy(model, train)
            test_acc = accuracy(model, test) if test else float("nan")
        else:
            train_acc = test_acc = float("nan")
        hist.rows.append((epoch, total / count, train_acc, test_acc))
        log.debug("teacher epoch %d loss %.4f train %.3f test %.3f", epoch, total / count, train_acc, test_acc)
    return model, hist
