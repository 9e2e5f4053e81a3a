"""TUDataset parsing, degree features, stratified splits, padded batches, and
JSON/DOT export of graphs."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor


class DataFormatError(ValueError):
    """A dataset file is missing or malformed."""


class StratificationError(ValueError):
    pass


@dataclass
class GraphRecord:
    node_count: int
    edges: list  # sorted list of (i, j) with i < j
    features: np.ndarray  # node_count x d
    label: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        d = feats.shape[-1] if feats.ndim == 2 else (0 if feats.size == 0 else -1)
        self.features = feats.reshape(self.node_count, d)
        self.edges = sorted({(int(min(i, j)), int(max(i, j))) for i, j in self.edges if i != j})
        for i, j in self.edges:
            if not (0 <= i < self.node_count and 0 <= j < self.node_count):
                raise ValueError(f"edge ({i}, {j}) outside [0, {self.node_count})")

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.node_count, self.node_count))
        if self.edges:
            e = np.asarray(self.edges)
            a[e[:, 0], e[:, 1]] = 1.0
            a[e[:, 1], e[:, 0]] = 1.0
        return a

    def __eq__(self, other):
        return (isinstance(other, GraphRecord) and self.node_count == other.node_count
                and self.edges == other.edges and self.label == other.label
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))


@dataclass
class GraphBatch:
    """Padded dense batch. ``features``/``adjacency`` may be tensors when the
    batch is synthesized; ``node_weights`` defaults to ``node_mask``."""

    features: np.ndarray | Tensor  # m x n x d
    adjacency: np.ndarray | Tensor  # m x n x n
    node_mask: np.ndarray  # m x n bool
    labels: np.ndarray  # m
    node_weights: np.ndarray | Tensor | None = None

    def __post_init__(self):
        self.node_mask = np.asarray(self.node_mask, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.node_weights is None:
            self.node_weights = self.node_mask.astype(np.float64)

    @property
    def num_graphs(self) -> int:
        return self.node_mask.shape[0]

    @property
    def n_max(self) -> int:
        return self.node_mask.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[-1]

    def detached(self) -> "GraphBatch":
        """Copy with every tensor field replaced by its plain array."""
        def arr(x):
            return x.data.copy() if isinstance(x, Tensor) else np.array(x, copy=True)
        return GraphBatch(arr(self.features), arr(self.adjacency), self.node_mask.copy(),
                          self.labels.copy(), arr(self.node_weights))


@dataclass
class DatasetSplit:
    train: np.ndarray
    test: np.ndarray
    seed: int = 0
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# parsing


def _read_ints(path: Path, what: str) -> list[list[int]]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([int(float(tok)) for tok in line.replace(",", " ").split()])
            except ValueError:
                raise DataFormatError(f"{path.name}:{lineno}: cannot parse {what} {line!r}") from None
    return rows


def parse_tu_dataset(directory, name: str) -> list[GraphRecord]:
    """Read ``<name>_A.txt``, ``_graph_indicator.txt``, ``_graph_labels.txt`` and
    optionally ``_node_labels.txt`` from ``directory``.

    Node labels, when present, become one-hot features; otherwise graphs get an
    empty (0-dim) feature matrix for :func:`synthesize_degree_features` to fill.
    """
    d = Path(directory)
    files = {k: d / f"{name}_{k}.txt" for k in ("A", "graph_indicator", "graph_labels", "node_labels")}
    for key in ("A", "graph_indicator", "graph_labels"):
        if not files[key].is_file():
            raise DataFormatError(f"missing required file {files[key].name} in {d}")

    indicator = [r[0] for r in _read_ints(files["graph_indicator"], "graph id")]
    raw_labels = [r[0] for r in _read_ints(files["graph_labels"], "graph label")]
    n_nodes = len(indicator)
    n_graphs = len(raw_labels)
    if n_graphs == 0:
        raise DataFormatError(f"{files['graph_labels'].name} is empty")
    for lineno, g in enumerate(indicator, 1):
        if not 1 <= g <= n_graphs:
            raise DataFormatError(f"{files['graph_indicator'].name}:{lineno}: graph id {g} out of range")

    graph_of = np.asarray(indicator) - 1
    counts = np.bincount(graph_of, minlength=n_graphs)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    # TU files list nodes graph by graph; local index = global - first node of graph
    first = np.full(n_graphs, -1)
    for node, g in enumerate(graph_of):
        if first[g] < 0:
            first[g] = node

    edges = [[] for _ in range(n_graphs)]
    with open(files["A"]) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                u, v = (int(tok) for tok in line.replace(",", " ").split()[:2])
            except ValueError:
                raise DataFormatError(f"{files['A'].name}:{lineno}: bad edge {line!r}") from None
            if not (1 <= u <= n_nodes and 1 <= v <= n_nodes):
                raise DataFormatError(f"{files['A'].name}:{lineno}: dangling node index in {line!r}")
            gu, gv = graph_of[u - 1], graph_of[v - 1]
            if gu != gv:
                raise DataFormatError(f"{files['A'].name}:{lineno}: edge joins graphs {gu + 1} and {gv + 1}")
            if u != v:
                edges[gu].append((u - 1 - first[gu], v - 1 - first[gu]))

    if files["node_labels"].is_file():
        node_labels = [r[0] for r in _read_ints(files["node_labels"], "node label")]
        if len(node_labels) != n_nodes:
            raise DataFormatError(f"{files['node_labels'].name}: {len(node_labels)} rows for {n_nodes} nodes")
        values = sorted(set(node_labels))
        index = {v: i for i, v in enumerate(values)}
        feats = np.zeros((n_nodes, len(values)))
        feats[np.arange(n_nodes), [index[v] for v in node_labels]] = 1.0
    else:
        feats = np.zeros((n_nodes, 0))

    classes = sorted(set(raw_labels))
    label_index = {c: i for i, c in enumerate(classes)}
    records = []
    for g in range(n_graphs):
        lo, hi = offsets[g], offsets[g + 1]
        records.append(GraphRecord(int(counts[g]), edges[g], feats[lo:hi], label_index[raw_labels[g]]))
    return records


def dataset_stats(records: list[GraphRecord]) -> dict:
    sizes = np.array([r.node_count for r in records])
    return {
        "graphs": len(records),
        "classes": len({r.label for r in records}),
        "mean_size": float(sizes.mean()),
        "max_size": int(sizes.max()),
        "feature_dim": int(records[0].features.shape[1]),
    }


def find_dataset(name: str, root=None) -> Path:
    """Locate ``<root>/<name>`` (root defaults to ``$ACGKD_DATA`` then ``./data``)."""
    candidates = []
    if root is not None:
        candidates.append(Path(root))
    if os.environ.get("ACGKD_DATA"):
        candidates.append(Path(os.environ["ACGKD_DATA"]))
    candidates.append(Path.cwd() / "data")
    candidates.append(Path(__file__).resolve().parents[2] / "data")
    for c in candidates:
        if (c / name / f"{name}_A.txt").is_file():
            return c / name
        if (c / f"{name}_A.txt").is_file():
            return c
    raise DataFormatError(f"dataset {name} not found under {[str(c) for c in candidates]}")


def load_dataset(name: str, root=None, degree_scheme: str = "onehot-degree",
                 max_degree: int = 135) -> list[GraphRecord]:
    records = parse_tu_dataset(find_dataset(name, root), name)
    if records[0].features.shape[1] == 0:
        records = synthesize_degree_features(records, degree_scheme, max_degree)
    return records


def synthesize_degree_features(records: list[GraphRecord], scheme: str = "onehot-degree",
                               max_degree: int = 135) -> list[GraphRecord]:
    out = []
    for r in records:
        if scheme == "constant":
            feats = np.ones((r.node_count, 1))
        elif scheme == "onehot-degree":
            deg = r.adjacency().sum(axis=1).astype(int) if r.node_count else np.zeros(0, int)
            feats = np.zeros((r.node_count, max_degree + 1))
            feats[np.arange(r.node_count), np.minimum(deg, max_degree)] = 1.0
        else:
            raise ValueError(f"unknown feature scheme {scheme!r}")
        out.append(GraphRecord(r.node_count, list(r.edges), feats, r.label))
    return out


# ---------------------------------------------------------------------------
# splits and batches


def split_train_test(labels, ratio: float = 0.7, seed: int = 0) -> DatasetSplit:
    """Stratified shuffle split with ``|train| = round(ratio * n)``.

    ``labels`` may be an int (unlabelled, plain shuffle) or a label sequence.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    if isinstance(labels, (int, np.integer)):
        perm = rng.permutation(int(labels))
        k = int(round(ratio * labels))
        return DatasetSplit(np.sort(perm[:k]), np.sort(perm[k:]), seed)

    labels = np.asarray(labels)
    n = labels.size
    target = int(round(ratio * n))
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < 2):
        bad = classes[counts < 2].tolist()
        raise StratificationError(f"classes {bad} have fewer than 2 graphs")
    # largest-remainder apportionment keeps each class within one graph of its share
    exact = counts * target / n
    take = np.floor(exact).astype(int)
    order = np.argsort(-(exact - take), kind="stable")
    for c in order[: target - take.sum()]:
        take[c] += 1
    train, test = [], []
    for c, k in zip(classes, take):
        idx = rng.permutation(np.flatnonzero(labels == c))
        train.append(idx[:k])
        test.append(idx[k:])
    return DatasetSplit(np.sort(np.concatenate(train)), np.sort(np.concatenate(test)), seed)


def collate(records: list[GraphRecord]) -> GraphBatch:
    m = len(records)
    n_max = max(r.node_count for r in records)
    d = records[0].features.shape[1]
    feats = np.zeros((m, n_max, d))
    adj = np.zeros((m, n_max, n_max))
    mask = np.zeros((m, n_max), dtype=bool)
    for i, r in enumerate(records):
        if r.features.shape[1] != d:
            raise ValueError("records have differing feature dimensions")
        n = r.node_count
        feats[i, :n] = r.features
        adj[i, :n, :n] = r.adjacency()
        mask[i, :n] = True
    return GraphBatch(feats, adj, mask, np.array([r.label for r in records]))


def make_batches(records: list[GraphRecord], batch_size: int, seed: int | None = None,
                 balanced: bool = False) -> list[GraphBatch]:
    """Padded batches; records are shuffled when ``seed`` is given.

    ``balanced`` spreads records evenly over ``ceil(len / batch_size)`` batches
    instead of leaving a short tail batch (which skews batch-norm statistics).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(records))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(records))
    if balanced:
        chunks = np.array_split(order, -(-len(records) // batch_size))
    else:
        chunks = [order[s:s + batch_size] for s in range(0, len(records), batch_size)]
    return [collate([records[i] for i in c]) for c in chunks if len(c)]


# ---------------------------------------------------------------------------
# export


def graph_to_json(g: GraphRecord) -> dict:
    return {
        "nodes": [{"id": i, "features": g.features[i].tolist()} for i in range(g.node_count)],
        "edges": [[int(i), int(j)] for i, j in g.edges],
        "label": int(g.label),
    }


def graph_from_json(obj: dict) -> GraphRecord:
    nodes = sorted(obj["nodes"], key=lambda nd: nd["id"])
    n = len(nodes)
    d = len(nodes[0]["features"]) if nodes else 0
    feats = np.array([nd["features"] for nd in nodes], dtype=np.float64).reshape(n, d)
    return GraphRecord(n, [tuple(e) for e in obj["edges"]], feats, int(obj["label"]))


def graph_to_dot(g: GraphRecord, name: str = "G") -> str:
    lines = [f"graph {name} {{", f'  label="class {g.label}";']
    lines += [f"  {i};" for i in range(g.node_count)]
    lines += [f"  {i} -- {j};" for i, j in g.edges]
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_graph(g: GraphRecord, fmt: str, path) -> Path:
    path = Path(path)
    if fmt == "json":
        text = json.dumps(graph_to_json(g))
    elif fmt == "dot":
        text = graph_to_dot(g)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def import_graph(path) -> GraphRecord:
    return graph_from_json(json.loads(Path(path).read_text()))
