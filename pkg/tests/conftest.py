import numpy as np
import pytest

from acgkd.graphs import GraphRecord, collate, load_dataset, split_train_test
from acgkd.models import GnnModel, ModelSpec, TeacherConfig, train_teacher

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_REPORT: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_REPORT:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_REPORT:
            terminalreporter.write_line(line)


def rel_close(a, b, rtol=1e-4, atol=1e-7):
    """Relative error check with an absolute floor, elementwise."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return bool(np.all(np.abs(a - b) <= np.maximum(rtol * np.maximum(np.abs(a), np.abs(b)), atol)))


@pytest.fixture(scope="session")
def mutag():
    return load_dataset("MUTAG")


@pytest.fixture(scope="session")
def mutag_split(mutag):
    s = split_train_test([r.label for r in mutag], 0.7, 0)
    return [mutag[i] for i in s.train], [mutag[i] for i in s.test]


@pytest.fixture
def golden_graphs():
    """A labelled triangle and a single edge, 2-d one-hot features."""
    tri = GraphRecord(3, [(0, 1), (1, 2), (0, 2)], np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]), 1)
    edge = GraphRecord(2, [(0, 1)], np.array([[0.0, 1.0], [0.0, 1.0]]), 0)
    return [tri, edge]


@pytest.fixture
def golden_batch(golden_graphs):
    return collate(golden_graphs)


def random_records(rng, count, d=3, n_lo=3, n_hi=7, classes=2):
    out = []
    for k in range(count):
        n = int(rng.integers(n_lo, n_hi + 1))
        iu = np.triu_indices(n, k=1)
        keep = rng.random(iu[0].size) < 0.4
        edges = [(int(i), int(j)) for i, j, e in zip(iu[0], iu[1], keep) if e]
        out.append(GraphRecord(n, edges, rng.random((n, d)), int(k % classes)))
    return out


@pytest.fixture(scope="session")
def small_teacher(mutag_split):
    """GCN-2-16 on MUTAG, trained briefly; cheap stand-in for teacher-shaped tests."""
    train, _ = mutag_split
    model, _ = train_teacher(train, ModelSpec.parse("GCN-2-16", 2, 7),
                             TeacherConfig(epochs=15, eval_every=0), seed=0)
    return model


@pytest.fixture(scope="session")
def micro_teacher():
    """Untrained GCN-2-4 on 3-d features with non-trivial running statistics."""
    model = GnnModel.init(ModelSpec.parse("GCN-2-4", 2, 3), seed=3)
    rng = np.random.default_rng(0)
    for bn in model.bns:
        bn.running_mean = rng.normal(size=bn.dim) * 0.1
        bn.running_var = 0.5 + rng.random(bn.dim)
    return model
