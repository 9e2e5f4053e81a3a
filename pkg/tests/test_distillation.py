import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acgkd import nn
from acgkd.distillation import (BetaSchedule, DistillConfig, TemperatureModule, beta_at, distill, distill_epoch,
                                distill_step, dynamic_weight, evaluate, init_state, kd_loss, load_student,
                                save_student, student_forward, temperature_forward)
from acgkd.graphs import GraphRecord, collate
from acgkd.models import GnnModel, ModelSpec, model_forward
from acgkd.tensor import Tensor, backward, finite_difference_gradient, no_grad

from conftest import rel_close, random_records


def softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def pseudo_like(seed, m=4, n=4, d=3):
    """A soft-adjacency batch shaped like generator output."""
    rng = np.random.default_rng(seed)
    b = collate(random_records(rng, m, d=d, n_lo=n, n_hi=n))
    b.adjacency = b.adjacency * rng.uniform(0.2, 1.0, size=b.adjacency.shape)
    b.adjacency = (b.adjacency + np.swapaxes(b.adjacency, 1, 2)) / 2
    b.labels = rng.integers(2, size=m)
    return b


def digest(arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


@pytest.fixture
def state(micro_teacher):
    return init_state(micro_teacher, ModelSpec.parse("GCN-2-3", 2, 3), DistillConfig(epochs=5), seed=0)


# -- schedules ----------------------------------------------------------------


def test_dynamic_weight_examples():
    assert dynamic_weight(3.7, 0.0) == 1.0
    assert math.isclose(dynamic_weight(2.0, 2.0), (1 + math.exp(-2)) / 2, rel_tol=1e-12)
    assert round(dynamic_weight(2.0, 2.0), 4) == 0.5677


def test_dynamic_weight_extremes_stay_finite():
    assert 0.0 <= dynamic_weight(0.0, 1e6) < 1e-300 or dynamic_weight(0.0, 1e6) == 0.0
    assert math.isfinite(dynamic_weight(-800.0, 5.0))


def test_dynamic_weight_increases_with_mu():
    rng = np.random.default_rng(0)
    for _ in range(100):
        mu, loss = rng.uniform(-5, 20), rng.uniform(0.01, 20)
        h = 1e-5
        d = (dynamic_weight(mu + h, loss) - dynamic_weight(mu - h, loss)) / (2 * h)
        assert d > 0, (mu, loss)


def test_beta_examples():
    s = BetaSchedule(2.0, 0.0, 400)
    assert beta_at(0, s) == 2.0
    assert math.isclose(beta_at(200, s), 1.0)
    assert math.isclose(beta_at(400, s), 0.0, abs_tol=1e-15)
    assert beta_at(-3, s) == 2.0 and beta_at(900, s) == beta_at(400, s)
    with pytest.raises(ValueError):
        BetaSchedule(0.5, 1.0)


# -- temperature module --------------------------------------------------------


def test_zero_initialized_module_gives_midpoint():
    m = TemperatureModule.init(2, zero=True)
    z = np.random.default_rng(0).normal(size=(5, 2))
    assert temperature_forward(z, z, m, 1.0).item() == 4.5


def temperature_grads(beta, reverse=True, seed=0):
    rng = np.random.default_rng(seed)
    m = TemperatureModule.init(2, seed=seed)
    t, s = rng.normal(size=(6, 2)), Tensor(rng.normal(size=(6, 2)))
    if reverse:
        tau = temperature_forward(t, s, m, beta)
    else:
        x = Tensor(np.concatenate([softmax(t).mean(0), softmax(s.data).mean(0)])[None, :])
        raw = nn.relu(x @ m.w1 + m.b1) @ m.w2 + m.b2
        tau = (nn.sigmoid(raw) * (m.tau_max - m.tau_min) + m.tau_min).reshape(())
    loss = nn.kl_divergence(t, s, tau) * nn.square(tau)
    backward(loss, m.parameters())
    return [p.grad.copy() for p in m.parameters()]


def test_zero_beta_zeroes_module_gradients():
    assert all(np.all(g == 0) for g in temperature_grads(0.0))


@given(st.floats(0.0, 1.0), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_reversal_sign(beta, seed):
    plain = temperature_grads(0.0, reverse=False, seed=seed)
    rev = temperature_grads(beta, seed=seed)
    for a, b in zip(rev, plain):
        assert np.allclose(a, -beta * b, rtol=1e-12, atol=1e-15)


def test_module_update_ascends_and_student_descends(micro_teacher):
    cfg = DistillConfig(epochs=4, temp_lr=0.5, lr=0.005, use_cl=False, alpha_mse=0.0)
    st_ = init_state(micro_teacher, ModelSpec.parse("GCN-2-3", 2, 3), cfg, seed=1)
    batch = pseudo_like(3)
    mask = np.ones((4, 4), bool)

    def loss_at():
        with no_grad():
            t = model_forward(st_.teacher, batch, "eval")
            s_logits, s_proj, _ = student_forward(st_, batch, "train", dropout_mask=mask)
            tau = temperature_forward(t.logits, s_logits, st_.temperature, 1.0)
            return kd_loss(t.logits, t.hidden, s_logits, s_proj, batch.labels, tau, cfg)[1]["total"]

    before = loss_at()
    temp_before = [p.data.copy() for p in st_.temperature.parameters()]
    student_before = [p.data.copy() for p in st_.student_parameters()]
    distill_step(st_, batch, 0, cfg, np.random.default_rng(0), dropout_mask=mask)
    # move only the module: the loss goes up
    moved_student = [p.data.copy() for p in st_.student_parameters()]
    for p, v in zip(st_.student_parameters(), student_before):
        p.data = v
    assert loss_at() > before
    # move only the student: the loss goes down
    for p, v in zip(st_.temperature.parameters(), temp_before):
        p.data = v
    for p, v in zip(st_.student_parameters(), moved_student):
        p.data = v
    assert loss_at() < before


# -- kd loss --------------------------------------------------------------------


def test_kd_loss_vanishes_on_identical_outputs():
    rng = np.random.default_rng(0)
    z, h = rng.normal(size=(4, 2)), rng.normal(size=(4, 5))
    _, parts = kd_loss(z, h, Tensor(z), Tensor(h), [0, 1, 0, 1], 3.0, DistillConfig())
    assert abs(parts["L_div"]) < 1e-14 and parts["L_mse"] == 0.0


def test_uniform_student_cross_entropy_is_ln2():
    _, parts = kd_loss(np.ones((3, 2)), None, Tensor(np.zeros((3, 2))), None, [1, 0, 1], 2.0, DistillConfig())
    assert math.isclose(parts["L_cls"], math.log(2), rel_tol=1e-12)


def direct_kl(t, s, tau):
    p, q = softmax(t / tau), softmax(s / tau)
    return float(np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1)))


def test_kd_divergence_against_direct_oracle():
    rng = np.random.default_rng(0)
    t, s = rng.normal(size=(5, 3)) * 2, rng.normal(size=(5, 3))
    cfg = DistillConfig()
    _, parts = kd_loss(t, None, Tensor(s), None, [0] * 5, 1.0, cfg)
    assert math.isclose(parts["L_div"], direct_kl(t, s, 1.0), rel_tol=1e-10)
    # the unscaled divergence vanishes at high temperature ...
    assert direct_kl(t, s, 1e4) < 1e-7
    # ... while the tau^2-scaled one tends to half the mean centred squared logit gap
    d = t - s
    limit = 0.5 * np.mean(np.mean((d - d.mean(1, keepdims=True)) ** 2, axis=1))
    _, parts = kd_loss(t, None, Tensor(s), None, [0] * 5, 1e4, cfg)
    assert math.isclose(parts["L_div"], limit, rel_tol=1e-3)


# -- distillation step ------------------------------------------------------------


def test_teacher_and_classifier_stay_bit_identical(micro_teacher, state):
    before = digest(micro_teacher.named_arrays().values())
    clf = digest([micro_teacher.classifier.weight.data, micro_teacher.classifier.bias.data])
    batches = [pseudo_like(k) for k in range(3)]
    for epoch in range(3):
        distill_epoch(state, batches, epoch, DistillConfig(epochs=5), np.random.default_rng(epoch))
        assert digest([state.classifier.weight.data, state.classifier.bias.data]) == clf
    assert digest(micro_teacher.named_arrays().values()) == before


def test_v_star_scales_student_gradients(state):
    batch, mask = pseudo_like(0), np.ones((4, 4), bool)
    cfg = DistillConfig()

    def grads(scale):
        for p in state.student_parameters():
            p.grad = None
        with no_grad():
            t = model_forward(state.teacher, batch, "eval")
        s_logits, s_proj, _ = student_forward(state, batch, "train", dropout_mask=mask)
        total, _ = kd_loss(t.logits, t.hidden, s_logits, s_proj, batch.labels, 2.0, cfg)
        backward(total * scale, state.student_parameters())
        return [p.grad.copy() for p in state.student_parameters()]

    v = dynamic_weight(1.3, 2.1)
    scaled, plain = grads(v), grads(1.0)
    # the source-side attention vector cancels inside each softmax row, so its gradient is pure roundoff
    floor = 1e-12 * max(np.abs(g).max() for g in plain)
    for a, b in zip(scaled, plain):
        assert np.allclose(a, v * b, rtol=1e-10, atol=floor)


def test_distill_step_gradient_matches_finite_differences(state):
    batch = pseudo_like(5, m=2)
    mask = np.random.default_rng(1).random((2, 4)) > 0.3
    cfg = DistillConfig()

    def f(_=None):
        with no_grad():
            t = model_forward(state.teacher, batch, "eval")
        s_logits, s_proj, _ = student_forward(state, batch, "train", dropout_mask=mask)
        tau = temperature_forward(t.logits, s_logits, state.temperature, 0.5)
        total, _ = kd_loss(t.logits, t.hidden, s_logits, s_proj, batch.labels, tau, cfg)
        return total * 0.8

    params = state.student_parameters()
    backward(f(), params)
    for p in params:
        assert rel_close(p.grad, finite_difference_gradient(f, p))


def test_zero_divergence_weights_reduce_to_supervised_training(micro_teacher):
    cfg = DistillConfig(epochs=3, alpha_div=0.0, alpha_mse=0.0, use_cl=False)
    spec = ModelSpec.parse("GCN-2-3", 2, 3)
    batches = [pseudo_like(k) for k in range(3)]
    run = distill(micro_teacher, batches, spec, cfg, seed=4)

    ref = init_state(micro_teacher, spec, cfg, seed=4)
    rng = np.random.default_rng(np.random.SeedSequence(4).spawn(1)[0])
    curve = []
    for epoch in range(cfg.epochs):
        losses = []
        for b in batches:
            logits, _, _ = student_forward(ref, b, "train", rng)
            loss = nn.cross_entropy(logits, b.labels, 2)
            ref.student_opt.zero_grad()
            backward(loss)
            ref.student_opt.step(cfg.lr_scale(epoch))
            losses.append(loss.item())
        curve.append(np.mean(losses))
    assert np.allclose([r[1] for r in run.history], curve, rtol=1e-12)


def test_tau_stays_in_range(micro_teacher):
    cfg = DistillConfig(epochs=40, temp_lr=5.0, beta=BetaSchedule(num_loops=40), eval_every=0)
    run = distill(micro_teacher, [pseudo_like(k) for k in range(2)], ModelSpec.parse("GCN-2-3", 2, 3), cfg)
    taus = [r[5] for r in run.history]
    assert all(1.0 <= t <= 8.0 for t in taus)


# -- evaluation and persistence -------------------------------------------------------


def test_evaluate_on_memorized_labels(state):
    recs = random_records(np.random.default_rng(0), 12)
    with no_grad():
        pred = student_forward(state, collate(recs), "eval")[0].data.argmax(1)
    relabelled = [GraphRecord(r.node_count, r.edges, r.features, int(y)) for r, y in zip(recs, pred)]
    assert evaluate(state, relabelled) == 1.0
    with pytest.raises(ValueError):
        evaluate(state, [])


def test_random_model_is_at_chance(micro_teacher):
    recs = random_records(np.random.default_rng(1), 200)
    accs = [evaluate(init_state(micro_teacher, ModelSpec.parse("GCN-2-3", 2, 3), DistillConfig(), seed=s), recs)
            for s in range(20)]
    assert abs(np.mean(accs) - 0.5) <= 0.05


def test_student_checkpoint_round_trip(tmp_path, micro_teacher, state):
    distill_epoch(state, [pseudo_like(0)], 0, DistillConfig(epochs=5), np.random.default_rng(0))
    recs = random_records(np.random.default_rng(2), 30)
    save_student(state, tmp_path / "s.ckpt")
    back = load_student(tmp_path / "s.ckpt", micro_teacher)
    assert evaluate(back, recs) == evaluate(state, recs)
    with no_grad():
        a = student_forward(state, collate(recs), "eval")[0].data
        b = student_forward(back, collate(recs), "eval")[0].data
    assert np.array_equal(a, b)
