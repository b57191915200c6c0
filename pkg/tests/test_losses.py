import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moelora.adapters import dispatch
from moelora.losses import (
    AuxLossConfig,
    ExpertQueue,
    auxiliary_loss,
    expert_separation_score,
    experts_contrastive_loss,
    load_balance_loss,
    mse_loss,
    update_queues,
)
from moelora.numerics import (
    DimensionError,
    ParameterError,
    Tape,
    Tensor2D,
    backward,
    numerical_gradient,
    relative_error,
    softmax_rows,
)

# independent nested-loop oracles


def brute_load_balance(p: np.ndarray) -> float:
    T, n = p.shape
    f = [sum(1 for t in range(T) if int(np.argmax(p[t])) == i) / T for i in range(n)]
    P = [math.fsum(p[t][i] for t in range(T)) / T for i in range(n)]
    return n * math.fsum(f[i] * P[i] for i in range(n))


def brute_contrastive(anchors, queues, tau) -> float:
    unit = lambda v: v / math.sqrt(math.fsum(x * x for x in v))
    keys = [[unit(k) for k in q] for q in queues]
    every = [k for ks in keys for k in ks]
    terms = []
    for i, rows in enumerate(anchors):
        for a in rows:
            if not np.any(a):
                continue
            q = unit(a)
            den = math.fsum(math.exp(float(q @ k) / tau) for k in every)
            for kp in keys[i]:
                terms.append(-math.log(math.exp(float(q @ kp) / tau) / den))
    return math.fsum(terms) / len(terms) if terms else 0.0


def filled_queues(blocks, capacity=8):
    queues = []
    for rows in blocks:
        q = ExpertQueue(capacity)
        if len(rows):
            q.push(rows)
        queues.append(q)
    return queues


# --- load balance ----------------------------------------------------------


# n * fl(1/n) itself differs from 1 for n = 49, so the range stops short of it
@pytest.mark.parametrize("n", range(1, 49))
@pytest.mark.parametrize("T", [1, 7, 12, 64])
def test_uniform_gate_gives_exactly_one(n, T):
    p = softmax_rows(Tensor2D.zeros(T, n))
    assert load_balance_loss(p, dispatch(p, 2 if n > 1 else 1)).item() == 1.0


@pytest.mark.parametrize("n", [2, 4, 8])
def test_one_hot_gate_gives_n(n):
    p = np.zeros((6, n))
    p[:, 0] = 1.0
    p = Tensor2D(p)
    assert load_balance_loss(p, dispatch(p, 1)).item() == n


def test_load_balance_frozen_instance():
    # instance regenerated from a fixed stream; value frozen from the nested-loop oracle
    rng = np.random.default_rng(2024)
    for _ in range(3):
        rng.normal(size=(2, 5))
    for _ in range(3):
        rng.normal(size=(4, 5))
    p = Tensor2D(rng.dirichlet(np.ones(4), size=8))
    assert load_balance_loss(p, dispatch(p, 2)).item() == pytest.approx(1.2386398693959493, rel=1e-12)


def test_load_balance_matches_direct_summation():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = softmax_rows(Tensor2D(rng.normal(size=(8, 4)) * 2))
        got = load_balance_loss(p, dispatch(p, 2)).item()
        assert abs(got - brute_load_balance(p.data)) <= 1e-12


def test_load_balance_gradient_flows_through_mean_probability_only():
    rng = np.random.default_rng(2)
    for _ in range(20):
        logits = Tensor2D(rng.uniform(-1, 1, (9, 4)), requires_grad=True)
        res = dispatch(softmax_rows(logits), 2)

        def f():
            p = softmax_rows(logits)
            return load_balance_loss(p, res)  # assignments (and so f) held fixed

        with Tape() as tape:
            loss = f()
        g = backward(loss, tape)[logits].data
        assert relative_error(g, numerical_gradient(f, logits)) < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.permutations(list(range(5))))
def test_load_balance_permutation_invariant(seed, perm):
    p = softmax_rows(Tensor2D(np.random.default_rng(seed).normal(size=(10, 5)) * 2))
    q = Tensor2D(p.data[:, perm])
    a = load_balance_loss(p, dispatch(p, 1)).item()
    b = load_balance_loss(q, dispatch(q, 1)).item()
    assert a == pytest.approx(b, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 20))
def test_load_balance_at_least_one_for_identical_rows(seed, n, T):
    row = np.random.default_rng(seed).dirichlet(np.ones(n))
    p = Tensor2D(np.tile(row, (T, 1)))
    # every token has the same argmax, so the bound is n * max(P) >= 1
    assert load_balance_loss(p, dispatch(p, 1)).item() >= 1.0 - 1e-12


def test_balance_count_topk_variant():
    p = Tensor2D([[0.5, 0.3, 0.2], [0.1, 0.2, 0.7]])
    res = dispatch(p, 2)
    # slots: token0 -> {0,1}, token1 -> {2,1}; share over T*k = 4 slots
    f = np.array([1, 2, 1]) / 4
    P = p.data.mean(axis=0)
    assert load_balance_loss(p, res, count_topk=True).item() == pytest.approx(3 * float(f @ P), rel=1e-15)


def test_load_balance_empty_batch():
    p = Tensor2D(np.zeros((0, 3)))
    with pytest.raises(DimensionError):
        load_balance_loss(p, dispatch(Tensor2D([[1.0, 0.0, 0.0]]), 1))


# --- queues ----------------------------------------------------------------


def test_queue_keeps_newest_rows():
    q = ExpertQueue(4, normalize=False)
    rows = np.arange(1.0, 13.0).reshape(6, 2)
    q.push(rows)
    assert q.entries().tolist() == rows[2:].tolist()
    q.push(np.array([[100.0, 0.0]]))
    assert q.entries().tolist() == rows[3:].tolist() + [[100.0, 0.0]]


def test_queue_normalizes_on_insertion():
    q = ExpertQueue(3)
    q.push(np.array([[3.0, 4.0]]))
    np.testing.assert_allclose(q.entries(), [[0.6, 0.8]], rtol=1e-15)


def test_queue_skips_zero_vectors():
    q = ExpertQueue(3)
    q.push(np.array([[0.0, 0.0]]))
    assert len(q) == 0
    q.push(np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert len(q) == 1


def test_queue_rejects_dimension_change():
    q = ExpertQueue(3)
    q.push(np.ones((1, 2)))
    with pytest.raises(DimensionError):
        q.push(np.ones((1, 3)))


def test_queue_capacity_validated():
    with pytest.raises(ParameterError):
        ExpertQueue(0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.lists(st.integers(0, 12), min_size=1, max_size=8), st.integers(0, 2**32 - 1))
def test_queue_invariants(capacity, sizes, seed):
    rng = np.random.default_rng(seed)
    q1, q2 = ExpertQueue(capacity), ExpertQueue(capacity)
    pushed = []
    for m in sizes:
        rows = rng.normal(size=(m, 3))
        q1.push(rows)
        q2.push(rows.copy())
        pushed.extend(rows)
    entries = q1.entries()
    assert len(q1) <= capacity
    assert len(q1) == min(capacity, len(pushed))
    if len(q1):
        np.testing.assert_allclose(np.linalg.norm(entries, axis=1), 1.0, atol=1e-9)
        expected = np.array(pushed[-len(q1) :])
        np.testing.assert_allclose(entries, expected / np.linalg.norm(expected, axis=1, keepdims=True), rtol=1e-14)
    assert np.array_equal(entries, q2.entries())


def test_queue_entries_are_detached_copies():
    out = Tensor2D(np.array([[1.0, 2.0]]), requires_grad=True)
    q = ExpertQueue(2, normalize=False)
    q.push(out)
    out.data = np.array([[9.0, 9.0]])
    assert q.entries().tolist() == [[1.0, 2.0]]


def test_update_queues_checks_row_counts():
    p = Tensor2D([[0.9, 0.1], [0.2, 0.8]])
    res = dispatch(p, 1)
    queues = [ExpertQueue(4), ExpertQueue(4)]
    update_queues(queues, [Tensor2D([[1.0, 0.0]]), Tensor2D([[0.0, 2.0]])], res)
    assert [len(q) for q in queues] == [1, 1]
    with pytest.raises(DimensionError):
        update_queues(queues, [Tensor2D([[1.0, 0.0], [1.0, 1.0]]), None], res)


# --- contrastive loss ------------------------------------------------------


def test_closed_form_three_vectors():
    anchor = Tensor2D([[1.0, 0.0, 0.0]])
    queues = filled_queues([np.array([[1.0, 0.0, 0.0]]), np.array([[-1.0, 0.0, 0.0]])])
    got = experts_contrastive_loss([anchor, None], queues, tau=1.0).item()
    assert abs(got - math.log(1.0 + math.exp(-2.0))) <= 1e-12


def test_lower_temperature_lowers_closed_form_loss():
    anchor = Tensor2D([[1.0, 0.0, 0.0]])
    queues = filled_queues([np.array([[1.0, 0.0, 0.0]]), np.array([[-1.0, 0.0, 0.0]])])
    values = [experts_contrastive_loss([anchor, None], queues, tau).item() for tau in (2.0, 1.0, 0.5, 0.07)]
    assert values == sorted(values, reverse=True)


def test_empty_cases_contribute_zero():
    a = Tensor2D([[1.0, 0.0]])
    assert experts_contrastive_loss([a, a], [ExpertQueue(2), ExpertQueue(2)], 0.07).item() == 0.0
    # expert 0 has anchors but an empty queue, expert 1 has no anchors
    queues = filled_queues([np.zeros((0, 2)), np.array([[0.0, 1.0]])])
    assert experts_contrastive_loss([a, None], queues, 0.07).item() == 0.0


def test_zero_anchors_skipped():
    queues = filled_queues([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])])
    with_zero = Tensor2D([[0.0, 0.0], [1.0, 1.0]])
    without = Tensor2D([[1.0, 1.0]])
    a = experts_contrastive_loss([with_zero, None], queues, 0.5).item()
    b = experts_contrastive_loss([without, None], queues, 0.5).item()
    assert a == b


def test_non_positive_tau_rejected():
    with pytest.raises(ParameterError):
        experts_contrastive_loss([None], [ExpertQueue(1)], 0.0)


def test_contrastive_frozen_instance():
    # n=3, two anchors per expert, queues of 4, tau=0.07; value frozen from the nested-loop oracle
    rng = np.random.default_rng(2024)
    anchors = [rng.normal(size=(2, 5)) for _ in range(3)]
    queues = filled_queues([rng.normal(size=(4, 5)) for _ in range(3)])
    got = experts_contrastive_loss([Tensor2D(a) for a in anchors], queues, 0.07).item()
    assert got == pytest.approx(10.081797027690811, rel=1e-10)


def test_contrastive_matches_nested_loops_on_random_instances():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(1, 5))
        d = int(rng.integers(2, 6))
        blocks = [rng.normal(size=(int(rng.integers(0, 9)), d)) for _ in range(n)]
        anchors = [rng.normal(size=(int(rng.integers(0, 9)), d)) for _ in range(n)]
        tau = float(rng.choice([0.07, 0.5, 1.0]))
        got = experts_contrastive_loss(
            [Tensor2D(a) if len(a) else None for a in anchors], filled_queues(blocks), tau
        ).item()
        expected = brute_contrastive(anchors, blocks, tau)
        assert relative_error(np.array([got]), np.array([expected])) < 1e-10


def test_unnormalized_variant_uses_raw_dot_products():
    anchor = Tensor2D([[2.0, 0.0]])
    pos = ExpertQueue(2, normalize=False)
    neg = ExpertQueue(2, normalize=False)
    pos.push(np.array([[0.5, 0.0]]))
    neg.push(np.array([[0.0, 3.0]]))
    got = experts_contrastive_loss([anchor, None], [pos, neg], 1.0, normalize=False).item()
    assert got == pytest.approx(-math.log(math.exp(1.0) / (math.exp(1.0) + 1.0)), rel=1e-14)


def test_contrastive_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(2, 5))
        queues = filled_queues([rng.normal(size=(int(rng.integers(1, 7)), 4)) for _ in range(n)])
        outs = [Tensor2D(rng.uniform(-1, 1, (int(rng.integers(1, 5)), 4)), requires_grad=True) for _ in range(n)]
        f = lambda: experts_contrastive_loss(outs, queues, 0.5)
        with Tape() as tape:
            loss = f()
        grads = backward(loss, tape)
        for o in outs:
            assert relative_error(grads[o].data, numerical_gradient(f, o)) < 1e-5


def test_queue_entries_receive_no_gradient():
    queues = filled_queues([np.eye(3)[:2], np.eye(3)[2:]])
    outs = [Tensor2D([[0.3, 0.2, 0.1]], requires_grad=True), None]
    with Tape() as tape:
        loss = experts_contrastive_loss(outs, queues, 0.07)
    before = [q.entries().copy() for q in queues]
    grads = backward(loss, tape)
    assert np.any(grads[outs[0]].data)
    # keys enter as constants: no tape node takes them as input, and backward leaves them untouched
    assert all(np.array_equal(b, q.entries()) for b, q in zip(before, queues))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_contrastive_is_non_negative(seed):
    rng = np.random.default_rng(seed)
    blocks = [rng.normal(size=(int(rng.integers(1, 5)), 3)) for _ in range(3)]
    outs = [Tensor2D(rng.normal(size=(2, 3))) for _ in range(3)]
    assert experts_contrastive_loss(outs, filled_queues(blocks), 0.07).item() >= 0.0


# --- auxiliary combination and task loss ----------------------------------


def test_auxiliary_loss_arithmetic():
    assert auxiliary_loss(1.0, 2.0, AuxLossConfig(alpha=0.0, beta=0.0)) == 0.0
    assert auxiliary_loss(1.0, 2.0, AuxLossConfig()) == pytest.approx(0.03, abs=1e-15)
    t = auxiliary_loss(Tensor2D([[1.0]]), 2.0, AuxLossConfig())
    assert t.item() == pytest.approx(0.03, abs=1e-15)


def test_aux_defaults():
    cfg = AuxLossConfig()
    assert (cfg.alpha, cfg.beta, cfg.tau, cfg.queue_capacity) == (0.01, 0.01, 0.07, 256)


@pytest.mark.parametrize("kwargs", [{"tau": 0.0}, {"tau": -1.0}, {"alpha": -0.1}, {"beta": -0.1}, {"queue_capacity": 0}])
def test_aux_config_validation(kwargs):
    with pytest.raises(ParameterError):
        AuxLossConfig(**kwargs)


def test_mse_loss():
    assert mse_loss(Tensor2D([[1.0, 2.0]]), Tensor2D([[0.0, 0.0]])).item() == 2.5


# --- separation score -------------------------------------------------------


def test_identical_outputs_have_zero_distances():
    v = np.array([[1.0, 2.0, 3.0]] * 3)
    intra, inter = expert_separation_score([v, v])
    assert intra == pytest.approx(0.0, abs=1e-15) and inter == pytest.approx(0.0, abs=1e-15)


def test_orthogonal_experts():
    intra, inter = expert_separation_score([np.array([[1.0, 0.0], [2.0, 0.0]]), np.array([[0.0, 1.0], [0.0, 3.0]])])
    assert intra == 0.0 and inter == 1.0


def test_separation_matches_pairwise_oracle():
    rng = np.random.default_rng(5)
    outs = [rng.normal(size=(int(m), 4)) for m in (3, 1, 4)]
    cos = lambda a, b: float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    intra_pairs = [1 - cos(o[i], o[j]) for o in outs for i in range(len(o)) for j in range(i + 1, len(o))]
    inter_pairs = [
        1 - cos(a, b) for x in range(3) for y in range(x + 1, 3) for a in outs[x] for b in outs[y]
    ]
    intra, inter = expert_separation_score(outs)
    assert intra == pytest.approx(np.mean(intra_pairs), rel=1e-12)
    assert inter == pytest.approx(np.mean(inter_pairs), rel=1e-12)


def test_separation_errors_name_the_deficient_side():
    with pytest.raises(ValueError, match="intra"):
        expert_separation_score([np.ones((1, 2)), np.ones((1, 2))])
    with pytest.raises(ValueError, match="inter"):
        expert_separation_score([np.ones((3, 2)), None])
