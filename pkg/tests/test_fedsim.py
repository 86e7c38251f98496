import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lalora import dp
from lalora.fedsim import (
    ClientDiverged,
    ClientState,
    FedPlan,
    NumericFailure,
    Strategy,
    aggregate,
    batch_indices,
    dirichlet_partition,
    final_sharpness,
    lora_param_grad,
    local_update,
    run_experiment,
    step_phase,
)
from lalora.lora import LoraAdapter, Phase, full_weight_update_forms, init_adapter
from lalora.numkit import SeededRng, ShapeError
from lalora.smoothing import binomial_kernel, smooth_grad_a, smooth_grad_b
from lalora.tasks import make_lora_task, softmax_loss_and_grad

NO_CLIP = 1e12


@pytest.fixture(scope="module")
def task():
    return make_lora_task(SeededRng(0, ("task",)), n_classes=5, d=12, per_class=40, pretrain_steps=20)


def rand(rng, *shape):
    return rng.normal(int(np.prod(shape))).reshape(shape)


def whole_client(task):
    return ClientState(0, np.arange(task.data.y_train.size))


def spec_for(client, sigma=0.0, b=0.1, clip_c=NO_CLIP):
    return dp.PrivacySpec(clip_c, sigma, b, int(client.indices.size))


def factors(task, r=2, seed=1):
    m, n = task.w0.shape
    rng = SeededRng(seed, ("factors",))
    return 0.3 * rand(rng.child("a"), r, n), 0.3 * rand(rng.child("b"), m, r)


# ---- plan


def test_plan_validation():
    with pytest.raises(ValueError):
        FedPlan(n_clients=4, client_rate=0.2)
    with pytest.raises(ValueError):
        FedPlan(client_rate=0.0)
    with pytest.raises(ValueError):
        FedPlan(dirichlet_beta=0.0)
    with pytest.raises(ValueError):
        FedPlan(optimizer="adam")
    assert FedPlan(n_clients=8, client_rate=0.5).clients_per_round == 4


def test_step_phase_per_strategy():
    la = FedPlan(strategy=Strategy.LA_LORA)
    assert [step_phase(la, k, 1) for k in (1, 2, 3)] == [Phase.UPDATE_B, Phase.UPDATE_A, Phase.UPDATE_B]
    ro = FedPlan(strategy=Strategy.RO_LORA)
    assert {step_phase(ro, k, 1) for k in range(1, 6)} == {Phase.UPDATE_B}
    assert {step_phase(ro, k, 2) for k in range(1, 6)} == {Phase.UPDATE_A}
    assert step_phase(FedPlan(strategy=Strategy.DP_LORA), 3, 7) is Phase.UPDATE_BOTH
    assert step_phase(FedPlan(strategy=Strategy.FFA_LORA), 2, 2) is Phase.B_ONLY


# ---- partition


def test_partition_single_client():
    labels = np.array([0, 1, 1, 2, 0, 2, 2])
    parts = dirichlet_partition(labels, 1, 0.1, SeededRng(0))
    assert len(parts) == 1 and np.array_equal(parts[0], np.arange(7))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 10), st.floats(0.01, 100.0))
def test_partition_disjoint_and_covering(seed, n_clients, beta):
    labels = np.arange(60) % 4
    parts = dirichlet_partition(labels, n_clients, beta, SeededRng(seed))
    flat = np.concatenate(parts)
    assert flat.size == 60 and np.array_equal(np.sort(flat), np.arange(60))
    assert all(p.size >= 1 for p in parts)


def test_partition_large_beta_near_iid():
    labels = np.repeat([0, 1], 2000)
    for seed in range(20):
        for p in dirichlet_partition(labels, 4, 1000.0, SeededRng(seed, ("conc",))):
            ratio = np.mean(labels[p] == 0)
            assert abs(ratio / 0.5 - 1) <= 0.05


def test_partition_min_size_patch():
    labels = np.arange(40) % 2
    parts = dirichlet_partition(labels, 8, 0.01, SeededRng(3), min_size=5, max_attempts=1)
    assert all(p.size >= 5 for p in parts)
    assert np.array_equal(np.sort(np.concatenate(parts)), np.arange(40))


def test_partition_impossible():
    with pytest.raises(ValueError):
        dirichlet_partition(np.zeros(3, int), 4, 1.0, SeededRng(0))
    with pytest.raises(ValueError):
        dirichlet_partition(np.zeros(10, int), 2, 0.0, SeededRng(0))


def test_batch_indices_without_replacement():
    pos = batch_indices(SeededRng(0), 3, 2, 1, 50, 20)
    assert pos.size == 20 and np.unique(pos).size == 20 and pos.max() < 50
    assert np.array_equal(pos, batch_indices(SeededRng(0), 3, 2, 1, 50, 20))


# ---- local update


def test_zero_local_steps_returns_globals(task):
    client = whole_client(task)
    a, b = factors(task)
    res = local_update(client, a, b, task.w0, task.data, FedPlan(local_steps=0, rank=2), spec_for(client, 1.0), None, 1, SeededRng(0))
    assert np.array_equal(res.a, a) and np.array_equal(res.b, b)


def test_local_update_shape_and_spec_checks(task):
    client = whole_client(task)
    a, b = factors(task)
    plan = FedPlan(local_steps=1, rank=2)
    with pytest.raises(ShapeError):
        local_update(client, a[:, :-1], b, task.w0, task.data, plan, spec_for(client), None, 1, SeededRng(0))
    with pytest.raises(ValueError):
        local_update(client, a, b, task.w0, task.data, plan, dp.PrivacySpec(1.0, 0.0, 0.5, 10), None, 1, SeededRng(0))


def test_la_lora_two_steps_hand_oracle(task):
    client = whole_client(task)
    a, b = factors(task)
    plan = FedPlan(strategy=Strategy.LA_LORA, local_steps=2, rank=2, alpha=4.0, lr_a=0.07, lr_b=0.05, lr_decay=0.9)
    spec = spec_for(client, b=0.25)
    rng = SeededRng(11)
    t = 2
    res = local_update(client, a, b, task.w0, task.data, plan, spec, None, t, rng)

    s = 2.0
    x_all, y_all = task.data.x_train, task.data.y_train
    lr_a, lr_b = 0.07 * 0.9**2, 0.05 * 0.9**2
    pos1 = batch_indices(rng, 0, t, 1, x_all.shape[0], spec.batch_size)
    _, g1 = softmax_loss_and_grad(task.w0 + s * b @ a, x_all[pos1], y_all[pos1])
    b1 = b - lr_b * s * g1 @ a.T
    pos2 = batch_indices(rng, 0, t, 2, x_all.shape[0], spec.batch_size)
    _, g2 = softmax_loss_and_grad(task.w0 + s * b1 @ a, x_all[pos2], y_all[pos2])
    a2 = a - lr_a * s * b1.T @ g2
    assert np.max(np.abs(res.b - b1)) <= 1e-12
    assert np.max(np.abs(res.a - a2)) <= 1e-12


def test_la_lora_reproduces_alternating_update_form(task):
    # full batch, no clipping, no noise, projected steps: two local steps are one
    # scaled alternating iteration in weight space
    client = whole_client(task)
    a, b = factors(task, seed=4)
    eta = 0.05
    plan = FedPlan(strategy=Strategy.LA_LORA, local_steps=2, rank=2, alpha=4.0, lr_a=eta, lr_b=eta, lr_decay=1.0, optimizer="projected")
    spec = spec_for(client, b=1.0)
    res = local_update(client, a, b, task.w0, task.data, plan, spec, None, 1, SeededRng(0))
    ad = LoraAdapter(task.w0, a, b, 4.0)
    x, y = task.data.x_train, task.data.y_train
    _, g_k = softmax_loss_and_grad(task.w0 + ad.s * b @ a, x, y)
    _, g_half = softmax_loss_and_grad(task.w0 + ad.s * res.b @ a, x, y)
    forms = full_weight_update_forms(ad, g_k, g_half, eta, b_next=res.b)
    got = ad.s * (res.b @ res.a - b @ a)
    assert np.max(np.abs(got - forms.alternating_delta)) <= 1e-10


@pytest.mark.parametrize("sigma", [0.0, 2.0])
def test_ffa_keeps_a_bitwise(task, sigma):
    client = whole_client(task)
    a, b = factors(task)
    plan = FedPlan(strategy=Strategy.FFA_LORA, local_steps=5, rank=2)
    res = local_update(client, a, b, task.w0, task.data, plan, spec_for(client, sigma, clip_c=1.0), None, 1, SeededRng(2))
    assert np.array_equal(res.a, a)
    assert not np.array_equal(res.b, b)


def step_trace(task, strategy, k_max, t=1):
    """Factors after each local step, by replaying prefixes of the keyed streams."""
    client = whole_client(task)
    a, b = factors(task)
    spec = spec_for(client, 1.0, clip_c=1.0)
    out = [(a, b)]
    for k in range(1, k_max + 1):
        plan = FedPlan(strategy=strategy, local_steps=k, rank=2)
        r = local_update(client, a, b, task.w0, task.data, plan, spec, None, t, SeededRng(5), track_cosine=False)
        out.append((r.a, r.b))
    return out


def changed(trace):
    return [(not np.array_equal(p[0], q[0]), not np.array_equal(p[1], q[1])) for p, q in zip(trace, trace[1:])]


def test_embedding_la_lora_one_factor_per_step(task):
    assert changed(step_trace(task, Strategy.LA_LORA, 6)) == [(False, True), (True, False)] * 3


def test_embedding_dp_lora_both_every_step(task):
    assert changed(step_trace(task, Strategy.DP_LORA, 4)) == [(True, True)] * 4


def test_embedding_ffa_never_a(task):
    assert changed(step_trace(task, Strategy.FFA_LORA, 4)) == [(False, True)] * 4


@pytest.mark.parametrize("t,expected", [(1, (False, True)), (2, (True, False)), (3, (False, True))])
def test_embedding_ro_lora_one_factor_per_round(task, t, expected):
    assert set(changed(step_trace(task, Strategy.RO_LORA, 4, t))) == {expected}


def test_smoothing_applied_after_privatization(task):
    client = whole_client(task)
    a, b = factors(task)
    kernel = binomial_kernel(3)
    spec = spec_for(client, 1.5, clip_c=0.5)
    rng = SeededRng(9)
    t = 1
    s = 2.0
    plan = FedPlan(strategy=Strategy.DP_LORA, local_steps=1, rank=2, alpha=4.0, lr_a=0.1, lr_b=0.2, lr_decay=1.0)
    res = local_update(client, a, b, task.w0, task.data, plan, spec, kernel, t, rng)

    from lalora.tasks import softmax_residuals

    pos = batch_indices(rng, 0, t, 1, client.indices.size, spec.batch_size)
    x, y = task.data.x_train[pos], task.data.y_train[pos]
    _, resid = softmax_residuals(task.w0 + s * b @ a, x, y)
    per_b = s * resid[:, :, None] * (x @ a.T)[:, None, :]
    per_a = s * (resid @ b)[:, :, None] * x[:, None, :]
    noise = rng.child("noise", 0, t, 1)
    g_b = smooth_grad_b(dp.privatize_batch(per_b, spec, noise.child("B")), kernel)
    g_a = smooth_grad_a(dp.privatize_batch(per_a, spec, noise.child("A")), kernel)
    assert np.allclose(res.b, b - 0.2 * g_b, rtol=0, atol=1e-14)
    assert np.allclose(res.a, a - 0.1 * g_a, rtol=0, atol=1e-14)

    # the reverse order (smooth each sample, then privatize) gives a different step
    rev = dp.privatize_batch(np.stack([smooth_grad_b(p, kernel) for p in per_b]), spec, noise.child("B"))
    assert not np.allclose(res.b, b - 0.2 * rev, rtol=0, atol=1e-12)


def test_filter_flag_disables_kernel(task):
    client = whole_client(task)
    a, b = factors(task)
    spec = spec_for(client, 1.0, clip_c=1.0)
    plan = FedPlan(strategy=Strategy.LA_LORA, local_steps=2, rank=2, filter_on=False)
    off = local_update(client, a, b, task.w0, task.data, plan, spec, binomial_kernel(5), 1, SeededRng(1))
    none = local_update(client, a, b, task.w0, task.data, plan, spec, None, 1, SeededRng(1))
    assert np.array_equal(off.a, none.a) and np.array_equal(off.b, none.b)


def test_divergence_raises(task):
    client = whole_client(task)
    a, b = factors(task)
    plan = FedPlan(strategy=Strategy.DP_LORA, local_steps=3, rank=2, lr_a=1e305, lr_b=1e305)
    with np.errstate(all="ignore"), pytest.raises(ClientDiverged):
        local_update(client, a, b, task.w0, task.data, plan, spec_for(client, 1.0, clip_c=1.0), None, 1, SeededRng(0))


# ---- aggregation


def uploads(n, seed=0):
    rng = SeededRng(seed, ("up",))
    return [(rand(rng.child("a", i), 3, 5) * 10.0 ** (i % 4), rand(rng.child("b", i), 4, 3)) for i in range(n)]


def test_aggregate_identical():
    up = uploads(1)[0]
    a, b, dropped = aggregate([up, up, up])
    assert np.array_equal(a, up[0]) and np.array_equal(b, up[1]) and dropped == []


def test_aggregate_opposites_cancel():
    a, b = uploads(1)[0]
    ma, mb, _ = aggregate([(a, b), (-a, -b)])
    assert not np.any(ma) and not np.any(mb)


def test_aggregate_matches_compensated_sum():
    up = uploads(16)
    a, b, _ = aggregate(up)
    ref_a = np.array([math.fsum(u[0][idx] for u in up) for idx in np.ndindex(3, 5)]).reshape(3, 5) / 16
    ref_b = np.array([math.fsum(u[1][idx] for u in up) for idx in np.ndindex(4, 3)]).reshape(4, 3) / 16
    assert np.linalg.norm(a - ref_a) <= 1e-13 * np.linalg.norm(ref_a)
    assert np.linalg.norm(b - ref_b) <= 1e-13 * np.linalg.norm(ref_b)


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(8))))
def test_aggregate_permutation_invariant(perm):
    up = uploads(8, seed=3)
    a, b, _ = aggregate(up)
    pa, pb, _ = aggregate([up[i] for i in perm])
    assert np.linalg.norm(a - pa) <= 1e-13 * np.linalg.norm(a)
    assert np.linalg.norm(b - pb) <= 1e-13 * np.linalg.norm(b)


def test_aggregate_canonical_order_exact():
    up = uploads(8, seed=2)
    assert all(np.array_equal(x, y) for x, y in zip(aggregate(up)[:2], aggregate(list(up))[:2]))


def test_aggregate_drops_nonfinite():
    up = uploads(3)
    bad = (up[1][0].copy(), up[1][1].copy())
    bad[0][0, 0] = np.nan
    a, b, dropped = aggregate([up[0], bad, up[2], None])
    ref_a, ref_b, _ = aggregate([up[0], up[2]])
    assert dropped == [1, 3]
    assert np.array_equal(a, ref_a) and np.array_equal(b, ref_b)


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(NumericFailure):
        aggregate([None, (np.full((2, 2), np.inf), np.zeros((2, 2)))])
    with pytest.raises(ShapeError):
        aggregate([(np.zeros((2, 3)), np.zeros((3, 2))), (np.zeros((2, 4)), np.zeros((3, 2)))])


# ---- experiment loop


def small_plan(**kw):
    base = dict(n_clients=4, rounds=3, local_steps=4, client_rate=0.5, dirichlet_beta=1.0, rank=2, alpha=4.0, lr_a=0.05, lr_b=0.05)
    base.update(kw)
    return FedPlan(**base)


def private(task, sigma=1.0):
    return dp.PrivacySpec(1.0, sigma, 0.1, task.data.y_train.size)


def test_zero_rounds(task):
    res = run_experiment(small_plan(rounds=0), task, private(task), None, seed=3)
    init = init_adapter(task.w0, 2, 4.0, SeededRng(3).child("init"))
    assert res.logs == []
    assert np.array_equal(res.adapter.a, init.a) and np.array_equal(res.adapter.b, init.b)


def test_centralized_oracle(task):
    plan = FedPlan(n_clients=1, rounds=3, local_steps=5, client_rate=1.0, strategy=Strategy.DP_LORA, rank=2, alpha=4.0, lr_a=0.05, lr_b=0.08, lr_decay=0.9)
    spec = dp.PrivacySpec(NO_CLIP, 0.0, 0.1, task.data.y_train.size)
    res = run_experiment(plan, task, spec, None, seed=7)

    rng = SeededRng(7)
    ad = init_adapter(task.w0, 2, 4.0, rng.child("init"))
    a, b, s = ad.a, ad.b, ad.s
    x, y = task.data.x_train, task.data.y_train
    size = int(math.floor(0.1 * y.size))
    for t in range(1, 4):
        for k in range(1, 6):
            pos = batch_indices(rng, 0, t, k, y.size, size)
            _, g = softmax_loss_and_grad(task.w0 + s * b @ a, x[pos], y[pos])
            a, b = a - 0.05 * 0.9**t * s * b.T @ g, b - 0.08 * 0.9**t * s * g @ a.T
        loss, _ = softmax_loss_and_grad(task.w0 + s * b @ a, x, y)
        assert res.logs[t - 1].train_loss == pytest.approx(loss, rel=1e-12)
    assert np.allclose(res.adapter.b, b, rtol=0, atol=1e-12)
    assert all(math.isinf(r.eps_spent) for r in res.logs)
    assert res.ledger is None


def test_round_logs_and_sampling(task):
    res = run_experiment(small_plan(), task, private(task), None, seed=1)
    assert [r.round for r in res.logs] == [1, 2, 3]
    assert all(len(r.clients) == 2 and list(r.clients) == sorted(r.clients) for r in res.logs)
    eps = [r.eps_spent for r in res.logs]
    assert all(x < y for x, y in zip(eps, eps[1:]))
    assert eps[-1] == res.ledger.epsilon
    flat = np.sort(np.concatenate(res.partition))
    assert np.array_equal(flat, np.arange(task.data.y_train.size))


def test_ro_lora_one_factor_per_round(task):
    res = run_experiment(small_plan(strategy=Strategy.RO_LORA, rounds=4), task, private(task), None, seed=2)
    pattern = [(r.update_norm_a > 0, r.update_norm_b > 0) for r in res.logs]
    assert pattern == [(False, True), (True, False)] * 2


def test_ffa_run_never_moves_a(task):
    res = run_experiment(small_plan(strategy=Strategy.FFA_LORA), task, private(task), None, seed=2)
    assert all(r.update_norm_a == 0.0 for r in res.logs)


def test_poisson_client_sampling(task):
    res = run_experiment(small_plan(client_sampling="poisson", rounds=6), task, private(task), None, seed=4)
    assert len({len(r.clients) for r in res.logs}) > 1


def test_filter_toggle_leaves_ledger(task):
    on = run_experiment(small_plan(filter_on=True), task, private(task), binomial_kernel(5), seed=5)
    off = run_experiment(small_plan(filter_on=False), task, private(task), binomial_kernel(5), seed=5)
    assert on.ledger == off.ledger
    assert [r.eps_spent for r in on.logs] == [r.eps_spent for r in off.logs]
    assert not np.array_equal(on.adapter.a, off.adapter.a)


def test_threaded_matches_sequential(task):
    seq = run_experiment(small_plan(), task, private(task), binomial_kernel(3), seed=6)
    par = run_experiment(small_plan(workers=3), task, private(task), binomial_kernel(3), seed=6)
    assert seq.logs == par.logs
    assert np.array_equal(seq.adapter.a, par.adapter.a) and np.array_equal(seq.adapter.b, par.adapter.b)


def test_all_clients_diverge(task):
    with np.errstate(all="ignore"), pytest.raises(NumericFailure):
        run_experiment(small_plan(lr_a=1e305, lr_b=1e305), task, private(task), None, seed=0)


def test_lora_param_grad_finite_differences(task):
    a, b = factors(task)
    grad = lora_param_grad(task, 2.0, 2)
    theta = np.concatenate([a.ravel(), b.ravel()])

    def loss(th):
        aa = th[: a.size].reshape(a.shape)
        bb = th[a.size:].reshape(b.shape)
        return softmax_loss_and_grad(task.w0 + 2.0 * bb @ aa, task.data.x_train, task.data.y_train)[0]

    h = 1e-6
    fd = np.array([(loss(theta + h * e) - loss(theta - h * e)) / (2 * h) for e in np.eye(theta.size)])
    assert np.linalg.norm(grad(theta) - fd) <= 1e-6 * np.linalg.norm(fd)


def test_final_sharpness_positive(task):
    res = run_experiment(small_plan(), task, private(task), None, seed=1)
    sharp = final_sharpness(res, task)
    assert sharp.value > 0
