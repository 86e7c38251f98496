import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lalora.lora import RankDeficient
from lalora.numkit import SeededRng, power_iteration
from lalora.theory import (
    Factors,
    SensingProblem,
    admissible_eta,
    aligned_init,
    contraction_rate,
    cross_gram_norms,
    estimate_rip_delta,
    ffa_subspace_gap,
    gen_sensing,
    half_steps,
    preconditioned_grad_norm_a,
    random_init,
    rolora_remainder,
    scaled_alt_step,
    sensing_grads,
    sensing_loss,
    verify_contraction,
)
from lalora.lora import col_projector


def rand(rng, *shape):
    return rng.normal(int(np.prod(shape))).reshape(shape)


def orth_problem(seed, p=1):
    return gen_sensing(20, 10, 8, 3, p, "orthonormal", SeededRng(seed, ("orth",)))


# ---- construction


def test_orthonormal_isometry():
    prob = orth_problem(0)
    m = rand(SeededRng(1), 10, 3) @ rand(SeededRng(2), 3, 8)
    assert np.linalg.norm(prob.c_ops[0] @ m) == pytest.approx(np.linalg.norm(m), rel=1e-12)
    assert prob.delta_r == 0.0


def test_x_star_low_rank():
    prob = gen_sensing(30, 12, 9, 3, 1, "gaussian", SeededRng(4))
    x = prob.x_star
    top = power_iteration(lambda v: x.T @ (x @ v), 9, iters=5000, tol=1e-14).value
    u, s, vt = np.linalg.svd(x)
    resid = x - (u[:, :3] * s[:3]) @ vt[:3]
    nxt = power_iteration(lambda v: resid.T @ (resid @ v), 9, iters=5000, tol=1e-30).value
    assert np.sqrt(max(nxt, 0.0)) / np.sqrt(top) < 1e-10


def test_gen_sensing_errors():
    with pytest.raises(ValueError):
        gen_sensing(5, 10, 8, 3, 1, "orthonormal", SeededRng(0))
    with pytest.raises(ValueError):
        gen_sensing(20, 4, 8, 5, 1, "gaussian", SeededRng(0))


# ---- RIP estimation


def test_rip_orthonormal_zero():
    assert estimate_rip_delta(orth_problem(1), 50) <= 1e-10


def test_rip_scaled_identity_violation():
    x = rand(SeededRng(0), 6, 2) @ rand(SeededRng(1), 2, 5)
    prob = SensingProblem((2.0 * np.eye(6),), x, 2)
    assert estimate_rip_delta(prob, 20) == pytest.approx(3.0, rel=1e-12)


def test_rip_gaussian_enough_measurements():
    d, c, r = 4, 36, 2
    n = 4 * r * (d + c) // d
    prob = gen_sensing(n, d, c, r, 1, "gaussian", SeededRng(3))
    assert estimate_rip_delta(prob, 200, SeededRng(4)) < 0.5


def test_rip_estimate_reproducible_across_seeds():
    prob = gen_sensing(80, 4, 36, 2, 1, "gaussian", SeededRng(3))
    est = np.array([estimate_rip_delta(prob, 500, SeededRng(s, ("probe",))) for s in range(5)])
    assert np.all(np.abs(est / est.mean() - 1) < 0.2)


# ---- gradients


def test_grads_zero_at_optimum():
    prob = orth_problem(2)
    u, s, vt = np.linalg.svd(prob.x_star)
    f = Factors((u[:, :3] * s[:3],), (vt[:3],))
    for ga, gb in sensing_grads(prob, f):
        assert np.max(np.abs(ga)) < 1e-10 and np.max(np.abs(gb)) < 1e-10


def test_grad_identity_operator():
    rng = SeededRng(5)
    x = rand(rng.child("x"), 6, 2) @ rand(rng.child("y"), 2, 5)
    prob = SensingProblem((np.eye(6),), x, 2)
    b, a = rand(rng.child("b"), 6, 2), rand(rng.child("a"), 2, 5)
    ga, gb = sensing_grads(prob, Factors((b,), (a,)))[0]
    assert np.allclose(ga, b.T @ (b @ a - x), rtol=1e-13, atol=1e-13)
    assert np.allclose(gb, (b @ a - x) @ a.T, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("p", [1, 3])
def test_grads_finite_differences(p):
    prob = gen_sensing(15, 6, 5, 2, p, "gaussian", SeededRng(7))
    f = random_init(prob, SeededRng(8))
    grads = sensing_grads(prob, f)
    h = 1e-6
    for i in range(p):
        for which, mats in ((0, f.a), (1, f.b)):
            fd = np.zeros_like(mats[i])
            for idx in np.ndindex(fd.shape):
                plus, minus = [list(m) for m in (mats, mats)]
                e = np.zeros_like(fd)
                e[idx] = h
                plus[i] = mats[i] + e
                minus[i] = mats[i] - e
                if which == 0:
                    lp = sensing_loss(prob, Factors(f.b, tuple(plus)))
                    lm = sensing_loss(prob, Factors(f.b, tuple(minus)))
                else:
                    lp = sensing_loss(prob, Factors(tuple(plus), f.a))
                    lm = sensing_loss(prob, Factors(tuple(minus), f.a))
                fd[idx] = (lp - lm) / (2 * h)
            g = grads[i][which]
            assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(fd)


# ---- scaled alternating step


def test_step_eta_zero_and_optimum():
    prob = orth_problem(3)
    f = random_init(prob, SeededRng(1))
    g = scaled_alt_step(prob, f, 0.0)
    assert all(np.array_equal(x, y) for x, y in zip(g.a + g.b, f.a + f.b))
    u, s, vt = np.linalg.svd(prob.x_star)
    opt = Factors((u[:, :3] * s[:3],), (vt[:3],))
    g = scaled_alt_step(prob, opt, 0.4)
    assert all(np.allclose(x, y, atol=1e-10) for x, y in zip(g.a + g.b, opt.a + opt.b))


def test_step_warns_above_admissible():
    prob = orth_problem(3)
    with pytest.warns(RuntimeWarning):
        scaled_alt_step(prob, aligned_init(prob, SeededRng(0)), 0.9)


def test_step_rank_deficient():
    prob = orth_problem(3)
    f = random_init(prob, SeededRng(1))
    bad = Factors((np.zeros_like(f.b[0]),), f.a)
    with pytest.raises(RankDeficient):
        scaled_alt_step(prob, bad, 0.1)


def test_contraction_rate_value():
    assert contraction_rate(0.4, 0.0, 1) == pytest.approx(0.48, abs=1e-15)
    assert (1 - contraction_rate(0.4, 0.0, 1)) ** 2 == pytest.approx(0.2704, abs=1e-15)
    assert admissible_eta(0.0, 1) == 0.5


@pytest.mark.parametrize("seed", range(10))
def test_contraction_orthonormal(seed):
    prob = orth_problem(seed)
    rep = verify_contraction(prob, aligned_init(prob, SeededRng(seed, ("init",))), 0.4, 60)
    assert rep.applicable and rep.passed, rep.failures
    assert max(rep.ratios) <= 0.2704 + 1e-9
    assert rep.final_error < 1e-6


def test_contraction_at_optimum_trivial():
    prob = orth_problem(0)
    u, s, vt = np.linalg.svd(prob.x_star)
    rep = verify_contraction(prob, Factors((u[:, :3] * s[:3],), (vt[:3],)), 0.4, 5)
    assert rep.passed


def test_contraction_not_applicable_above_bound():
    prob = orth_problem(0)
    rep = verify_contraction(prob, aligned_init(prob, SeededRng(0)), 0.6, 3)
    assert not rep.applicable and not rep.passed


def test_random_init_leaves_the_per_iteration_bound():
    # outside the aligned regime the first iterations contract far more slowly
    prob = orth_problem(0)
    rep = verify_contraction(prob, random_init(prob, SeededRng(0)), 0.4, 5)
    assert max(rep.ratios) > 0.2704


@pytest.mark.parametrize("seed", range(10))
def test_half_step_descent_gaussian(seed):
    prob = gen_sensing(60, 8, 6, 2, 1, "gaussian", SeededRng(seed, ("desc",)))
    delta = min(estimate_rip_delta(prob, 200, SeededRng(seed)), 0.99)
    eta = admissible_eta(delta, 1)
    f = random_init(prob, SeededRng(seed, ("init",)))
    for _ in range(30):
        half, full = half_steps(prob, f, eta)
        l0, l1, l2 = sensing_loss(prob, f), sensing_loss(prob, half), sensing_loss(prob, full)
        assert l1 <= l0 * (1 + 1e-12)
        assert l2 <= l1 * (1 + 1e-12)
        f = full


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 0.5))
def test_half_step_descent_orthonormal_property(seed, eta):
    prob = orth_problem(seed % 1000)
    f = random_init(prob, SeededRng(seed))
    half, full = half_steps(prob, f, eta)
    assert sensing_loss(prob, half) <= sensing_loss(prob, f) * (1 + 1e-12)
    assert sensing_loss(prob, full) <= sensing_loss(prob, half) * (1 + 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_norm_lower_bound_aligned(seed):
    prob = orth_problem(seed)
    f = aligned_init(prob, SeededRng(seed))
    lhs = preconditioned_grad_norm_a(prob, f)
    assert lhs >= 2 * (1 - 0.0) * sensing_loss(prob, f) * (1 - 1e-10)


def test_cross_gram_check_reports():
    prob = gen_sensing(30, 6, 5, 2, 3, "gaussian", SeededRng(1))
    rep = cross_gram_norms(prob, 0.3)
    assert rep["limit"] == pytest.approx(1.3 / 6)
    ref = max(np.linalg.norm(prob.c_ops[i].T @ prob.c_ops[j], 2) for i in range(3) for j in range(3) if i != j)
    assert rep["max_norm"] == pytest.approx(ref, rel=1e-6)
    assert rep["satisfied"] == (ref <= 1.3 / 6)
    assert cross_gram_norms(orth_problem(0), 0.0)["satisfied"]


# ---- FFA subspace gap and RoLoRA remainder


def test_ffa_gap_inside_and_orthogonal():
    rng = SeededRng(0)
    a0 = rand(rng.child("a"), 3, 10)
    inside = rand(rng.child("c"), 6, 3) @ a0
    assert ffa_subspace_gap(a0, inside) <= 1e-12 * np.linalg.norm(inside)
    q, _ = np.linalg.qr(a0.T, mode="complete")
    ortho = rand(rng.child("d"), 6, 7) @ q[:, 3:].T
    assert ffa_subspace_gap(a0, ortho) == pytest.approx(np.linalg.norm(ortho), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_ffa_gap_positive_generic(seed):
    rng = SeededRng(seed, ("gap",))
    assert ffa_subspace_gap(rand(rng.child("a"), 3, 10), rand(rng.child("w"), 6, 10)) > 1e-6


def test_ffa_gap_rank_deficient():
    with pytest.raises(RankDeficient):
        ffa_subspace_gap(np.ones((2, 5)), np.ones((3, 5)))


def quadratic_instance(seed, m=6, n=8, r=2):
    rng = SeededRng(seed, ("rolora",))
    s_mat = rand(rng.child("S"), n, n) / np.sqrt(n)
    hess = s_mat @ s_mat.T
    smooth = np.linalg.eigvalsh(hess)[-1]
    w_star = rand(rng.child("ws"), m, n)
    w_k = rand(rng.child("wk"), m, n)
    b_next, a_next = rand(rng.child("b"), m, r), rand(rng.child("a"), r, n)
    eta = float(rng.child("eta").uniform(1)[0])
    return hess, smooth, w_star, w_k, b_next, a_next, eta


@pytest.mark.parametrize("seed", range(100))
def test_rolora_remainder_bound(seed):
    hess, smooth, w_star, w_k, b_next, a_next, eta = quadratic_instance(seed)

    def grad(w):
        return (w - w_star) @ hess

    g_k = grad(w_k)
    w_half = w_k - eta * col_projector(b_next) @ g_k
    e = rolora_remainder(g_k, grad(w_half), eta, b_next, a_next)
    assert np.linalg.norm(e) <= 2 * eta**2 * smooth * np.linalg.norm(g_k) * (1 + 1e-12)


def test_rolora_remainder_zero_when_gradient_unchanged():
    g = rand(SeededRng(1), 4, 5)
    e = rolora_remainder(g, g, 0.3, rand(SeededRng(2), 4, 2), rand(SeededRng(3), 2, 5))
    assert not np.any(e)
