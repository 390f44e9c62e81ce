import numpy as np
import pytest

from sgdflux.linalg import commutator_norm, random_spd, sym_eigen
from sgdflux.model import InstabilityError, QuadraticProblem
from sgdflux import stationary as st


def _stable_instance(rng, dim, lr_max=1.5):
    k = random_spd(dim, rng)
    k /= sym_eigen(k).eigenvalues[0]
    c = random_spd(dim, rng)
    return QuadraticProblem.create(k), c


# --- continuous baseline --------------------------------------------------


def test_continuous_scalar():
    prob = QuadraticProblem.from_diagonal([1.0])
    pred = st.continuous_covariance(prob, np.eye(1), 1.0)
    assert pred.sigma[0, 0] == pytest.approx(0.5)
    assert pred.method == "continuous"


def test_continuous_anisotropic():
    prob = QuadraticProblem.from_diagonal([1.0, 0.1])
    lr = 0.7
    pred = st.continuous_covariance(prob, np.eye(2), lr)
    assert np.allclose(np.diag(pred.sigma), [lr / 2.0, lr / 0.2])


def test_continuous_zero_noise():
    prob = QuadraticProblem.from_diagonal([1.0, 2.0])
    pred = st.continuous_covariance(prob, np.zeros((2, 2)), 0.5)
    assert np.allclose(pred.sigma, 0.0)


# --- discrete SGD ---------------------------------------------------------


def test_sgd_scalar_unit():
    prob = QuadraticProblem.from_diagonal([1.0])
    pred = st.solve_sgd_covariance(prob, np.eye(1), 1.0)
    assert pred.sigma[0, 0] == pytest.approx(1.0)


def test_sgd_anisotropic_values():
    prob = QuadraticProblem.from_diagonal([1.0, 0.1])
    lr = 1.8
    pred = st.solve_sgd_covariance(prob, np.eye(2), lr)
    expected = [lr / (2.0 - lr), lr / (0.1 * (2.0 - 0.1 * lr))]
    assert np.allclose(np.diag(pred.sigma), expected)
    assert pred.sigma[0, 0] == pytest.approx(9.0)
    assert pred.sigma[1, 1] == pytest.approx(9.89010989010989)


def test_sgd_zero_noise():
    prob = QuadraticProblem.from_diagonal([0.5, 1.0])
    pred = st.solve_sgd_covariance(prob, np.zeros((2, 2)), 1.0)
    assert np.allclose(pred.sigma, 0.0)


def test_sgd_instability():
    prob = QuadraticProblem.from_diagonal([1.0])
    with pytest.raises(InstabilityError):
        st.solve_sgd_covariance(prob, np.eye(1), 2.0)


def test_sgd_train_error_matches_trace():
    rng = np.random.default_rng(1)
    prob, c = _stable_instance(rng, 3)
    pred = st.solve_sgd_covariance(prob, c, 1.2)
    assert pred.train_error == pytest.approx(
        0.5 * np.trace(prob.hessian @ pred.sigma), rel=1e-10)


# --- momentum -------------------------------------------------------------


def test_sgdm_mu_zero_reduces_to_sgd():
    rng = np.random.default_rng(2)
    prob, c = _stable_instance(rng, 3)
    a = st.solve_sgd_covariance(prob, c, 1.1).sigma
    b = st.solve_sgdm_covariance(prob, c, 1.1, 0.0).sigma
    assert np.linalg.norm(a - b) / np.linalg.norm(a) < 1e-12


def test_sgdm_scalar_value():
    prob = QuadraticProblem.from_diagonal([1.0])
    pred = st.solve_sgdm_covariance(prob, np.eye(1), 1.0, 0.5)
    assert pred.sigma[0, 0] == pytest.approx(1.5)


def test_sgdm_boundary_instability():
    prob = QuadraticProblem.from_diagonal([1.0])
    mu = 0.4
    with pytest.raises(InstabilityError):
        st.solve_sgdm_covariance(prob, np.eye(1), 2.0 * (1.0 + mu), mu)


def test_closed_form_commuting_matches_solver():
    rng = np.random.default_rng(3)
    k = random_spd(3, rng)
    k /= sym_eigen(k).eigenvalues[0]
    prob = QuadraticProblem.create(k)
    # commuting noise: polynomial in K
    c = 0.5 * np.eye(3) + 0.3 * k + 0.2 * k @ k
    for mu in (0.0, 0.5, 0.9):
        a = st.closed_form_commuting(prob, c, 1.2, mu).sigma
        b = st.solve_sgdm_covariance(prob, c, 1.2, mu).sigma
        assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-9


def test_closed_form_commuting_scalar():
    prob = QuadraticProblem.from_diagonal([1.0])
    assert st.closed_form_commuting(prob, np.eye(1), 1.0, 0.5).sigma[0, 0] == pytest.approx(1.5)
    assert st.closed_form_commuting(prob, np.eye(1), 1.0, 0.0).sigma[0, 0] == pytest.approx(1.0)


def test_closed_form_commuting_rejects_noncommuting():
    prob = QuadraticProblem.from_diagonal([1.0, 0.2])
    c = np.array([[1.0, 0.5], [0.5, 1.0]])
    with pytest.raises(ValueError):
        st.closed_form_commuting(prob, c, 0.5, 0.0)


def test_mixed_noise_corollaries():
    prob = QuadraticProblem.from_diagonal([1.0, 0.4])
    lr = 1.1
    k = prob.hessian
    # sigma2 = 0: Sigma = a lr (2I - lr K)^-1
    a = 0.3
    pred = st.mixed_noise_covariance(prob, 0.0, a, lr)
    assert np.allclose(pred.sigma, a * lr * np.linalg.inv(2 * np.eye(2) - lr * k))
    # a = 0: Sigma = sigma2 lr [K(2I - lr K)]^-1
    s2 = 0.7
    pred = st.mixed_noise_covariance(prob, s2, 0.0, lr)
    assert np.allclose(pred.sigma,
                       s2 * lr * np.linalg.inv(k @ (2 * np.eye(2) - lr * k)))


def test_mixed_noise_scalar():
    prob = QuadraticProblem.from_diagonal([1.0])
    pred = st.mixed_noise_covariance(prob, 0.0, 0.01, 1.0)
    assert pred.sigma[0, 0] == pytest.approx(0.01)


def test_train_error_sgdm_examples():
    prob = QuadraticProblem.create(np.eye(2))
    assert st.train_error_sgdm(prob, np.eye(2), 1.0, 0.0) == pytest.approx(1.0)
    assert st.train_error_sgdm(prob, np.zeros((2, 2)), 1.0, 0.0) == 0.0


def test_train_error_sgdm_small_lr_limit():
    rng = np.random.default_rng(4)
    prob, c = _stable_instance(rng, 3)
    lr = 1e-8
    value = st.train_error_sgdm(prob, c, lr, 0.3)
    assert value / lr == pytest.approx(np.trace(c) / (4.0 * 0.7), rel=1e-6)


def test_train_error_sgdm_matches_solver_noncommuting():
    rng = np.random.default_rng(5)
    for mu in (0.0, 0.4, 0.8):
        prob, c = _stable_instance(rng, 3)
        pred = st.solve_sgdm_covariance(prob, c, 1.3, mu)
        closed = st.train_error_sgdm(prob, c, 1.3, mu)
        assert closed == pytest.approx(pred.train_error, rel=1e-9)


# --- preconditioned -------------------------------------------------------


def test_preconditioned_scalar_lr_reduction():
    rng = np.random.default_rng(6)
    prob, c = _stable_instance(rng, 3)
    lr, mu = 1.2, 0.4
    a = st.solve_preconditioned_covariance(prob, c, lr * np.eye(3), mu).sigma
    b = st.solve_sgdm_covariance(prob, c, lr, mu).sigma
    assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-10


def test_preconditioned_newton_direction():
    rng = np.random.default_rng(7)
    prob, c = _stable_instance(rng, 3)
    lr = 1.0
    k_inv = np.linalg.inv(prob.hessian)
    pred = st.solve_preconditioned_covariance(prob, c, lr * k_inv, 0.0)
    expected = lr / (2.0 - lr) * k_inv @ c @ k_inv
    assert np.allclose(pred.sigma, expected)


def test_preconditioned_random_residual():
    rng = np.random.default_rng(8)
    for _ in range(5):
        prob, c = _stable_instance(rng, 4)
        lam = random_spd(4, rng)
        lam *= 0.5 / sym_eigen(lam @ prob.hessian @ lam).eigenvalues[0]
        pred = st.solve_preconditioned_covariance(prob, c, lam, 0.3)
        assert pred.residual < 1e-10


# --- QHM ------------------------------------------------------------------


def test_qhm_nu_zero_is_sgd():
    rng = np.random.default_rng(9)
    for _ in range(5):
        prob, c = _stable_instance(rng, 3)
        mu = rng.uniform(0.0, 0.9)
        a = st.solve_qhm_system(prob, c, 1.1, mu, 0.0).sigma
        b = st.solve_sgd_covariance(prob, c, 1.1).sigma
        assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-8


def test_qhm_nu_one_is_sgdm_rescaled():
    rng = np.random.default_rng(10)
    for _ in range(5):
        prob, c = _stable_instance(rng, 3)
        mu = rng.uniform(0.0, 0.9)
        lr = 1.1
        a = st.solve_qhm_system(prob, c, lr, mu, 1.0).sigma
        b = st.solve_sgdm_covariance(prob, c, lr * (1.0 - mu), mu).sigma
        assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-8


def test_qhm_mu_zero_is_sgd():
    rng = np.random.default_rng(11)
    prob, c = _stable_instance(rng, 2)
    a = st.solve_qhm_system(prob, c, 1.0, 0.0, 0.7).sigma
    b = st.solve_sgd_covariance(prob, c, 1.0).sigma
    assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-10


def test_qhm_residuals_and_extras():
    rng = np.random.default_rng(12)
    prob, c = _stable_instance(rng, 3)
    pred = st.solve_qhm_system(prob, c, 0.9, 0.6, 0.4)
    assert pred.residual < 1e-9
    assert set(pred.extras) >= {"cross_moment", "momentum_series", "residuals"}
    # Q solves the geometric-series equation with the recursion matrix A
    q = pred.extras["momentum_series"]
    mu, nu, lr = 0.6, 0.4, 0.9
    a = mu * (np.eye(3) - lr * (1.0 - nu) * prob.hessian)
    assert np.linalg.norm(q - a @ q @ a - pred.sigma) / np.linalg.norm(pred.sigma) < 1e-9


def test_qhm_train_error_cross_path():
    prob = QuadraticProblem.from_diagonal([1.0])
    lr, mu, nu = 0.5, 0.9, 0.7
    pred = st.solve_qhm_system(prob, np.eye(1), lr, mu, nu)
    closed = st.qhm_train_error(prob, np.eye(1), lr, mu, nu)
    assert closed == pytest.approx(pred.train_error, rel=1e-8)


def test_qhm_train_error_reduction_to_sgd():
    prob = QuadraticProblem.from_diagonal([1.0, 0.3])
    c = np.diag([0.5, 2.0])
    lr = 0.8
    assert st.qhm_train_error(prob, c, lr, 0.0, 0.0) == pytest.approx(
        st.train_error_sgdm(prob, c, lr, 0.0), rel=1e-10)
    assert st.qhm_train_error(prob, np.zeros((2, 2)), lr, 0.5, 0.5) == 0.0


def test_qhm_unstable_raises():
    prob = QuadraticProblem.from_diagonal([1.0])
    with pytest.raises(InstabilityError):
        st.solve_qhm_system(prob, np.eye(1), 2.5, 0.0, 0.0)


# --- second-order closed forms --------------------------------------------


def test_dnm_scalar_minibatch_form():
    prob = QuadraticProblem.from_diagonal([1.0])
    m = (1000 - 100) / (1000 * 100)  # 0.009
    pred = st.dnm_covariance(prob, m * prob.hessian, 1.0, 0.0)
    assert pred.sigma[0, 0] == pytest.approx(0.009)


def test_dnm_zero_noise_and_cross_path():
    rng = np.random.default_rng(13)
    prob, c = _stable_instance(rng, 3)
    assert np.allclose(st.dnm_covariance(prob, np.zeros((3, 3)), 1.0).sigma, 0.0)
    lr, mu = 0.8, 0.3
    a = st.dnm_covariance(prob, c, lr, mu).sigma
    lam = lr * np.linalg.inv(prob.hessian)
    b = st.solve_preconditioned_covariance(prob, c, lam, mu).sigma
    assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-10


def test_dnm_instability_independent_of_k():
    prob = QuadraticProblem.from_diagonal([1000.0])
    # fine for huge curvature ...
    st.dnm_covariance(prob, np.eye(1), 1.9, 0.0)
    # ... but lr >= 2(1+mu) always fails
    with pytest.raises(InstabilityError):
        st.dnm_covariance(prob, np.eye(1), 2.0, 0.0)


def test_ngd_minibatch_closed_form():
    prob = QuadraticProblem.from_diagonal([2.0, 0.5])
    lr, mu = 0.5, 0.3
    n, s = 1000, 100
    pred = st.ngd_covariance(prob, lr, mu, n_data=n, batch=s)
    m = (n - s) / (n * s)
    coeff = lr * ((1 + mu) * m + 1 - mu) / (2 * (1 - mu**2))
    assert np.allclose(pred.sigma, coeff * np.linalg.inv(prob.hessian))
    assert pred.residual < 1e-9
    # full batch: no noise, fluctuation from the update rule alone
    pred_full = st.ngd_covariance(prob, lr, mu, n_data=n, batch=n)
    assert np.allclose(pred_full.sigma,
                       lr / (2 * (1 + mu)) * np.linalg.inv(prob.hessian))


def test_ngd_constant_noise_scalar_quadratic():
    # 1d k=2, lr=0.5, mu=0, c=1: (2s)^2 - 0.25*(2s) - 0.25*0.5 = 0, positive root
    prob = QuadraticProblem.from_diagonal([2.0])
    pred = st.ngd_covariance(prob, 0.5, 0.0, noise_cov=np.eye(1))
    roots = np.roots([4.0, -0.5, -0.125])
    target = max(roots)
    assert pred.sigma[0, 0] == pytest.approx(target, rel=1e-12)
    assert pred.residual < 1e-9


def test_ngd_zero_constant_noise():
    prob = QuadraticProblem.from_diagonal([1.0, 3.0])
    pred = st.ngd_covariance(prob, 0.6, 0.2, noise_cov=np.zeros((2, 2)))
    assert np.allclose(pred.sigma, 0.6 / (2 * 1.2) * np.linalg.inv(prob.hessian))


def test_ngd_rejects_noncommuting_noise():
    prob = QuadraticProblem.from_diagonal([1.0, 0.2])
    c = np.array([[1.0, 0.5], [0.5, 1.0]])
    with pytest.raises(ValueError):
        st.ngd_covariance(prob, 0.5, 0.0, noise_cov=c)


def test_ngd_minibatch_commutes_with_k():
    rng = np.random.default_rng(14)
    prob, _ = _stable_instance(rng, 3)
    pred = st.ngd_covariance(prob, 0.4, 0.1, n_data=500, batch=50)
    assert commutator_norm(pred.sigma, prob.hessian) < 1e-10
    dnm = st.dnm_covariance(prob, 0.009 * prob.hessian, 1.0)
    assert commutator_norm(dnm.sigma, prob.hessian) < 1e-10


def test_adam_covariance_examples():
    pred = st.adam_covariance(0.1, 1.0, 3)
    assert np.allclose(pred.sigma, 0.005 * np.eye(3))
    assert st.adam_covariance(0.2, 0.0, 2).sigma[0, 0] == pytest.approx(0.01)
    k = np.diag([1.0, 0.1])
    pred = st.adam_covariance(0.1, 1.0, 2, hessian=k)
    assert pred.train_error == pytest.approx(0.00275)


# --- state-dependent noise ------------------------------------------------


def test_state_dependent_constant_map():
    rng = np.random.default_rng(15)
    prob, c = _stable_instance(rng, 3)
    pred = st.state_dependent_fixed_point(prob, lambda s: c, lr=1.0, momentum=0.4)
    direct = st.solve_sgdm_covariance(prob, c, 1.0, 0.4)
    assert np.linalg.norm(pred.sigma - direct.sigma) / np.linalg.norm(direct.sigma) < 1e-10


def test_state_dependent_zero_map():
    prob = QuadraticProblem.from_diagonal([1.0, 2.0])
    pred = st.state_dependent_fixed_point(prob, lambda s: np.zeros((2, 2)), lr=0.5)
    assert np.allclose(pred.sigma, 0.0)


def test_state_dependent_ngd_map_matches_closed_form():
    prob = QuadraticProblem.from_diagonal([1.5, 0.4])
    lr = 0.5
    n, s = 1000, 100
    m = (n - s) / (n * s)
    k = prob.hessian

    def noise_map(sigma):
        return m * k @ sigma @ k

    def precond_map(sigma):
        return lr * np.linalg.inv(k @ sigma @ k)

    pred = st.state_dependent_fixed_point(prob, noise_map,
                                          preconditioner_map=precond_map)
    closed = st.ngd_covariance(prob, lr, 0.0, n_data=n, batch=s)
    assert np.linalg.norm(pred.sigma - closed.sigma) / np.linalg.norm(closed.sigma) < 1e-8


def test_state_dependent_nonconvergence_error():
    prob = QuadraticProblem.from_diagonal([1.0])

    def runaway(sigma):  # expansive map with no fixed point in PSD cone
        return np.eye(1) + 2.0 * sigma

    with pytest.raises(st.ConvergenceError):
        st.state_dependent_fixed_point(prob, runaway, lr=1.0, max_iters=50)


# --- stability and regimes ------------------------------------------------


def test_stability_check_examples():
    prob = QuadraticProblem.from_diagonal([1.0])
    res = st.stability_check(prob, lr=1.9)
    assert res.stable and res.margin == pytest.approx(0.1)
    res = st.stability_check(prob, lr=2.75, momentum=0.3)
    assert not res.stable
    res = st.stability_check(prob, lr=1e-12, momentum=0.5)
    assert res.margin == pytest.approx(3.0)


def test_stability_check_matrix_lr():
    prob = QuadraticProblem.from_diagonal([4.0, 1.0])
    assert st.stability_check(prob, preconditioner=0.4 * np.eye(2)).stable
    assert not st.stability_check(prob, preconditioner=0.6 * np.eye(2)).stable


def test_classify_regime_examples_and_boundaries():
    assert st.classify_regime_1d(1.0, 0.5) == st.Regime.MONOTONE_CONVERGENT
    assert st.classify_regime_1d(1.0, 1.5) == st.Regime.OSCILLATORY_CONVERGENT
    assert st.classify_regime_1d(1.0, 2.5) == st.Regime.DIVERGENT
    assert st.classify_regime_1d(1.0, 1.0) == st.Regime.OSCILLATORY_CONVERGENT
    assert st.classify_regime_1d(1.0, 2.0) == st.Regime.DIVERGENT


# --- effective inverse ----------------------------------------------------


def test_effective_inverse_examples():
    prob = QuadraticProblem.from_diagonal([1.0])
    pred = st.solve_sgd_covariance(prob, np.eye(1), 1.0)
    inv = st.effective_inverse_covariance(pred)
    assert inv.inverse[0, 0] == pytest.approx(1.0)

    prob2 = QuadraticProblem.from_diagonal([1.0, 0.5])
    cont = st.continuous_covariance(prob2, 0.3 * np.eye(2), 0.4)
    inv2 = st.effective_inverse_covariance(cont, prob2)
    assert np.allclose(inv2.inverse, 2.0 / (0.3 * 0.4) * prob2.hessian)
    assert inv2.hessian_coefficient == pytest.approx(2.0 / 0.12, rel=1e-8)
    assert inv2.hessian_squared_coefficient == pytest.approx(0.0, abs=1e-8)


def test_effective_inverse_discrete_correction_sign():
    # for white noise the exact inverse expands as c1 K + c2 K^2 with c2 < 0
    prob = QuadraticProblem.from_diagonal([1.0, 0.5])
    pred = st.solve_sgd_covariance(prob, np.eye(2), 0.5)
    inv = st.effective_inverse_covariance(pred, prob)
    assert inv.fit_residual < 1e-10
    assert inv.hessian_squared_coefficient < 0.0


# --- structural invariants ------------------------------------------------


def test_commutation_lemma():
    rng = np.random.default_rng(16)
    k = random_spd(3, rng)
    k /= sym_eigen(k).eigenvalues[0]
    prob = QuadraticProblem.create(k)
    c = 0.4 * np.eye(3) + 0.6 * k
    sigma = st.solve_sgd_covariance(prob, c, 1.0).sigma
    assert commutator_norm(sigma, k) < 1e-9
    # generic non-commuting C produces a non-commuting Sigma
    c_nc = random_spd(3, rng)
    sigma_nc = st.solve_sgd_covariance(prob, c_nc, 1.0).sigma
    assert commutator_norm(sigma_nc, k) > 1e-3


def test_continuum_limit_first_order():
    rng = np.random.default_rng(17)
    prob, c = _stable_instance(rng, 3)
    gaps = []
    for lr in (1e-2, 1e-3, 1e-4):
        d = st.solve_sgd_covariance(prob, c, lr).sigma
        cont = st.continuous_covariance(prob, c, lr).sigma
        gaps.append(np.linalg.norm(d - cont) / np.linalg.norm(cont) / lr)
    # relative gap is O(lr): the ratio gap/lr stays bounded as lr -> 0
    assert max(gaps) < 2.0 * min(gaps) + 1e-9


def test_discrete_exceeds_continuous():
    rng = np.random.default_rng(18)
    k = random_spd(3, rng)
    k /= sym_eigen(k).eigenvalues[0]
    prob = QuadraticProblem.create(k)
    c = 0.5 * np.eye(3) + 0.5 * k
    for lr in (0.3, 1.0, 1.7):
        diff = (st.solve_sgd_covariance(prob, c, lr).sigma
                - st.continuous_covariance(prob, c, lr).sigma)
        assert sym_eigen(diff).eigenvalues[-1] > -1e-12


def test_monotone_divergence_in_lr():
    prob = QuadraticProblem.from_diagonal([1.0])
    lrs = np.linspace(0.05, 1.95, 30)
    values = [st.solve_sgd_covariance(prob, np.eye(1), lr).sigma[0, 0] for lr in lrs]
    assert all(b > a for a, b in zip(values, values[1:]))
    assert st.solve_sgd_covariance(prob, np.eye(1), 1.9999).sigma[0, 0] > 1e3
