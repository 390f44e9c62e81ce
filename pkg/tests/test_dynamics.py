import csv
import json

import numpy as np
import pytest

from sgdflux import dynamics as dyn
from sgdflux.applications import escape_efficiency_discrete
from sgdflux.model import NoiseSpec, OptimizerSpec, QuadraticProblem
from sgdflux.stationary import solve_sgd_covariance, solve_sgdm_covariance


# --- seeding --------------------------------------------------------------


def test_chain_seed_deterministic_and_distinct():
    seeds = [dyn.chain_seed(42, i) for i in range(1000)]
    assert seeds == [dyn.chain_seed(42, i) for i in range(1000)]
    assert len(set(seeds)) == 1000
    assert dyn.chain_seed(42, 0) != dyn.chain_seed(43, 0)


def test_chain_generator_streams_differ():
    a = dyn.chain_generator(7, 0).standard_normal(4)
    b = dyn.chain_generator(7, 1).standard_normal(4)
    c = dyn.chain_generator(7, 0).standard_normal(4)
    assert np.array_equal(a, c)
    assert not np.array_equal(a, b)


# --- noise samplers -------------------------------------------------------


@pytest.mark.parametrize("spec_name", ["isotropic", "hessian_aligned",
                                       "student_t", "chi_squared"])
def test_sampler_covariance(spec_name):
    prob = QuadraticProblem.from_diagonal([1.0, 0.4])
    if spec_name == "isotropic":
        spec = NoiseSpec.isotropic(0.8)
        target = 0.8 * np.eye(2)
    elif spec_name == "hessian_aligned":
        spec = NoiseSpec.hessian_aligned(0.5)
        target = 0.5 * prob.hessian
    elif spec_name == "student_t":
        spec = NoiseSpec.student_t(5.0, sigma2=0.8)
        target = 0.8 * np.eye(2)
    else:
        spec = NoiseSpec.chi_squared(3.0, sigma2=0.8)
        target = 0.8 * np.eye(2)
    sampler = dyn.make_noise_sampler(spec, prob)
    rng = np.random.default_rng(0)
    draws = sampler.sample_block(rng, 400_000)
    assert np.abs(draws.mean(axis=0)).max() < 0.01
    cov = draws.T @ draws / draws.shape[0]
    assert np.linalg.norm(cov - target) / np.linalg.norm(target) < 0.02


def test_zero_noise_sampler():
    prob = QuadraticProblem.from_diagonal([1.0])
    sampler = dyn.make_noise_sampler(NoiseSpec.isotropic(0.0), prob)
    assert np.array_equal(sampler.sample_block(np.random.default_rng(0), 5),
                          np.zeros((5, 1)))


def test_state_dependent_sampler_rejected():
    prob = QuadraticProblem.from_diagonal([1.0])
    spec = NoiseSpec(kind=dyn.NoiseKind.STATE_DEPENDENT)
    with pytest.raises(ValueError):
        dyn.make_noise_sampler(spec, prob)


# --- single steps ---------------------------------------------------------


def test_step_monotone_contraction():
    prob = QuadraticProblem.from_diagonal([1.0])
    opt = OptimizerSpec.sgd(0.5)
    state = dyn.ChainState.initial([1.0])
    for _ in range(3):
        state = dyn.step(state, prob, opt, np.zeros(1))
    assert state.w[0] == pytest.approx(0.125)
    assert state.step == 3


def test_step_oscillatory_signs():
    prob = QuadraticProblem.from_diagonal([1.0])
    opt = OptimizerSpec.sgd(1.5)
    state = dyn.ChainState.initial([1.0])
    signs = []
    for _ in range(4):
        state = dyn.step(state, prob, opt, np.zeros(1))
        signs.append(np.sign(state.w[0]))
    assert signs == [-1.0, 1.0, -1.0, 1.0]
    assert abs(state.w[0]) < 1.0


def test_step_sgdm_zero_momentum_matches_sgd():
    prob = QuadraticProblem.from_diagonal([1.0, 0.3])
    rng = np.random.default_rng(1)
    noise = rng.standard_normal((10, 2))
    a = dyn.ChainState.initial([1.0, -1.0])
    b = dyn.ChainState.initial([1.0, -1.0])
    for eta in noise:
        a = dyn.step(a, prob, OptimizerSpec.sgd(0.7), eta)
        b = dyn.step(b, prob, OptimizerSpec.sgdm(0.7, 0.0), eta)
    assert np.allclose(a.w, b.w)


def test_step_divergence_freezes_state():
    prob = QuadraticProblem.from_diagonal([1.0])
    opt = OptimizerSpec.sgd(2.5)
    state = dyn.ChainState.initial([1.0])
    for _ in range(500):
        state = dyn.step(state, prob, opt, np.zeros(1))
        if state.diverged:
            break
    assert state.diverged
    frozen = dyn.step(state, prob, opt, np.ones(1))
    assert frozen is state


# --- single chains --------------------------------------------------------


def test_run_chain_deterministic():
    prob = QuadraticProblem.from_diagonal([1.0, 0.5])
    opt = OptimizerSpec.sgd(0.8)
    spec = NoiseSpec.isotropic(1.0)
    a = dyn.run_chain(prob, opt, spec, n_steps=50, seed=3)
    b = dyn.run_chain(prob, opt, spec, n_steps=50, seed=3)
    assert np.array_equal(a.final.w, b.final.w)
    c = dyn.run_chain(prob, opt, spec, n_steps=50, seed=4)
    assert not np.array_equal(a.final.w, c.final.w)


def test_run_chain_trajectory_recording():
    prob = QuadraticProblem.from_diagonal([1.0])
    res = dyn.run_chain(prob, OptimizerSpec.sgd(0.5), NoiseSpec.isotropic(1.0),
                        n_steps=20, seed=0, record_every=5)
    assert np.array_equal(res.recorded_steps, [5, 10, 15, 20])
    assert res.trajectory.shape == (4, 1)


def test_run_chain_noiseless_contraction():
    prob = QuadraticProblem.from_diagonal([1.0])
    res = dyn.run_chain(prob, OptimizerSpec.sgd(0.5), NoiseSpec.isotropic(0.0),
                        n_steps=40, seed=0, initial=[1.0])
    assert abs(res.final.w[0]) < 1e-10
    assert not res.final.diverged


def test_run_chain_divergence_flag():
    prob = QuadraticProblem.from_diagonal([1.0])
    res = dyn.run_chain(prob, OptimizerSpec.sgd(2.5), NoiseSpec.isotropic(1.0),
                        n_steps=400, seed=0)
    assert res.final.diverged


# --- ensembles ------------------------------------------------------------


def test_ensemble_chunk_invariance():
    prob = QuadraticProblem.from_diagonal([1.0, 0.2])
    opt = OptimizerSpec.sgdm(0.9, 0.3)
    spec = NoiseSpec.isotropic(1.0)
    a = dyn.run_ensemble(prob, opt, spec, n_chains=300, n_steps=60,
                         master_seed=11, chunk_size=64)
    b = dyn.run_ensemble(prob, opt, spec, n_chains=300, n_steps=60,
                         master_seed=11, chunk_size=299)
    assert np.array_equal(a.empirical_cov, b.empirical_cov)
    assert np.array_equal(a.empirical_mean, b.empirical_mean)


def test_ensemble_mean_near_zero():
    prob = QuadraticProblem.from_diagonal([1.0])
    stats = dyn.run_ensemble(prob, OptimizerSpec.sgd(1.0), NoiseSpec.isotropic(1.0),
                             n_chains=4000, n_steps=200, master_seed=5)
    sigma = stats.empirical_cov[0, 0]
    assert abs(stats.empirical_mean[0]) < 4.0 * np.sqrt(sigma / 4000)


@pytest.mark.parametrize("opt,spec", [
    (OptimizerSpec.sgd(1.0), NoiseSpec.isotropic(1.0)),
    (OptimizerSpec.sgdm(0.9, 0.5), NoiseSpec.hessian_aligned(1.0)),
    (OptimizerSpec.sgd(1.0), NoiseSpec.student_t(6.0)),
    (OptimizerSpec.sgd(1.0), NoiseSpec.chi_squared(4.0)),
])
def test_ensemble_matches_prediction(opt, spec):
    prob = QuadraticProblem.from_diagonal([1.0, 0.4])
    c = spec.covariance_matrix(prob)
    pred = solve_sgdm_covariance(prob, c, opt.lr, opt.momentum)
    stats = dyn.run_ensemble(prob, opt, spec, n_chains=8000, n_steps=400,
                             master_seed=21)
    rel = (np.linalg.norm(stats.empirical_cov - pred.sigma)
           / np.linalg.norm(pred.sigma))
    assert rel < 0.06
    assert stats.n_diverged == 0


def test_ensemble_all_diverged():
    prob = QuadraticProblem.from_diagonal([1.0])
    with pytest.raises(dyn.EmptyEnsembleError):
        dyn.run_ensemble(prob, OptimizerSpec.sgd(2.5), NoiseSpec.isotropic(1.0),
                         n_chains=50, n_steps=500, master_seed=1)


# --- regression datasets --------------------------------------------------


def test_dataset_hessian_close_to_population():
    ds = dyn.make_regression_dataset(5000, 3, np.diag([1.0, 0.5, 0.25]),
                                     w_star=[1.0, -1.0, 2.0],
                                     label_noise_sd=0.1, seed=2)
    pop = 2.0 * np.diag([1.0, 0.5, 0.25])
    rel = np.linalg.norm(ds.empirical_hessian - pop) / np.linalg.norm(pop)
    assert rel < 0.1


def test_dataset_zero_label_noise_interpolates():
    ds = dyn.make_regression_dataset(200, 2, np.eye(2), w_star=[0.5, -2.0],
                                     label_noise_sd=0.0, seed=3)
    assert np.linalg.norm(ds.full_gradient(ds.generating_w)) < 1e-10
    assert np.allclose(ds.minimizer(), ds.generating_w)
    # every minibatch gradient vanishes too: noiseless interpolation
    g = dyn.minibatch_gradient(ds, ds.generating_w, batch=5,
                               rng=np.random.default_rng(0))
    assert np.linalg.norm(g) < 1e-10


def test_full_batch_gradient_matches():
    ds = dyn.make_regression_dataset(50, 2, np.eye(2), w_star=[1.0, 1.0],
                                     label_noise_sd=0.3, seed=4)
    w = np.array([0.2, -0.4])
    g = dyn.minibatch_gradient(ds, w, batch=ds.n, rng=np.random.default_rng(0))
    assert np.allclose(g, ds.full_gradient(w))


def test_minibatch_noise_covariance_empirical():
    ds = dyn.make_regression_dataset(400, 2, np.eye(2), w_star=[1.0, -0.5],
                                     label_noise_sd=0.5, seed=5)
    batch = 8
    predicted = dyn.minibatch_noise_covariance(ds, batch)
    w0 = ds.minimizer()
    rng = np.random.default_rng(6)
    draws = np.array([dyn.minibatch_gradient(ds, w0, batch, rng)
                      for _ in range(40_000)])
    cov = draws.T @ draws / draws.shape[0]
    assert np.linalg.norm(cov - predicted) / np.linalg.norm(predicted) < 0.1


def test_minibatch_noise_covariance_full_batch_is_zero():
    ds = dyn.make_regression_dataset(100, 2, np.eye(2), w_star=[1.0, 0.0],
                                     label_noise_sd=0.5, seed=7)
    assert np.allclose(dyn.minibatch_noise_covariance(ds, ds.n), 0.0)


def test_regression_ensemble_near_quadratic_prediction():
    ds = dyn.make_regression_dataset(300, 2, np.diag([0.5, 0.25]),
                                     w_star=[1.0, -1.0],
                                     label_noise_sd=0.4, seed=8)
    lr, batch = 0.2, 4
    prob = QuadraticProblem.create(ds.empirical_hessian)
    pred = solve_sgd_covariance(prob, dyn.minibatch_noise_covariance(ds, batch), lr)
    stats = dyn.run_regression_ensemble(ds, lr, batch, n_chains=800,
                                        n_steps=400, master_seed=9)
    rel = (np.linalg.norm(stats.empirical_cov - pred.sigma)
           / np.linalg.norm(pred.sigma))
    # real minibatch chains see state-dependent noise, so only agreement
    # in magnitude is expected, not exactness
    assert rel < 0.25
    assert stats.n_diverged == 0


# --- escape curves --------------------------------------------------------


def test_escape_curve_matches_formula():
    prob = QuadraticProblem.from_diagonal([1.0, 0.4])
    c = np.diag([1.0, 0.7])
    spec = NoiseSpec.explicit(c)
    lr = 0.9
    curve = dyn.escape_efficiency_empirical(prob, spec, lr, t_max=20,
                                            n_runs=30_000, master_seed=13,
                                            record_every=5)
    for t, value in zip(curve.times, curve.values):
        exact = escape_efficiency_discrete(prob.hessian, c, lr, int(t))
        assert value == pytest.approx(exact, rel=0.05)
    assert curve.n_diverged == 0


def test_escape_curve_nondecreasing():
    prob = QuadraticProblem.from_diagonal([1.0])
    curve = dyn.escape_efficiency_empirical(prob, NoiseSpec.isotropic(1.0), 0.5,
                                            t_max=30, n_runs=20_000,
                                            master_seed=14, record_every=1)
    # allow small Monte Carlo dips around the plateau
    diffs = np.diff(curve.values)
    assert diffs.min() > -0.05 * curve.values.max()
    # the averaged first and last thirds are strictly ordered
    third = curve.values.size // 3
    assert curve.values[-third:].mean() > curve.values[:third].mean()


# --- double well ----------------------------------------------------------


def test_double_well_deterministic():
    a = dyn.double_well_escape_experiment(1.0, 0.05, 1, n_runs=100,
                                          t_limit=20_000, master_seed=17)
    b = dyn.double_well_escape_experiment(1.0, 0.05, 1, n_runs=100,
                                          t_limit=20_000, master_seed=17)
    assert a.rate == b.rate and a.n_escaped == b.n_escaped


def test_double_well_rate_monotone_in_rescale():
    low = dyn.double_well_escape_experiment(1.0, 0.05, 1, n_runs=200,
                                            t_limit=40_000, master_seed=18)
    high = dyn.double_well_escape_experiment(3.0, 0.05, 1, n_runs=200,
                                             t_limit=40_000, master_seed=18)
    assert high.rate > low.rate
    assert low.barrier_curvature == pytest.approx(4.0)
    assert high.barrier_curvature == pytest.approx(12.0)


def test_double_well_rejects_unstable_well():
    with pytest.raises(ValueError):
        dyn.double_well_escape_experiment(5.0, 0.05, 1, n_runs=10,
                                          t_limit=100, master_seed=0)


# --- output writers -------------------------------------------------------


def test_write_trajectory_csv_roundtrip(tmp_path):
    path = tmp_path / "traj.csv"
    steps = [5, 10]
    traj = np.array([[0.5, -1.25], [0.0625, 2.0]])
    dyn.write_trajectory_csv(path, 3, steps, traj)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["chain_id", "step", "w_0", "w_1"]
    assert [int(r[0]) for r in rows[1:]] == [3, 3]
    assert [int(r[1]) for r in rows[1:]] == steps
    back = np.array([[float(v) for v in r[2:]] for r in rows[1:]])
    assert np.array_equal(back, traj)


def test_write_ensemble_json(tmp_path):
    prob = QuadraticProblem.from_diagonal([1.0])
    stats = dyn.run_ensemble(prob, OptimizerSpec.sgd(1.0), NoiseSpec.isotropic(1.0),
                             n_chains=10, n_steps=10, master_seed=1)
    path = tmp_path / "stats.json"
    dyn.write_ensemble_json(stats, path)
    payload = json.loads(path.read_text())
    assert payload["schema_version"] == dyn.SCHEMA_VERSION
    assert payload["n_chains"] == 10
    assert payload["master_seed"] == 1
    assert np.allclose(payload["empirical_cov"], stats.empirical_cov)
