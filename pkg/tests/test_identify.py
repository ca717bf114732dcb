import numpy as np
import pytest

from parid.baseparams import ObservationSystem, model_base_set
from parid.errors import InvalidInput, NeverFeasible, RankDeficient
from parid.excitation import ExcitationProblem, FourierTrajectory, TrajectoryConstraints, eval_trajectory, random_initial
from parid.identify import (
    FeasibilityProblem,
    MeasurementSet,
    check_feasibility,
    estimate_variances,
    fit_positions_to_fourier,
    identification_blocks,
    identify_measurements,
    link_feasible,
    relative_error_metric,
    relative_std,
    simulate_measurements,
    stepwise_reduce,
    wls_solve,
)


def toy_obs(rng, n=200, p=4, noise=0.0, dof=2, scale=None):
    K = rng.standard_normal((n, dof, p))
    if scale is not None:
        K = K * scale
    phi = rng.uniform(1, 2, p)
    tau = K @ phi + noise * rng.standard_normal((n, dof))
    return ObservationSystem.from_blocks(K, tau, [f"p{k}" for k in range(p)]), phi


@pytest.fixture(scope="module")
def prs_setup(prs):
    cons = TrajectoryConstraints.from_model(prs)
    prob = ExcitationProblem(prs, None, cons)
    traj = prob.trajectory(random_initial(prob, np.random.default_rng(2)))
    bset, _ = model_base_set(prs, np.random.default_rng(0), n=1000)
    ms, st = simulate_measurements(prs, traj, 3, 0.0)
    lay = prs.layout()
    basis = lay.matrix[:, bset.kept]
    K = identification_blocks(prs, st, basis)
    labels = bset.kept_labels + prs.friction_labels() + prs.rotor_labels()
    truth = np.concatenate([bset.base_values(lay.merge_values(prs.nominal_raw())),
                            prs.nominal_friction(), prs.nominal_rotor()])
    return traj, bset, K, labels, truth, ms


def test_identical_repetitions_zero_variance():
    q = np.zeros((3, 10, 2))
    tau = np.tile(np.random.default_rng(0).standard_normal((10, 2)), (3, 1, 1))
    ms = MeasurementSet(np.arange(10) / 100, q, tau)
    np.testing.assert_array_equal(estimate_variances(ms), 0.0)


def test_two_repetitions_plus_minus_d():
    v = np.random.default_rng(1).standard_normal((20, 3))
    d = np.array([0.1, 0.2, 0.3])
    ms = MeasurementSet(np.arange(20) / 100, np.zeros((2, 20, 3)), np.stack([v + d, v - d]))
    np.testing.assert_allclose(estimate_variances(ms), 2 * d ** 2, rtol=1e-12)


def test_gaussian_variance_estimate_within_20_percent():
    s = 0.3
    for seed in range(100):
        rng = np.random.default_rng(seed)
        tau = np.sin(np.arange(800))[None, :, None] + s * rng.standard_normal((5, 800, 2))
        ms = MeasurementSet(np.arange(800) / 100, np.zeros_like(tau), tau)
        assert np.all(np.abs(estimate_variances(ms) / s ** 2 - 1) < 0.2)


def test_measurement_validation():
    with pytest.raises(InvalidInput):
        MeasurementSet(np.arange(5), np.zeros((1, 5, 2)), np.zeros((1, 5, 2)))
    with pytest.raises(InvalidInput):
        MeasurementSet(np.arange(4), np.zeros((2, 5, 2)), np.zeros((2, 5, 2)))


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    ms = MeasurementSet(np.arange(30) / 100, rng.standard_normal((3, 30, 2)),
                        rng.standard_normal((3, 30, 2)), 100.0, ["p1", "p2"])
    ms.to_csv(tmp_path / "m.csv")
    back = MeasurementSet.from_csv(tmp_path / "m.csv")
    np.testing.assert_array_equal(back.tau, ms.tau)
    np.testing.assert_array_equal(back.q, ms.q)
    assert back.joint_names == ["p1", "p2"] and back.rate == pytest.approx(100.0)
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(InvalidInput):
        MeasurementSet.from_csv(tmp_path / "bad.csv")


def test_wls_noise_free_exact():
    obs, phi = toy_obs(np.random.default_rng(3))
    res = wls_solve(obs, [1.0, 4.0])
    np.testing.assert_allclose(res.phi, phi, rtol=1e-12)
    np.testing.assert_allclose(relative_std(res.phi, res.cov), 0.0, atol=1e-9)


def test_wls_identity_is_ols_and_scale_invariant():
    obs, _ = toy_obs(np.random.default_rng(4), noise=0.1)
    ols = np.linalg.lstsq(obs.W, obs.Y, rcond=None)[0]
    np.testing.assert_allclose(wls_solve(obs, [1.0, 1.0]).phi, ols, rtol=1e-10)
    a = wls_solve(obs, [0.3, 2.0]).phi
    b = wls_solve(obs, [0.3 / 4, 2.0 / 4]).phi
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_wls_rank_deficient():
    obs, _ = toy_obs(np.random.default_rng(5))
    W = np.column_stack([obs.W, obs.W[:, 0]])
    with pytest.raises(RankDeficient):
        wls_solve(ObservationSystem(W, obs.Y, 2), [1.0, 1.0])


def test_wls_zero_variance_falls_back_to_unit_weights():
    obs, _ = toy_obs(np.random.default_rng(6), noise=0.1)
    np.testing.assert_allclose(wls_solve(obs, [0.0, 2.0]).phi, wls_solve(obs, [1.0, 1.0]).phi)


def test_relative_std_examples():
    np.testing.assert_array_equal(relative_std([1.0, 2.0], np.zeros((2, 2))), [0.0, 0.0])
    assert relative_std([4.0], [[0.04]])[0] == pytest.approx(5.0)
    assert relative_std([0.0, 1.0], np.eye(2))[0] == np.inf


def test_weak_column_dropped_first_and_trace_monotone():
    rng = np.random.default_rng(7)
    scale = np.array([1.0, 1.0, 1e-9, 1.0, 1.0])
    obs, phi = toy_obs(rng, p=5, noise=0.01, scale=scale)

    def gate(labels, values):
        return len(labels) <= 3, {"n": len(labels)}

    out = stepwise_reduce(obs, [1e-4, 1e-4], gate)
    assert out.eliminated[0][0] == "p2"
    assert len(out.labels) == 3 and out.witness == {"n": 3}
    res = [t["residual"] for t in out.trace]
    assert all(b >= a - 1e-12 for a, b in zip(res, res[1:]))
    again = stepwise_reduce(obs, [1e-4, 1e-4], gate)
    assert again.eliminated == out.eliminated


def test_never_feasible():
    obs, _ = toy_obs(np.random.default_rng(8), p=3, noise=0.01)
    with pytest.raises(NeverFeasible) as info:
        stepwise_reduce(obs, [1.0, 1.0], lambda labels, values: (False, None))
    assert len(info.value.trace) == 3


def test_point_mass_boundary():
    phi = np.zeros(10)
    phi[6] = 2.0
    for eps, ok in ((1e-9, True), (1.0, True), (0.0, False)):
        phi[[0, 3, 5]] = eps
        assert link_feasible(phi)[0] == ok
    phi[6] = -1.0
    phi[[0, 3, 5]] = 1.0
    assert not link_feasible(phi)[0]


def test_feasibility_witness_near_truth(prs, prs_setup):
    _, bset, _, _, truth, _ = prs_setup
    prob = FeasibilityProblem.from_model(prs, bset)
    flag, witness = check_feasibility(prob, truth[:bset.n_base])
    assert flag
    lay = prs.layout()
    nominal = lay.merge_values(prs.nominal_raw())
    for k, g in enumerate(prob.grid):
        assert abs(witness["grid"][g] - nominal[lay.index(g)]) <= prob.cell()[k]
    raw = np.array(witness["raw"]).reshape(-1, 10)
    assert np.all(raw[:, 6] > 0)
    assert link_feasible(witness["raw"])[0]


def test_negative_total_mass_infeasible(prs, prs_setup):
    _, bset, _, _, truth, _ = prs_setup
    prob = FeasibilityProblem.from_model(prs, bset)
    phi = truth[:bset.n_base].copy()
    phi[bset.kept_labels.index("m3")] = -10.0
    assert check_feasibility(prob, phi) == (False, None)
    assert not check_feasibility(prob, truth[:bset.n_base], {"Fv_p1": -1.0})[0]


def test_feasibility_problem_validation(prs, prs_setup):
    bset = prs_setup[1]
    with pytest.raises(InvalidInput):
        FeasibilityProblem.from_model(prs, bset, grid=("Izz2",))
    with pytest.raises(InvalidInput):
        FeasibilityProblem.from_model(prs, bset, n_points=1)


def test_prs_noise_free_round_trip(prs_setup):
    _, bset, K, labels, truth, ms = prs_setup
    obs = ObservationSystem.from_blocks(K, ms.mean_tau(), labels)
    res = wls_solve(obs, [1.0, 1.0, 1.0])
    err = np.abs(res.phi - truth)
    assert np.all(err <= 1e-8 * np.maximum(np.abs(truth), np.abs(truth).max() * 1e-3))


def test_pipeline_from_measurements(prs, prs_setup):
    traj, bset, _, _, truth, _ = prs_setup
    ms, _ = simulate_measurements(prs, traj, 4, 0.002, np.random.default_rng(1))
    model, obs = identify_measurements(prs, ms, bset)
    assert model.witness is not None
    assert obs.W.shape == (3 * ms.n_samples, 28)
    assert set(model.labels) | {e[0] for e in model.eliminated} == set(obs.labels)


def test_fit_exact_and_extra_harmonics():
    rng = np.random.default_rng(9)
    tr = FourierTrajectory(rng.standard_normal(2), rng.standard_normal((2, 3)),
                           rng.standard_normal((2, 3)))
    t = np.arange(800) / 100
    q, _, _ = eval_trajectory(tr, t)
    fit, qf, qdf, qddf = fit_positions_to_fourier(t, q, tr.f, 3)
    np.testing.assert_allclose(fit.a, tr.a, atol=1e-10)
    np.testing.assert_allclose(fit.b, tr.b, atol=1e-10)
    np.testing.assert_allclose(fit.q0, tr.q0, atol=1e-10)
    big = fit_positions_to_fourier(t, q, tr.f, 6)[0]
    assert np.abs(big.a[:, 3:]).max() < 1e-10 and np.abs(big.b[:, 3:]).max() < 1e-10


def test_fit_noise_acceleration_error_small():
    rng = np.random.default_rng(10)
    tr = FourierTrajectory(np.zeros(1), 0.01 * rng.standard_normal((1, 5)),
                           0.01 * rng.standard_normal((1, 5)))
    t = np.arange(800) / 100
    q, _, qdd = eval_trajectory(tr, t)
    _, _, _, qdd_fit = fit_positions_to_fourier(t, q + 1e-5 * rng.standard_normal(q.shape),
                                                tr.f, 5)
    assert np.abs(qdd_fit - qdd).max() < 1e-4


def test_fit_requires_full_period():
    t = np.arange(300) / 100
    with pytest.raises(InvalidInput):
        fit_positions_to_fourier(t, np.zeros((300, 1)), 0.125, 5)


def test_relative_error_metric():
    tau = np.random.default_rng(11).standard_normal((50, 3))
    assert relative_error_metric(tau, tau)[1] == 0.0
    per, mean = relative_error_metric(tau, np.zeros_like(tau))
    np.testing.assert_allclose(per, 100.0)
    with pytest.raises(InvalidInput):
        relative_error_metric(np.zeros((5, 1)), np.ones((5, 1)))
