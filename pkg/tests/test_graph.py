import numpy as np
import pytest
from scipy.optimize import least_squares

import toy
from toy import fd_jacobian, perturbed
from slamim.core import VehicleState
from slamim.graph import (Control, MEstimator, WindowConfig, assemble_cost, jacobians,
                          linearize_window, motion_model, optimize_window, pack_window, predict_vehicle_prior,
                          row_weights, unpack_window)


# --------------------------------------------------------------------------
# M-estimator

def test_huber_properties():
    est = MEstimator(c=1.345)
    r = np.linspace(0, 10, 101)
    assert est.loss(0.0) == 0.0
    assert np.all(np.diff(est.loss(r)) >= 0)
    assert np.allclose(est.weight(r[1:]), np.minimum(1.0, 1.345 / r[1:]))
    q = MEstimator(kind="quadratic")
    assert np.allclose(q.loss(r), 0.5 * r * r) and np.all(q.weight(r) == 1)
    with pytest.raises(ValueError):
        MEstimator(kind="cauchy")


# --------------------------------------------------------------------------
# cost

@pytest.mark.parametrize("T,n_pix", [(1, 50), (3, 0)])
def test_noise_free_cost_vanishes(rng, T, n_pix):
    problem, truth = toy.make_toy(rng, T=T, n_pix=n_pix)
    _, cost = assemble_cost(problem, truth)
    assert cost < 1e-12


def test_status_halves_term_weight(rng):
    problem, truth = toy.make_toy(rng, T=1, n_pix=0)
    lin0 = linearize_window(problem, pack_window(problem, truth))
    problem.epochs[0].gps_status[2] = 1.0
    lin1 = linearize_window(problem, pack_window(problem, truth))
    row = lin0.groups["gps"][0].start + 2
    assert lin1.status_scale[row] == 0.5 * lin0.status_scale[row] == 0.5
    # W carries the square of the residual multiplier
    w0, w1 = row_weights(lin0, MEstimator()), row_weights(lin1, MEstimator())
    assert w1[row] == pytest.approx(0.25 * w0[row])


def test_hand_summed_cost(rng):
    problem, truth = toy.make_toy(rng, n_sats=4, n_pix=4, T=1)
    states = perturbed(truth, rng, pos=3.0, att=0.002)
    problem.epochs[0].gps_status[:] = [0.0, 0.5, 0.0, 1.0]
    est = MEstimator(c=1.345)
    _, cost = assemble_cost(problem, states, est)

    def huber(r, d=1):
        c = 1.345 * np.sqrt(d)
        return 0.5 * r * r if r <= c else c * r - 0.5 * c * c

    ep, x = problem.epochs[0], states[0].vehicle
    total = 0.0
    dv = x.to_vector() - problem.vehicle_prior_mean
    total += huber(np.sqrt(dv @ np.linalg.solve(problem.vehicle_prior_cov, dv)), 11)
    for k, y in enumerate(states[0].satellites):
        h = np.linalg.norm(y.pos - x.pos) + x.clk_bias - y.clk_bias
        total += huber(abs(ep.rho[k] - h) / ((ep.gps_status[k] + 1) * ep.sigma[k]))
        d = y.to_vector() - ep.sat_prior[k]
        total += huber(np.sqrt(d @ np.linalg.solve(ep.sat_prior_cov, d)), 8)
    lms = problem.landmarks
    from slamim.camera import bilinear, camera_to_world, project
    Rwc = camera_to_world(x.att, problem.R_enu)
    for j, lm in enumerate(states[0].landmarks):
        d = lm.world_pos - lms.prior[j]
        total += huber(np.sqrt(d @ np.linalg.solve(lms.cov[j], d)), 3)
        uv = project(Rwc.T @ (lm.world_pos - x.pos), toy.INTR)
        total += huber(abs(float(bilinear(ep.image, uv)) - lms.ref_intensity[j]) / lms.omega)
    assert cost == pytest.approx(total, rel=1e-10)


# --------------------------------------------------------------------------
# Jacobians

def test_gps_rows_closed_form(rng):
    problem, truth = toy.make_toy(rng, T=1, n_pix=0)
    H = jacobians(problem, truth)["H"]
    x = truth[0].vehicle
    for k, y in enumerate(truth[0].satellites):
        s = problem.epochs[0].sigma[k]
        u = (y.pos - x.pos) / np.linalg.norm(y.pos - x.pos)
        assert np.allclose(H[k, 0:3], -u / s)
        assert H[k, 3] == pytest.approx(1 / s)
        col = problem.sat_index(0, k)
        assert np.allclose(H[k, col:col + 3], -H[k, 0:3])


@pytest.mark.parametrize("anchored", [False, True])
def test_jacobian_matches_finite_differences(rng, anchored):
    problem, truth = toy.make_toy(rng, n_sats=5, n_pix=50, T=2, anchored=anchored)
    states = perturbed(truth, rng, pos=2.0, att=0.003)
    theta = pack_window(problem, states)
    lin = linearize_window(problem, theta)
    fd = fd_jacobian(problem, theta, lin.photometric_active)
    C = lin.C.toarray()
    for name, slices in lin.groups.items():
        rows = np.concatenate([np.arange(s.start, s.stop) for s in slices])
        scale = np.max(np.abs(fd[rows])) or 1.0
        assert np.max(np.abs(C[rows] - fd[rows])) / scale < 1e-5, name


# --------------------------------------------------------------------------
# optimiser

def test_recovers_truth_from_perturbed_init(rng):
    problem, truth = toy.make_toy(rng, n_sats=6, T=3, n_pix=0)
    res = optimize_window(problem, perturbed(truth, rng), WindowConfig(T=3, max_iters=50))
    for st, tr in zip(res.states, truth):
        assert np.linalg.norm(st.vehicle.pos - tr.vehicle.pos) < 1e-3
    assert res.cost <= res.initial_cost


def test_recovers_truth_with_landmarks(rng):
    problem, truth = toy.make_toy(rng, n_sats=6, T=1, n_pix=50)
    res = optimize_window(problem, perturbed(truth, rng), WindowConfig(T=1, max_iters=50))
    assert np.linalg.norm(res.states[0].vehicle.pos - truth[0].vehicle.pos) < 1e-3


def test_init_at_truth_is_a_fixed_point(rng):
    problem, truth = toy.make_toy(rng, T=2, n_pix=0)
    res = optimize_window(problem, truth)
    assert res.accepted <= 1
    assert np.allclose(res.theta, pack_window(problem, truth), atol=1e-9, rtol=0)


def test_matches_independent_least_squares(rng):
    problem, truth = toy.make_toy(rng, n_sats=6, T=2, n_pix=0)
    for ep in problem.epochs:
        ep.rho = ep.rho + rng.normal(size=len(ep.rho)) * ep.sigma
    init = perturbed(truth, rng, pos=5.0)
    res = optimize_window(problem, init, WindowConfig(T=2, max_iters=100, cost_tol=0.0),
                          MEstimator(kind="quadratic"))
    ref = least_squares(lambda th: linearize_window(problem, th, need_jac=False).e,
                        pack_window(problem, init), x_scale="jac", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    assert np.allclose(res.theta[:3], ref.x[:3], atol=1e-6)


def test_huber_limits_outlier(rng):
    errs = {}
    for case in ("clean", "huber", "quadratic"):
        r = np.random.default_rng(5)
        problem, truth = toy.make_toy(r, n_sats=8, T=1, n_pix=0)
        ep = problem.epochs[0]
        ep.sigma = np.full(8, 3.0)
        ep.rho = ep.rho + r.normal(size=8) * 3.0
        if case != "clean":
            ep.rho[3] += 200.0
        est = MEstimator(kind="quadratic") if case == "quadratic" else MEstimator(c=1.345)
        res = optimize_window(problem, truth, WindowConfig(T=1, max_iters=100), est)
        errs[case] = np.linalg.norm(res.states[0].vehicle.pos - truth[0].vehicle.pos)
    assert errs["huber"] < 3 * errs["clean"]
    assert errs["quadratic"] > 10 * errs["clean"]


def test_unpack_round_trip(rng):
    problem, truth = toy.make_toy(rng, T=2, n_pix=10)
    theta = pack_window(problem, truth)
    assert np.array_equal(pack_window(problem, unpack_window(problem, theta)), theta)


# --------------------------------------------------------------------------
# motion model

def test_motion_model_examples(rng):
    x = VehicleState([1.0, 2.0, 3.0], 5.0, [0, 0, 0], 0.0, [0.1, 0.2, 0.3])
    y = motion_model(x, Control(), 1.0)
    assert np.array_equal(y.to_vector(), x.to_vector())
    x = VehicleState([0, 0, 0], vel=[1, 0, 0])
    assert np.allclose(motion_model(x, None, 2.0).pos, [2, 0, 0])
    with pytest.raises(ValueError):
        motion_model(x, None, 0.0)


def test_motion_model_matches_euler_integrator(rng):
    x = VehicleState(rng.normal(size=3), 1.0, rng.normal(size=3), 0.1, [0.0, 0.0, 0.1])
    pos, vel, clk, att = x.pos.copy(), x.vel.copy(), x.clk_bias, x.att.copy()
    for _ in range(20):
        c = Control(rng.normal(size=3), rng.normal(scale=0.01, size=3))
        x = motion_model(x, c, 0.5)
        pos = pos + 0.5 * vel
        vel = vel + 0.5 * c.accel
        clk = clk + 0.5 * 0.1
        att = att + 0.5 * c.rates
    assert np.allclose(x.pos, pos) and np.allclose(x.vel, vel)
    assert x.clk_bias == pytest.approx(clk)
    assert np.allclose(np.exp(1j * x.att), np.exp(1j * att))


def test_prior_inflation_scope():
    x = VehicleState([0, 0, 0])
    P = np.eye(11)
    _, cov = predict_vehicle_prior(x, P, Control(), 1.0, np.zeros((11, 11)), chi_bar=4.0)
    base = predict_vehicle_prior(x, P, Control(), 1.0, np.zeros((11, 11)))[1]
    d = np.diag(cov - base)
    assert np.allclose(d[:3], 4.0) and np.allclose(d[3:], 0.0)
