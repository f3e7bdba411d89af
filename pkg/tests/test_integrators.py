import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from immp.chain import ChainModel, build_chain_system, chain_equilibrium_harmonic
from immp.errors import NewtonDiverged, TargetUnreachable
from immp.geometry import momentum_residual, position_residual
from immp.integrators import (
    IntegratorConfig,
    acceptance_probability,
    consistent_penalty,
    constrained_state,
    hmc_step,
    langevin_immp_step,
    ou_midpoint_step,
    ou_stability_bound,
    rattle_step,
    tune_penalty,
    verlet_baseline_step,
)
from immp.model import (
    PenaltyConfig,
    PhaseState,
    SystemModel,
    ThermostatConfig,
    penalized_momentum,
    state_from_penalized_momentum,
)
from immp.rng import rng_stream
from immp.spectral import propagate_modes, spectral_variables
from immp.systems import circle_model, double_well, random_quadric_model


def harmonic_chain(N, nubar, gamma=0.0):
    ch = ChainModel(N=N, nubar=nubar, interaction="harmonic", external=False, gamma=gamma)
    return ch, build_chain_system(ch)


class TestRattle:
    @pytest.mark.parametrize("nubar", [0.0, 0.1, 0.3])
    @pytest.mark.parametrize("N", [8, 64])
    def test_harmonic_chain_matches_mode_propagator(self, N, nubar):
        ch, m = harmonic_chain(N, nubar)
        pen = ch.penalty() if nubar > 0 else PenaltyConfig.fixed(1e-8)
        rng = np.random.default_rng(N)
        q, pn = chain_equilibrium_harmonic(ch, 4, rng)
        s = state_from_penalized_momentum(m, pen, q, pn)
        dt = 0.7 / N if nubar == 0 else 0.5
        s1, rep = rattle_step(m, pen, ch.thermostat(), IntegratorConfig(dt=dt), s)
        v, x = spectral_variables(q, pn, nubar)
        v1, x1 = propagate_modes(v, x, dt, N, nubar)
        v2, x2 = spectral_variables(s1.q, penalized_momentum(m, pen, s1), nubar)
        assert_allclose(v2[:, 1:], v1[:, 1:], atol=1e-10)
        assert_allclose(x2[:, 1:], x1[:, 1:], atol=1e-10)

    def test_verlet_matches_mode_propagator(self):
        ch, m = harmonic_chain(16, 0.0)
        rng = np.random.default_rng(0)
        q, p = chain_equilibrium_harmonic(ch, 3, rng)
        dt = 0.05
        s = PhaseState.create(q, p, n=15)
        s1, _ = verlet_baseline_step(m, ch.thermostat(), IntegratorConfig(dt=dt), s, rng)
        v, x = spectral_variables(q, p, 0.0)
        v1, x1 = propagate_modes(v, x, dt, 16, 0.0)
        v2, x2 = spectral_variables(s1.q, s1.p, 0.0)
        assert_allclose(v2[:, 1:], v1[:, 1:], atol=1e-12)
        assert_allclose(x2[:, 1:], x1[:, 1:], atol=1e-12)

    @pytest.mark.parametrize("nu", [0.5, 5.0, np.inf])
    def test_time_reversibility_nonlinear(self, nu):
        m = circle_model(radial_stiffness=3.0)
        pen = PenaltyConfig.fixed(nu)
        th = ThermostatConfig(1.0)
        rng = np.random.default_rng(5)
        theta = rng.uniform(-np.pi, np.pi, 8)
        q = np.stack([np.cos(theta), np.sin(theta)], -1)
        s0 = constrained_state(m, pen, th, q, rng, z=rng.standard_normal((8, 1)) if np.isinf(nu) else None)
        cfg = IntegratorConfig(dt=1e-2, newton_tol=1e-13)
        s1, _ = rattle_step(m, pen, th, cfg, s0)
        s2, _ = rattle_step(m, pen, th, cfg, s1.flipped())
        back = s2.flipped()
        for a, b in zip((back.q, back.p, back.z, back.pz), (s0.q, s0.p, s0.z, s0.pz)):
            assert_allclose(a, b, atol=1e-8)

    def test_constraints_hold_after_steps(self):
        rng = np.random.default_rng(2)
        m = random_quadric_model(rng, d=4, n=2)
        pen, th = PenaltyConfig.fixed(2.0), ThermostatConfig(1.0, 0.5, 0.5)
        s = constrained_state(m, pen, th, 0.1 * rng.standard_normal((16, 4)), rng)
        cfg = IntegratorConfig(dt=0.02, check_constraints=True)
        for _ in range(50):
            s, rep = langevin_immp_step(m, pen, th, cfg, s, rng)
        assert np.max(np.abs(position_residual(m, pen, s.q, s.z))) <= cfg.tol_c
        assert np.max(np.abs(momentum_residual(m, pen, s.q, s.p, s.pz))) <= cfg.tol_c

    def test_free_constrained_flight(self):
        # zero force, linear xi: uniform motion on xi(q) = z/nu
        J = np.array([[1.0], [1.0]])
        m = SystemModel(
            dim=2, n_constraints=1,
            potential=lambda q: np.zeros(q.shape[:-1]),
            grad_potential=lambda q: np.zeros_like(q),
            xi=lambda q: q @ J, constant_jacobian=J,
        )
        pen, th = PenaltyConfig.fixed(1.0), ThermostatConfig(1.0)
        s = state_from_penalized_momentum(m, pen, np.array([0.3, -0.1]), np.array([1.0, 0.4]))
        v = s.p.copy()
        vz = s.pz.copy()
        cfg = IntegratorConfig(dt=0.1)
        for k in range(1, 11):
            s, _ = rattle_step(m, pen, th, cfg, s)
            assert_allclose(s.q, np.array([0.3, -0.1]) + 0.1 * k * v, atol=1e-13)
            assert_allclose(s.z, 0.2 + 0.1 * k * vz, atol=1e-13)
            assert_allclose(s.q @ J, s.z, atol=1e-13)

    def test_newton_divergence_raises(self):
        m = circle_model()
        pen, th = PenaltyConfig.infinite(), ThermostatConfig(1.0)
        rng = np.random.default_rng(0)
        s = constrained_state(m, pen, th, np.array([[1.0, 0.0]]), rng)
        s.p[:] = [[0.0, 400.0]]  # drift far off the circle in one step
        with pytest.raises(NewtonDiverged):
            rattle_step(m, pen, th, IntegratorConfig(dt=0.5, newton_max_iter=5), s)


class TestOU:
    def test_zero_friction_is_identity(self):
        m = circle_model()
        pen, th = PenaltyConfig.fixed(3.0), ThermostatConfig(1.0, 0.0, 0.0)
        rng = np.random.default_rng(0)
        s = constrained_state(m, pen, th, np.array([[0.8, 0.6]]), rng)
        s1 = ou_midpoint_step(m, pen, th, IntegratorConfig(dt=0.1), s, rng)
        assert_array_equal(s1.p, s.p)
        assert_array_equal(s1.pz, s.pz)

    def test_scalar_midpoint_formula(self):
        m = SystemModel(
            dim=1, n_constraints=0,
            potential=lambda q: 0.0 * q[..., 0], grad_potential=lambda q: 0.0 * q,
            xi=lambda q: q[..., :0], constant_jacobian=np.zeros((1, 0)),
        )
        th = ThermostatConfig(1.0, 0.1)
        s = PhaseState.create(np.array([0.0]), p=np.array([0.7]))
        rng = rng_stream(3, 0, "ou")
        s1 = ou_midpoint_step(m, PenaltyConfig.fixed(1.0), th, IntegratorConfig(dt=0.1), s, rng)
        U = rng_stream(3, 0, "ou").standard_normal(1)
        a = 0.1 * 0.1 / 2
        expected = ((1 - a) * 0.7 + np.sqrt(0.1) * np.sqrt(2 * 0.1) * U[0]) / (1 + a)
        assert_allclose(s1.p, [expected], rtol=1e-14)

    @pytest.mark.parametrize("nu", [0.7, np.inf])
    def test_stationary_covariance(self, nu):
        # start from the constrained Gaussian; covariance must be preserved
        m = circle_model()
        pen = PenaltyConfig.fixed(nu)
        th = ThermostatConfig(2.0, np.array([[0.6, 0.2], [0.2, 0.3]]), 0.4)
        q = np.array([0.8, 0.6])
        rng = np.random.default_rng(1)
        B = 40000
        s = constrained_state(m, pen, th, np.tile(q, (B, 1)), rng, z=np.zeros((B, 1)) if np.isinf(nu) else None)
        cfg = IntegratorConfig(dt=0.5)
        for _ in range(5):
            s = ou_midpoint_step(m, pen, th, cfg, s, rng)
        P = np.concatenate([s.p, s.pz], axis=-1)
        emp = P.T @ P / B
        Me = np.diag([1.0, 4.0, 1.0])
        A = np.array([2 * q[0], 2 * q[1], -(0.0 if np.isinf(nu) else 1 / nu)])[:, None]
        G = A.T @ np.linalg.solve(Me, A)
        target = (Me - A @ np.linalg.solve(G, A.T)) / 2.0
        se = np.sqrt((target**2 + np.outer(np.diag(target), np.diag(target))) / B)
        assert np.all(np.abs(emp - target) <= 4 * se + 1e-12)

    def test_substep_refinement(self):
        m = double_well()
        th = ThermostatConfig(1.0, 50.0, 0.0)
        assert ou_stability_bound(m, th.bind(m), 0.1) > 1
        rng = np.random.default_rng(0)
        s = constrained_state(m, PenaltyConfig.fixed(1.0), th, np.zeros((4, 1)), rng)
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            ou_midpoint_step(m, PenaltyConfig.fixed(1.0), th, IntegratorConfig(dt=0.1), s, rng)
        assert any("substeps" in str(x.message) for x in w)


class TestCompositions:
    def test_langevin_without_friction_is_rattle(self):
        m = circle_model(radial_stiffness=1.0)
        pen, th = PenaltyConfig.fixed(2.0), ThermostatConfig(1.0, 0.0, 0.0)
        rng = np.random.default_rng(0)
        s = constrained_state(m, pen, th, np.array([[0.6, 0.8], [1.0, 0.0]]), rng)
        cfg = IntegratorConfig(dt=0.05)
        a, _ = langevin_immp_step(m, pen, th, cfg, s, rng)
        b, _ = rattle_step(m, pen, th, cfg, s)
        assert_array_equal(a.q, b.q)
        assert_array_equal(a.p, b.p)

    def test_acceptance_arithmetic(self):
        assert acceptance_probability(0.0, 2.0) == 1.0
        assert_allclose(acceptance_probability(np.log(2) / 3.0, 3.0), 0.5, rtol=1e-15)
        assert acceptance_probability(-5.0, 1.0) == 1.0

    def test_rejection_flips_both_momenta(self):
        m = double_well()
        pen, th = PenaltyConfig.fixed(1.0), ThermostatConfig(1.0, 0.0, 0.0)
        rng = np.random.default_rng(0)
        s = constrained_state(m, pen, th, np.full((2000, 1), 0.5), rng)
        s1, rep = hmc_step(m, pen, th, IntegratorConfig(dt=1.5), s, rng)
        rej = ~rep.accepted
        assert rej.any() and rep.accepted.any()
        assert_array_equal(s1.q[rej], s.q[rej])
        assert_array_equal(s1.p[rej], -s.p[rej])
        assert_array_equal(s1.pz[rej], -s.pz[rej])

    def test_newton_failure_is_rejection_under_hmc(self):
        m = circle_model()
        pen, th = PenaltyConfig.infinite(), ThermostatConfig(1.0, 0.0, 0.0)
        rng = np.random.default_rng(0)
        s = constrained_state(m, pen, th, np.array([[1.0, 0.0], [0.0, 1.0]]), rng)
        s.p[0] = [0.0, 400.0]
        s1, rep = hmc_step(m, pen, th, IntegratorConfig(dt=0.5, newton_max_iter=5), s, rng)
        assert not rep.accepted[0]
        assert_array_equal(s1.q[0], s.q[0])
        assert_array_equal(s1.p[0], -s.p[0])

    def test_same_noise_across_penalties(self):
        ch1, m = harmonic_chain(16, 0.1, gamma=0.1)
        draws = []
        for nubar in (0.1, 0.3):
            ch = ChainModel(N=16, nubar=nubar, interaction="harmonic", external=False)
            rng = rng_stream(42, 0, "noise")
            s = constrained_state(m, ch.penalty(), ch.thermostat(), np.full((2, 16), 0.5), rng_stream(1, 0, "init"))
            for _ in range(3):
                s, _ = langevin_immp_step(m, ch.penalty(), ch.thermostat(), IntegratorConfig(dt=0.01), s, rng)
            draws.append(rng.standard_normal(5))
        assert_array_equal(draws[0], draws[1])

    def test_verlet_period_error_second_order(self):
        m = SystemModel(
            dim=1, n_constraints=0,
            potential=lambda q: 0.5 * q[..., 0] ** 2, grad_potential=lambda q: q.copy(),
            xi=lambda q: q[..., :0], constant_jacobian=np.zeros((1, 0)),
        )
        th = ThermostatConfig(1.0)
        errs = []
        for n in (100, 200, 400):
            dt = 10.0 / n
            s = PhaseState.create(np.array([1.0]), p=np.array([0.0]))
            rng = np.random.default_rng(0)
            for _ in range(n):
                s, _ = verlet_baseline_step(m, th, IntegratorConfig(dt=dt), s, rng)
            errs.append(abs(s.q[0] - np.cos(10.0)))
        rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(np.abs(rates - 2) < 0.2)


def test_consistent_penalty():
    assert consistent_penalty(0.1, 2, 1) == pytest.approx(0.2)
    assert consistent_penalty(0.01, 1, 0.5) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        consistent_penalty(0.1, 1, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig(dt=0.0)
    with pytest.raises(ValueError):
        IntegratorConfig(dt=0.1, newton_tol=1e-8, tol_c=1e-9)


class TestTuning:
    def _setup(self, N=32):
        ch, m = harmonic_chain(N, 0.0, gamma=0.1)

        def init(pen, rng):
            c = ChainModel(N=N, nubar=pen.nu / N, interaction="harmonic", external=False)
            q, pn = chain_equilibrium_harmonic(c, 64, rng)
            return state_from_penalized_momentum(m, pen, q, pn)

        return ch, m, init

    def test_monotone_in_penalty_and_near_prediction(self):
        from immp.spectral import predicted_critical_dt

        N = 32
        ch, m, init = self._setup(N)
        dts = {}
        for nubar in (0.1, 0.3):
            grid = np.linspace(0.02, 1.2, 60)
            res = tune_penalty(m, ch.thermostat(), 0.5, nu_grid=[nubar * N], dt_grid=grid, init_state=init, n_steps=20)
            dts[nubar] = res.dt_max
            pred = predicted_critical_dt(N, nubar, 0.5)
            assert abs(res.dt_max - pred) <= 0.1 * pred
        res0 = tune_penalty(m, ch.thermostat(), 0.5, nu_grid=[0.0], dt_grid=np.linspace(0.002, 0.06, 30), init_state=init, n_steps=20)
        assert res0.dt_max < dts[0.1] < dts[0.3]

    def test_tight_target_gives_smallest_step(self):
        N = 16
        ch, m, init = self._setup(N)
        grid = [1e-4, 0.2, 0.5]
        res = tune_penalty(m, ch.thermostat(), 1 - 1e-9, nu_grid=[0.1 * N], dt_grid=grid, init_state=init, n_steps=3)
        assert res.dt_max == 1e-4
        assert res.rule(2e-4) == pytest.approx(2 * res.nu_max)
        with pytest.raises(TargetUnreachable):
            tune_penalty(m, ch.thermostat(), 0.999, nu_grid=[0.1 * N], dt_grid=[1.0], init_state=init, n_steps=3)
