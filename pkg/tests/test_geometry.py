import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from immp.chain import ChainModel, build_chain_system
from immp.errors import GramSingular, MissingSecondDerivatives
from immp.geometry import (
    fixman_gradient,
    fixman_potential,
    gram,
    momentum_residual,
    project_momentum,
)
from immp.model import PenaltyConfig, ThermostatConfig, kinetic_energy
from immp.systems import circle_model, double_well, random_quadric_model


def fd_grad(f, q, h=1e-6):
    g = np.zeros_like(q)
    for i in range(q.size):
        e = np.zeros_like(q)
        e[i] = h
        g[i] = (f(q + e) - f(q - e)) / (2 * h)
    return g


def test_chain_gram_is_second_difference():
    m = build_chain_system(ChainModel(N=6))
    G = gram(m, np.zeros(6)).G.toarray()
    expected = 2 * np.eye(5) - np.eye(5, k=1) - np.eye(5, k=-1)
    assert_allclose(G, expected)


def test_fixman_examples():
    th = ThermostatConfig(1.0)
    assert_allclose(fixman_potential(double_well(), PenaltyConfig.fixed(1.0), th, np.array([0.3])), 0.5 * np.log(2.0), rtol=1e-14)
    circ = circle_model(mass=(1.0, 1.0))
    q = np.array([0.6, 1.3])
    assert_allclose(
        fixman_potential(circ, PenaltyConfig.infinite(), th, q), 0.5 * np.log(4 * q @ q), rtol=1e-14
    )
    assert_allclose(
        fixman_gradient(circ, PenaltyConfig.infinite(), th, np.array([1.0, 0.0])), [1.0, 0.0], rtol=1e-14
    )


def test_linear_fixman_constant_and_flat():
    m = build_chain_system(ChainModel(N=10, nubar=0.2))
    pen, th = PenaltyConfig.fixed(2.0), ThermostatConfig(1.0)
    rng = np.random.default_rng(0)
    q1, q2 = rng.standard_normal(10), rng.standard_normal(10)
    assert fixman_potential(m, pen, th, q1) == fixman_potential(m, pen, th, q2)
    assert np.all(fixman_gradient(m, pen, th, q1) == 0.0)


def registered_models(rng):
    yield circle_model()
    yield circle_model(mass=(1.0, 1.0))
    for _ in range(3):
        yield random_quadric_model(rng, d=4, n=2)
    yield random_quadric_model(rng, d=3, n=1)


@pytest.mark.parametrize("nu", [0.5, 3.0, np.inf])
def test_fixman_gradient_matches_finite_differences(nu):
    rng = np.random.default_rng(11)
    th = ThermostatConfig(1.3)
    pen = PenaltyConfig.fixed(nu)
    for m in registered_models(rng):
        for _ in range(20):
            q = rng.standard_normal(m.dim) * 0.4 + 0.6
            try:
                gram(m, q, pen)
            except GramSingular:
                continue
            g = fixman_gradient(m, pen, th, q)
            g_fd = fd_grad(lambda x: fixman_potential(m, pen, th, x), q)
            assert np.linalg.norm(g - g_fd) <= 1e-6 * max(1.0, np.linalg.norm(g_fd))


def test_fixman_gradient_batched_matches_single():
    m = circle_model()
    rng = np.random.default_rng(1)
    q = rng.standard_normal((7, 2)) + 1.0
    pen, th = PenaltyConfig.fixed(2.0), ThermostatConfig(1.0)
    batched = fixman_gradient(m, pen, th, q)
    single = np.array([fixman_gradient(m, pen, th, qi) for qi in q])
    assert_allclose(batched, single, rtol=1e-13)


def test_missing_second_derivatives():
    m = circle_model().replace(hess_xi_contract=None)
    with pytest.raises(MissingSecondDerivatives):
        fixman_gradient(m, PenaltyConfig.fixed(1.0), ThermostatConfig(1.0), np.array([1.0, 0.2]))
    fd = m.replace(fd_fallback=True)
    q = np.array([1.0, 0.2])
    g = fixman_gradient(fd, PenaltyConfig.fixed(1.0), ThermostatConfig(1.0), q)
    ref = fixman_gradient(circle_model(), PenaltyConfig.fixed(1.0), ThermostatConfig(1.0), q)
    assert_allclose(g, ref, rtol=1e-7)


def test_gram_singular_at_origin():
    with pytest.raises(GramSingular):
        gram(circle_model(), np.zeros(2), PenaltyConfig.infinite())
    # finite nu regularizes the same point
    ws = gram(circle_model(), np.zeros(2), PenaltyConfig.fixed(1.0))
    assert_allclose(ws.G_reg, [[1.0]])
    rng = np.random.default_rng(0)
    m = random_quadric_model(rng, d=4, n=2)
    dup = m.replace(jac_xi=lambda q: np.repeat(m.jac_xi(q)[..., :1], 2, axis=-1))
    with pytest.raises(GramSingular):
        gram(dup, np.ones(4), PenaltyConfig.infinite())


def test_fixman_limits_in_nu():
    m = circle_model()
    th = ThermostatConfig(1.0)
    q = np.array([0.9, 0.5])
    inf = fixman_potential(m, PenaltyConfig.infinite(), th, q)
    gaps = [abs(fixman_potential(m, PenaltyConfig.fixed(nu), th, q) - inf) for nu in (0.5, 1, 2, 5, 10, 100, 1e4)]
    assert np.all(np.diff(gaps) < 0)
    assert gaps[-1] < 1e-8
    assert fixman_potential(m, PenaltyConfig.fixed(0.0), th, q) == 0.0


def test_projection_examples():
    m = double_well()
    p, pz, lam = project_momentum(m, PenaltyConfig.fixed(1.0), np.array([0.0]), np.array([1.0]), np.array([0.0]))
    assert_allclose(lam, [0.5])
    assert_allclose(p, [0.5])
    assert_allclose(pz, [0.5])
    p2, pz2, lam2 = project_momentum(m, PenaltyConfig.fixed(1.0), np.array([0.0]), p, pz)
    assert_allclose(lam2, [0.0], atol=1e-16)
    assert_allclose((p2, pz2), (p, pz))


def test_infinite_penalty_projection_is_tangent():
    m = circle_model()
    rng = np.random.default_rng(4)
    q = rng.standard_normal((10, 2))
    p = rng.standard_normal((10, 2))
    pz = rng.standard_normal((10, 1))
    p1, pz1, _ = project_momentum(m, PenaltyConfig.infinite(), q, p, pz)
    Minv_p = p1 / np.array([1.0, 4.0])
    assert_allclose(np.sum(Minv_p * q, axis=-1), 0.0, atol=1e-13)
    assert_allclose(pz1, pz)
    # the removed part is a multiple of grad xi: M^-1-orthogonal projection
    dp = p - p1
    assert_allclose(dp[:, 0] * q[:, 1] - dp[:, 1] * q[:, 0], 0.0, atol=1e-13)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), nu=st.sampled_from([0.2, 1.0, 7.0, np.inf]))
def test_projection_idempotent_and_contractive(seed, nu):
    rng = np.random.default_rng(seed)
    m = random_quadric_model(rng, d=5, n=2)
    pen = PenaltyConfig.fixed(nu)
    q = rng.standard_normal(5) * 0.3
    p = rng.standard_normal(5)
    pz = rng.standard_normal(2)
    p1, pz1, _ = project_momentum(m, pen, q, p, pz)
    assert np.max(np.abs(momentum_residual(m, pen, q, p1, pz1))) <= 1e-12 * max(1, np.abs(p).max())
    p2, pz2, _ = project_momentum(m, pen, q, p1, pz1)
    assert_allclose(p2, p1, atol=1e-12)
    assert_allclose(pz2, pz1, atol=1e-12)
    assert kinetic_energy(m, p1, pz1) <= kinetic_energy(m, p, pz) + 1e-12
