"""Gram matrix, Fixman correctors and momentum projection.

The regularized Gram matrix ``G_reg = grad_xi^T M^-1 grad_xi + nu^-2 M_z^-1``
appears everywhere: its log-determinant is the Fixman potential, and it
is the matrix of the linear system for the momentum multiplier.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import GramSingular, MissingSecondDerivatives
from .linalg import small_cholesky_logdet, small_solve
from .model import (
    PenaltyConfig,
    SystemModel,
    ThermostatConfig,
    jac_t_vec,
    jac_vec,
    jt_a_j,
    mass_solve_columns,
)

COND_MAX = 1e12


@dataclass
class GramWorkspace:
    J: object
    MinvJ: object
    G: object
    G_reg: object
    logdet: object
    cond: object
    _lu: object = None

    def solve(self, rhs):
        """G_reg^{-1} rhs on the last axis."""
        if self._lu is not None:
            flat = rhs.reshape(-1, rhs.shape[-1])
            return self._lu.solve(flat.T).T.reshape(rhs.shape)
        return small_solve(self.G_reg, rhs)

    def dense_G_reg(self):
        return self.G_reg.toarray() if sp.issparse(self.G_reg) else self.G_reg


def _mz_inverse(model: SystemModel):
    return model.mass_z.solve(np.eye(model.n_constraints))


def _inv_nu2(pen: Optional[PenaltyConfig]):
    if pen is None or pen.is_infinite:
        return 0.0
    if pen.nu == 0:
        raise ValueError("the regularized Gram matrix is undefined for nu = 0")
    return pen.inv_nu**2


def gram(model: SystemModel, q, pen: Optional[PenaltyConfig] = None, cond_max=COND_MAX) -> GramWorkspace:
    """Factored Gram workspace at q (G_reg = G when pen is None or nu = inf)."""
    c = _inv_nu2(pen)
    if model.is_linear:
        key = ("gram", c)
        ws = model._cache.get(key)
        if ws is None:
            ws = _build_gram(model, model.jacobian(q), c, cond_max)
            model._cache[key] = ws
        return ws
    return _build_gram(model, model.jacobian(q), c, cond_max)


def _build_gram(model, J, c, cond_max):
    MinvJ = mass_solve_columns(model.mass, J)
    G = jt_a_j(J, MinvJ)
    if sp.issparse(G):
        if c:
            G_reg = (G + c * sp.csc_matrix(_mz_inverse(model))).tocsc()
        else:
            G_reg = G.tocsc()
        n = G.shape[0]
        if n <= 4096:
            w = np.linalg.eigvalsh(G_reg.toarray())
            if not w[0] > 0:
                raise GramSingular("Gram matrix is not positive definite", cond=np.inf)
            cond = w[-1] / w[0]
            if cond > cond_max:
                raise GramSingular(f"Gram condition number {cond:.3g} exceeds {cond_max:g}", cond=cond)
        else:
            cond = np.nan
        lu = spla.splu(G_reg)
        logdet = float(np.sum(np.log(np.abs(lu.U.diagonal()))))
        return GramWorkspace(J, MinvJ, G, G_reg, logdet, cond, lu)
    G_reg = G + c * _mz_inverse(model) if c else G
    try:
        logdet, cond = small_cholesky_logdet(G_reg, cond_max)
    except GramSingular as e:
        raise GramSingular(str(e), cond=e.cond) from None
    return GramWorkspace(J, MinvJ, G, G_reg, logdet, cond)


def fixman_potential(model: SystemModel, pen: PenaltyConfig, thermo: ThermostatConfig, q):
    """(1/2 beta) ln det(G + nu^-2 M_z^-1); ln det G for nu = inf; 0 for nu = 0."""
    batch = np.shape(q)[:-1]
    if model.n_constraints == 0 or pen.nu == 0:
        return np.zeros(batch) if batch else 0.0
    ws = gram(model, q, pen)
    val = ws.logdet / (2.0 * thermo.beta)
    if np.ndim(val) == 0 and batch:
        return np.full(batch, float(val))
    return val


def fixman_gradient(model: SystemModel, pen: PenaltyConfig, thermo: ThermostatConfig, q, ws=None):
    """Gradient of fixman_potential.

    Uses d/dq_i ln det A = tr(A^-1 dA/dq_i), which reduces to
    (1/beta) sum_a Hess(xi_a) w_a with W = M^-1 grad_xi A^-1.  The model
    supplies the contraction ``hess_xi_contract(q, W)``; otherwise a
    central-difference fallback is used if the model enables it.
    """
    q = np.asarray(q, dtype=float)
    if model.n_constraints == 0 or pen.nu == 0 or model.is_linear:
        return np.zeros_like(q)
    if model.hess_xi_contract is not None:
        if ws is None:
            ws = gram(model, q, pen)
        # W = M^-1 J A^-1, built row-wise by solving A on the last axis
        W = small_solve(ws.G_reg[..., None, :, :], ws.MinvJ)
        return model.hess_xi_contract(q, W) / thermo.beta
    if model.fd_fallback:
        return _fd_gradient(lambda x: fixman_potential(model, pen, thermo, x), q)
    raise MissingSecondDerivatives(
        f"model {model.name!r} has a nonlinear constraint but no Hessian contraction"
    )


def _fd_gradient(f, q, rel=1e-5):
    g = np.empty_like(q)
    for i in range(q.shape[-1]):
        h = rel * np.maximum(1.0, np.abs(q[..., i]))
        qp, qm = q.copy(), q.copy()
        qp[..., i] += h
        qm[..., i] -= h
        g[..., i] = (f(qp) - f(qm)) / (2 * h)
    return g


def project_momentum(model: SystemModel, pen: PenaltyConfig, q, p, pz, ws=None):
    """Project (p, p_z) onto grad_xi^T M^-1 p = nu^-1 M_z^-1 p_z.

    Returns (p', p_z', lam) with p' = p - grad_xi lam, p_z' = p_z + lam/nu.
    This is the orthogonal projection for the metric diag(M, M_z)^-1.
    """
    if model.n_constraints == 0:
        return p.copy(), pz.copy(), np.zeros(np.shape(p)[:-1] + (0,))
    if ws is None:
        ws = gram(model, q, pen)
    inv_nu = pen.inv_nu
    rhs = jac_t_vec(ws.MinvJ, p)
    if inv_nu:
        rhs = rhs - inv_nu * model.mass_z.solve(pz)
    lam = ws.solve(rhs)
    p_new = p - jac_vec(ws.J, lam)
    pz_new = pz + inv_nu * lam if inv_nu else pz.copy()
    return p_new, pz_new, lam


def momentum_residual(model: SystemModel, pen: PenaltyConfig, q, p, pz):
    """Hidden constraint residual grad_xi^T M^-1 p - nu^-1 M_z^-1 p_z."""
    r = jac_t_vec(model.jacobian(q), model.mass.solve(p))
    if pen.inv_nu:
        r = r - pen.inv_nu * model.mass_z.solve(pz)
    return r


def position_residual(model: SystemModel, pen: PenaltyConfig, q, z):
    """xi(q) - z/nu."""
    r = model.xi(q)
    if pen.inv_nu:
        r = r - pen.inv_nu * z
    return r
