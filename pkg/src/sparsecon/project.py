"""Projection of predicted derivatives onto an affine constraint set.

``argmin ||xd - xd_pred||^2  s.t.  G xd + g = 0`` has the closed form
``xd = xd_pred - G^T (G G^T)^{-1} (G xd_pred + g)``.

The correction ``G^T (G G^T)^{-1} r`` is the minimum-norm solution of
``G d = r``; it is evaluated through a QR factorization of ``G^T`` so the
error grows with cond(G) rather than cond(G)^2, followed by one step of
iterative refinement when the result is not yet feasible to rounding level.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError

# cond(G) above this is treated as rank deficient and regularized
COND_LIMIT = 1e10
# a residual below this many ulps of its rounding scale, times cond(G), counts as zero
ROUNDING_ULPS = 64


@dataclass
class ProjectionResult:
    projected: np.ndarray
    residual_before: np.ndarray
    correction_norm: float
    degenerate: bool


def _rounding_bound(G, g, X, cond_G):
    """Residual size reachable by rounding alone, so feasible points stay fixed."""
    mag = np.einsum("scn,sn->sc", np.abs(G), np.abs(X)) + np.abs(g)
    return ROUNDING_ULPS * np.finfo(float).eps * cond_G[:, None] * mag


def _residual(G, g, X):
    return np.einsum("scn,sn->sc", G, X) + g


def _min_norm(G, r, Q, R, reg, lam):
    """Minimum-norm ``d`` with ``G d = r``; Tikhonov-regularized where ``reg``."""
    c = G.shape[1]
    d = np.zeros(G.shape[0:1] + G.shape[2:])
    ok = ~reg
    if ok.any():
        y = np.linalg.solve(np.swapaxes(R[ok], 1, 2), r[ok][..., None])
        d[ok] = (Q[ok] @ y)[..., 0]
    if reg.any():
        M = G[reg] @ np.swapaxes(G[reg], 1, 2) + lam[reg][:, None, None] * np.eye(c)
        d[reg] = np.einsum("scn,sc->sn", G[reg], np.linalg.solve(M, r[reg][..., None])[..., 0])
    return d


def _project(G, g, X):
    """Core of :func:`project_batch`: ``(projected, residual_before, degenerate)``."""
    S, c, n = G.shape
    r = _residual(G, g, X)
    zero = ~np.any(G.reshape(S, -1), axis=1)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(np.where(zero[:, None, None], np.eye(c, n), G))
    reg = ~zero & ~(cond <= COND_LIMIT)
    lam = 1e-8 * np.einsum("scn,scn->s", G, G) / c
    Q, R = np.linalg.qr(np.swapaxes(np.where(zero[:, None, None], np.eye(c, n), G), 1, 2))
    active = ~zero & (reg | ~np.all(np.abs(r) <= _rounding_bound(G, g, X, cond), axis=1))
    P = X.copy()
    if active.any():
        a = active
        P[a] = X[a] - _min_norm(G[a], r[a], Q[a], R[a], reg[a], lam[a])
        # one refinement step where the result is not feasible to rounding level
        r2 = _residual(G[a], g[a], P[a])
        refine = ~reg[a] & ~np.all(np.abs(r2) <= _rounding_bound(G[a], g[a], P[a], cond[a]), axis=1)
        if refine.any():
            idx = np.flatnonzero(a)[refine]
            P[idx] = P[idx] - _min_norm(G[idx], r2[refine], Q[idx], R[idx], reg[idx], lam[idx])
    return P, r, zero | reg


def project(G, g, xdot_pred):
    G = np.atleast_2d(np.asarray(G, dtype=float))
    g = np.atleast_1d(np.asarray(g, dtype=float))
    xd = np.asarray(xdot_pred, dtype=float)
    c, n = G.shape
    if G.size == 0:
        return ProjectionResult(xd.copy(), np.zeros(0), 0.0, False)
    if c > n or xd.shape != (n,) or g.shape != (c,):
        raise ContractError(f"shapes G {G.shape}, g {g.shape}, xdot {xd.shape} are incompatible (need c <= n)")
    P, r, flags = _project(G[None], g[None], xd[None])
    return ProjectionResult(P[0], r[0], float(np.linalg.norm(xd - P[0])), bool(flags[0]))


def project_batch(G, g, xdot_pred):
    """Vectorized :func:`project` over a leading batch axis.

    Returns ``(projected, degenerate_flags)``.
    """
    G = np.asarray(G, dtype=float)
    g = np.asarray(g, dtype=float)
    X = np.asarray(xdot_pred, dtype=float)
    S, c, n = G.shape
    if c == 0:
        return X.copy(), np.zeros(S, bool)
    if c > n:
        raise ContractError("more constraints than state dimensions")
    P, _, flags = _project(G, g, X)
    return P, flags


def predict_projected(dyn, mm, x, u):
    """Learned dynamics at ``(x, u)`` projected onto the learned constraint."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    single = x.ndim == 1
    X, U = np.atleast_2d(x), np.atleast_2d(u)
    pred = dyn.predict(np.hstack([X, U]))
    Gam = mm.gamma(X)
    out, _ = project_batch(Gam[..., :-1], Gam[..., -1], pred)
    return out[0] if single else out
