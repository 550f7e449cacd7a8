"""Thin SVD by one-sided Jacobi rotations, and rank-k truncation.

The Jacobi sweep uses a round-robin (tournament) pairing of columns: each
round rotates n/2 disjoint column pairs at once, so a round is a handful of
vectorized array operations instead of n/2 Python-level rotations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

TOL = 1e-12
MAX_SWEEPS = 60


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # m x p, orthonormal columns
    sigma: np.ndarray  # p, non-increasing
    v: np.ndarray  # n x p, orthonormal columns

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings covering every unordered pair of ``range(n)`` exactly once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p >= 0 and q >= 0:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi(a: np.ndarray, tol: float, max_sweeps: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalize the columns of ``a``. Returns (A V, V)."""
    # Work on transposes so each column is a contiguous row.
    x = np.array(a.T, order="C")
    n = x.shape[0]
    vt = np.eye(n)
    if n == 1:
        return x.T, vt.T
    rounds = _round_robin(n)
    off = np.inf
    eps = np.finfo(float).eps
    for _ in range(max_sweeps):
        off = 0.0
        # Columns at rounding-noise level have meaningless cosines; treat them as done.
        tiny = (n * eps) ** 2 * float(np.einsum("ij,ij->i", x, x).max())
        for p, q in rounds:
            xp, xq = x[p], x[q]
            alpha = np.einsum("ij,ij->i", xp, xp)
            beta = np.einsum("ij,ij->i", xq, xq)
            gamma = np.einsum("ij,ij->i", xp, xq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where((scale > 0) & (np.minimum(alpha, beta) > tiny),
                                 np.abs(gamma) / scale, 0.0)
            off = max(off, float(ratio.max(initial=0.0)))
            hot = ratio > tol
            if not hot.any():
                continue
            if not hot.all():
                p, q = p[hot], q[hot]
                xp, xq = xp[hot], xq[hot]
                alpha, beta, gamma = alpha[hot], beta[hot], gamma[hot]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            x[p], x[q] = c * xp - s * xq, s * xp + c * xq
            vp, vq = vt[p], vt[q]
            vt[p], vt[q] = c * vp - s * vq, s * vp + c * vq
        if off <= tol:
            return x.T, vt.T
    raise NumericError(
        f"Jacobi SVD did not converge in {max_sweeps} sweeps; "
        f"residual off-diagonal cosine {off:.3e} > {tol:.1e}"
    )


def _householder_qr(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR of a tall matrix (m >= n): ``a == q @ r`` with q m x n."""
    m, n = a.shape
    r = a.copy()
    vs = []
    for k in range(n):
        x = r[k:, k]
        nrm = np.linalg.norm(x)
        v = x.copy()
        v[0] += nrm if x[0] >= 0 else -nrm
        vnorm2 = v @ v
        if vnorm2 == 0.0:
            vs.append(None)
            continue
        r[k:, k:] -= np.outer(v, (2.0 / vnorm2) * (v @ r[k:, k:]))
        vs.append((v, vnorm2))
    q = np.eye(m, n)
    for k in range(n - 1, -1, -1):
        if vs[k] is None:
            continue
        v, vnorm2 = vs[k]
        q[k:, :] -= np.outer(v, (2.0 / vnorm2) * (v @ q[k:, :]))
    return q, np.triu(r[:n])


def _complete_columns(u: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Fill columns ``missing`` of ``u`` with an orthonormal completion."""
    u = u.copy()
    keep = np.setdiff1d(np.arange(u.shape[1]), missing)
    basis = [u[:, j] for j in keep]
    fill = iter(missing)
    target = next(fill, None)
    for e in np.eye(u.shape[0]):
        if target is None:
            break
        w = e.copy()
        for _ in range(2):
            for b in basis:
                w -= (b @ w) * b
        nrm = np.linalg.norm(w)
        if nrm > 0.5:
            w /= nrm
            u[:, target] = w
            basis.append(w)
            target = next(fill, None)
    return u


def leading_basis(s: SvdResult, k: int) -> np.ndarray:
    """First ``k`` left singular vectors, completed to ``k`` orthonormal columns.

    When ``k`` exceeds ``min(m, n)`` the extra columns span part of the
    orthogonal complement of ``u`` (deterministic Gram-Schmidt on the
    identity basis).
    """
    m, p = s.u.shape
    if not 1 <= k <= m:
        raise ValueError(f"basis size must be in [1, {m}], got {k}")
    if k <= p:
        return np.ascontiguousarray(s.u[:, :k])
    u = np.zeros((m, k))
    u[:, :p] = s.u
    return _complete_columns(u, np.arange(p, k))


def svd(m: np.ndarray, tol: float = TOL, max_sweeps: int = MAX_SWEEPS) -> SvdResult:
    """Thin SVD of a 2-D array: ``m == u @ diag(sigma) @ v.T``.

    Singular values are sorted non-increasing (stable for ties). Each column
    of ``u`` has its largest-magnitude entry made non-negative.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"svd expects a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("svd input contains non-finite values")
    # Power-of-two rescale to order one: exact, and keeps the Gram products in
    # the sweeps clear of under/overflow.
    peak = float(np.abs(m).max(initial=0.0))
    peak = float(np.ldexp(1.0, int(np.frexp(peak)[1]))) if peak > 0.0 else 1.0
    transposed = m.shape[0] < m.shape[1]
    a = m.T if transposed else m
    a = a / peak
    # QR first so the sweeps run on an n x n triangle instead of m x n.
    q, r = _householder_qr(a) if a.shape[0] > a.shape[1] else (None, a)
    av, v = _jacobi(r, tol, max_sweeps)
    sigma = np.linalg.norm(av, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, av, v = sigma[order], av[:, order], v[:, order]

    # Columns with negligible norm carry no direction; replace by a completion.
    smax = sigma[0] if sigma.size else 0.0
    negligible = sigma <= max(a.shape) * np.finfo(float).eps * smax
    if smax == 0.0:
        negligible[:] = True
    u = np.zeros_like(av)
    live = ~negligible
    u[:, live] = av[:, live] / sigma[live]
    if negligible.any():
        u = _complete_columns(u, np.flatnonzero(negligible))

    if q is not None:
        u = q @ u
    if transposed:
        u, v = v, u
    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0
    return SvdResult(u=u, sigma=sigma * peak, v=v)


def truncate(s: SvdResult, k: int) -> SvdResult:
    """Keep the leading ``k`` singular triplets (best rank-k approximation)."""
    if not 1 <= k <= s.rank:
        raise ValueError(f"truncation rank {k} outside [1, {s.rank}]")
    return SvdResult(u=s.u[:, :k], sigma=s.sigma[:k], v=s.v[:, :k])
