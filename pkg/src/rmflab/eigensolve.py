"""Eigenpairs, inertia-based spectral counting, smooth cutoffs and resolvent block norms."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretize import DiscreteHamiltonian

log = logging.getLogger(__name__)

DENSE_LIMIT = 4096
SINGULAR_PIVOT = 1e-14
SUSPECT_PIVOT = 1e-6
COLLISION_WIDTH = 1e-12
SHIFT_PERTURBATION = 1e-10
GAP_FACTOR = 10.0


class ConvergenceError(RuntimeError):
    """Iteration cap reached; ``result`` holds the best pairs found."""

    def __init__(self, message: str, result: "SpectralResult"):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class SpectralResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray
    method: str
    iterations: int = 0

    def __len__(self) -> int:
        return self.eigenvalues.size

    def pair(self, i: int) -> tuple[float, np.ndarray]:
        return float(self.eigenvalues[i]), self.eigenvectors[:, i]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "value", "residual"])
            for i, (v, r) in enumerate(zip(self.eigenvalues, self.residuals)):
                w.writerow([i, repr(float(v)), repr(float(r))])


def _as_matrix(H) -> sp.csr_matrix:
    M = H.matrix if isinstance(H, DiscreteHamiltonian) else H
    return sp.csr_matrix(M)


def _residuals(M, vals, vecs) -> np.ndarray:
    return np.linalg.norm(M @ vecs - vecs * vals[None, :], axis=0)


def gershgorin_floor(H) -> float:
    M = _as_matrix(H)
    d = M.diagonal().real
    off = np.asarray(abs(M).sum(axis=1)).ravel() - np.abs(d)
    return float(np.min(d - off))


def lowest_eigenpairs(H, m: int = 1, tol: float = 1e-8, seed: int = 0, method: str = "auto",
                      max_restarts: int = 300) -> SpectralResult:
    """The m lowest eigenpairs with post hoc residual ||Hv - lv|| <= tol.

    Dense Hermitian solve up to DENSE_LIMIT rows, otherwise thick-restart
    Lanczos with full reorthogonalization applied to (H - sigma)^-1, sigma
    below the Gershgorin floor, from a seeded start vector.
    """
    M = _as_matrix(H)
    n = M.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"m={m} must lie in [1, {n}]")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if method == "auto":
        method = "dense" if n <= DENSE_LIMIT else "lanczos"
    if method == "dense":
        vals, vecs = sla.eigh(M.toarray(), subset_by_index=[0, m - 1], driver="evx")
        res = SpectralResult(vals, vecs, _residuals(M, vals, vecs), "dense")
        if np.any(res.residuals > tol):
            raise ConvergenceError(f"dense residual {res.residuals.max():.3g} exceeds tol {tol:.3g}", res)
        return res
    if method != "lanczos":
        raise ValueError(f"unknown method {method!r}")
    return _lanczos_lowest(M, m, tol, seed, max_restarts)


def _orthogonalize(V: np.ndarray, k: int, w: np.ndarray) -> np.ndarray:
    """Two passes of classical Gram-Schmidt against the first k columns."""
    for _ in range(2):
        if k:
            w = w - V[:, :k] @ (V[:, :k].conj().T @ w)
    return w


def _lanczos_lowest(M, m, tol, seed, max_restarts, stage_len: int = 4) -> SpectralResult:
    """Shift-and-invert thick-restart Lanczos with staged shift refinement.

    The first stage shifts below the Gershgorin floor.  Each later stage moves
    the shift just below the current lowest Ritz value, which separates
    near-degenerate clusters from their neighbours.
    """
    n = M.shape[0]
    ncv = min(n, max(2 * m + 20, m + 40))
    keep = min(ncv - 1, m + (ncv - m) // 2)
    rng = np.random.default_rng(seed)
    eye = sp.identity(n, format="csr")
    sigma = gershgorin_floor(M) - 1.0
    start = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    best = None
    it = 0
    while it < max_restarts:
        op = spla.splu(sp.csc_matrix(M - sigma * eye)).solve
        V = np.zeros((n, ncv), dtype=complex)
        W = np.zeros((n, ncv), dtype=complex)
        V[:, 0] = start / np.linalg.norm(start)
        k = 0
        for _ in range(stage_len):
            it += 1
            for j in range(k, ncv):
                W[:, j] = op(V[:, j])
                if j + 1 < ncv:
                    w = _orthogonalize(V, j + 1, W[:, j])
                    nrm = np.linalg.norm(w)
                    if nrm < 1e-12 * np.linalg.norm(W[:, j]):
                        w = _orthogonalize(V, j + 1, rng.standard_normal(n) + 1j * rng.standard_normal(n))
                        nrm = np.linalg.norm(w)
                    V[:, j + 1] = w / nrm
            T = V.conj().T @ W
            theta, S = np.linalg.eigh(0.5 * (T + T.conj().T))
            order = np.argsort(-np.abs(theta))
            S = S[:, order]
            Y = V @ S[:, :m]
            Y /= np.linalg.norm(Y, axis=0)
            lam = np.real(np.einsum("ij,ij->j", Y.conj(), M @ Y))
            idx = np.argsort(lam)
            lam, Y = lam[idx], Y[:, idx]
            res = _residuals(M, lam, Y)
            if best is None or res.max() < best.residuals.max():
                best = SpectralResult(lam, Y, res, "lanczos", it)
            if np.all(res <= tol):
                return SpectralResult(lam, Y, res, "lanczos", it)
            if it >= max_restarts:
                break
            # thick restart: keep leading Ritz vectors, continue from the residual direction
            Yk, Wk = V @ S[:, :keep], W @ S[:, :keep]
            r = _orthogonalize(Yk, keep, W[:, ncv - 1] - V @ (V.conj().T @ W[:, ncv - 1]))
            nr = np.linalg.norm(r)
            if nr < 1e-14:
                r = _orthogonalize(Yk, keep, rng.standard_normal(n) + 1j * rng.standard_normal(n))
                nr = np.linalg.norm(r)
            V[:, :keep], W[:, :keep] = Yk, Wk
            V[:, keep] = r / nr
            k = keep
        gap = max(GAP_FACTOR * float(best.residuals.max()), 1e-9 * (1.0 + abs(best.eigenvalues[0])))
        sigma = max(sigma, best.eigenvalues[0] - gap)
        start = best.eigenvectors @ np.ones(m) + 1e-3 * (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / math.sqrt(n)
    raise ConvergenceError(f"Lanczos residual {best.residuals.max():.3g} above tol after {max_restarts} restarts",
                           best)


# ---------------------------------------------------------------------------
# inertia counting
# ---------------------------------------------------------------------------

def _ldl_inertia_and_solver(S: np.ndarray):
    """Negative count, smallest |pivot eigenvalue| and a solve closure for Hermitian S."""
    S = 0.5 * (S + S.conj().T)
    lu, d, perm = sla.ldl(S, hermitian=True)
    n = S.shape[0]
    neg = 0
    min_abs = np.inf
    i = 0
    off = np.diag(d, -1)
    while i < n:
        if i + 1 < n and off[i] != 0:
            ev = np.linalg.eigvalsh(d[i:i + 2, i:i + 2])
            i += 2
        else:
            ev = np.array([d[i, i].real])
            i += 1
        neg += int(np.sum(ev < 0))
        min_abs = min(min_abs, float(np.min(np.abs(ev))))
    Lp = lu[perm]
    ab = np.zeros((3, n), dtype=d.dtype)
    ab[0, 1:] = np.diag(d, 1)
    ab[1] = np.diag(d)
    ab[2, :-1] = np.diag(d, -1)

    def solve(y):
        u = sla.solve_triangular(Lp, y[perm], lower=True, unit_diagonal=True)
        w = sla.solve_banded((1, 1), ab, u)
        v = sla.solve_triangular(Lp.conj().T, w, lower=False, unit_diagonal=True)
        x = np.empty_like(v)
        x[perm] = v
        return x

    return neg, min_abs, solve


def _grid_blocks(H):
    """Split H into row blocks (grid rows): diagonal blocks and diagonal couplings."""
    M = _as_matrix(H)
    n_tot = M.shape[0]
    n = int(round(math.sqrt(n_tot)))
    if n * n != n_tot:
        raise ValueError("block inertia needs a square grid Hamiltonian")
    D = [M[i * n:(i + 1) * n, i * n:(i + 1) * n].toarray() for i in range(n)]
    C = [M[(i - 1) * n:i * n, i * n:(i + 1) * n].diagonal() for i in range(1, n)]
    return D, C, n


def _block_inertia(D, C, n, s) -> tuple[int, float]:
    """Negative count of H - s by block LDL over grid rows, and the smallest pivot modulus."""
    count, min_abs, prev = 0, np.inf, None
    for i in range(n):
        S = D[i] - s * np.eye(n)
        if prev is not None:
            c = C[i - 1]
            S = S - (c.conj()[:, None] * prev(np.diag(c)))
        neg, m, prev = _ldl_inertia_and_solver(S)
        count += neg
        min_abs = min(min_abs, m)
    return count, min_abs


def negative_count(H, shift: float, method: str = "auto", _blocks=None, direction: int = 1) -> tuple[int, float]:
    """#{eigenvalues < shift} by Sylvester inertia; returns (count, shift actually used).

    A shift within COLLISION_WIDTH of an eigenvalue is moved by
    SHIFT_PERTURBATION in ``direction`` (+1 up, -1 down).  Pivot size alone does not reveal such a collision
    (pivots scale with the eigenvector weight on the last block), so a small
    pivot triggers a bracketing count at shift -/+ COLLISION_WIDTH.
    """
    M = _as_matrix(H)
    if method == "auto":
        method = "block" if M.shape[0] > 400 else "dense"
    if method == "dense":
        ev = np.linalg.eigvalsh(M.toarray())
        s = shift
        while np.any(np.abs(ev - s) <= COLLISION_WIDTH):
            s += direction * SHIFT_PERTURBATION
        if s != shift:
            log.info("count shift %.17g perturbed to %.17g", shift, s)
        return int(np.sum(ev < s)), s
    D, C, n = _blocks if _blocks is not None else _grid_blocks(M)
    scale = max(1.0, float(np.max(np.abs(M.diagonal()))))
    s = shift
    for _attempt in range(8):
        count, min_abs = _block_inertia(D, C, n, s)
        collided = min_abs <= SINGULAR_PIVOT * scale
        if not collided and min_abs <= SUSPECT_PIVOT * scale:
            below, _ = _block_inertia(D, C, n, s - COLLISION_WIDTH)
            above, _ = _block_inertia(D, C, n, s + COLLISION_WIDTH)
            collided = below != above
        if not collided:
            if s != shift:
                log.info("inertia shift %.17g perturbed to %.17g", shift, s)
            return count, s
        s = s + direction * SHIFT_PERTURBATION
    raise np.linalg.LinAlgError(f"singular factorization persists near shift {shift}")


def count_in_window(H, E: float, eta: float, method: str = "auto") -> int:
    """Number of eigenvalues in the closed window [E - eta/2, E + eta/2]."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    M = _as_matrix(H)
    if method == "auto":
        method = "block" if M.shape[0] > 400 else "dense"
    lo, hi = E - eta / 2, E + eta / 2
    if method == "dense":
        ev = np.linalg.eigvalsh(M.toarray())
        return int(np.sum((ev >= lo) & (ev <= hi)))
    blocks = _grid_blocks(M)
    upper, _ = negative_count(M, hi, "block", blocks)
    lower, _ = negative_count(M, lo, "block", blocks, direction=-1)
    return upper - lower


def count_below(H, K: float, method: str = "auto") -> int:
    """#{eigenvalues <= K} (up to the tie perturbation)."""
    return negative_count(H, K, method)[0]


# ---------------------------------------------------------------------------
# smooth cutoff
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CutoffSpec:
    E: float
    eta: float
    s: float

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("cutoff scale s must be positive")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")

    @classmethod
    def from_constants(cls, E: float, eta: float, b0: float, K1: float) -> "CutoffSpec":
        return cls(E, eta, 10.0 * K1 * b0)


def t_map(u, s: float):
    u = np.asarray(u, dtype=float)
    return u * s ** 3 / (s + u) ** 3


def smooth_cutoff(u, spec: CutoffSpec) -> dict:
    """t(u), F(t(u)) and G(t(u)) with F' = chi of the window around t(E), G' = F."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("u must be non-negative")
    t = t_map(u, spec.s)
    c = float(t_map(spec.E, spec.s))
    a, b = c - spec.eta / 2, c + spec.eta / 2
    F = np.clip(t - a, 0.0, spec.eta)
    G = np.where(t < a, 0.0, np.where(t <= b, 0.5 * (t - a) ** 2, 0.5 * spec.eta ** 2 + spec.eta * (t - b)))
    return {"t": t, "F": F, "G": G}


# ---------------------------------------------------------------------------
# resolvent blocks
# ---------------------------------------------------------------------------

def resolvent_block_norm(H, E: float, region_in, region_out, tol: float = 1e-6, seed: int = 0,
                         max_iter: int = 20000) -> float:
    """||chi_in (H - E)^-1 chi_out|| by power iteration on the block times its adjoint."""
    M = _as_matrix(H)
    n = M.shape[0]
    pin = np.asarray(region_in, dtype=bool)
    pout = np.asarray(region_out, dtype=bool)
    if pin.shape != (n,) or pout.shape != (n,):
        raise ValueError("region masks must match the matrix dimension")
    if count_in_window(M, E, 2e-10) > 0:
        raise ValueError(f"E={E} lies within 1e-10 of an eigenvalue")
    try:
        lu = spla.splu(sp.csc_matrix(M - E * sp.identity(n, format="csr")))
    except RuntimeError as exc:
        raise np.linalg.LinAlgError(f"resolvent factorization failed: {exc}") from exc
    if not pin.any() or not pout.any():
        return 0.0
    rng = np.random.default_rng(seed)
    x = np.where(pout, rng.standard_normal(n) + 1j * rng.standard_normal(n), 0)
    x /= np.linalg.norm(x)
    prev, step = 0.0, np.inf
    for _ in range(max_iter):
        y = lu.solve(x) * pin
        z = lu.solve(y) * pout  # R Hermitian for real E
        rq = float(np.real(np.vdot(x, z)))
        nz = np.linalg.norm(z)
        if nz == 0:
            return 0.0
        x = z / nz
        new_step = abs(rq - prev)
        # geometric tail estimate of the remaining Rayleigh-quotient error
        q = min(new_step / step, 0.999) if step > 0 and np.isfinite(step) else 0.999
        if new_step * q / (1 - q) <= tol * abs(rq):
            return math.sqrt(rq)
        prev, step = rq, new_step
    log.warning("power iteration stopped at the iteration cap")
    return math.sqrt(prev)
