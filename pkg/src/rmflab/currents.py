"""Eigenfunction currents, eigenvalue derivatives in the disorder and averaging errors.

Conventions of the discrete model: H[x, y] = -exp(-i theta_{x->y}) / h^2, so a
gauge change theta -> theta + phi(y) - phi(x) maps psi -> exp(i phi) psi.  The
edge current is j_e = (2/h) Im(conj(psi_x) exp(-i theta_e) psi_y); its node
divergence equals -2h Im(conj(psi_x) r_x) for the residual r = H psi - lambda psi.
For unit vectors, d lambda = <psi, dH psi> = -(1/h) sum_e d theta_e j_e.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .discretize import (DiscreteHamiltonian, Grid, LinkPhases, assemble_hamiltonian, edge_derivative_matrix,
                         integrate_gradient, link_phases, node_values_flat)
from .eigensolve import SpectralResult, lowest_eigenpairs
from .gauges import _gl, alpha_potential, node_divergence, total_alpha_potential
from .randfield import DisorderRealization, DisorderSpec, MagneticFieldView, ProfileFunction

# exponent budgets quoted alongside the measured norms (non-binding)
NORM_EXPONENTS = {"d_prime": 126, "g_prime": 60, "d_second": 100, "g_second": 46}


class DegenerateEigenvalueError(ValueError):
    def __init__(self, message: str, gap: float):
        super().__init__(message)
        self.gap = gap


@dataclass(frozen=True)
class EdgeCurrent:
    """j on horizontal (n-1, n) and vertical (n, n-1) edges, oriented like LinkPhases."""

    grid: Grid
    horizontal: np.ndarray
    vertical: np.ndarray
    eigenvalue: float
    residual: float

    def value(self, a, b) -> float:
        return LinkPhases(self.grid, self.horizontal, self.vertical).phase(a, b)

    def divergence(self) -> np.ndarray:
        """sum of outgoing currents per node, indexed [i1, i2]."""
        return node_divergence(LinkPhases(self.grid, self.horizontal, self.vertical))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.horizontal.ravel(), self.vertical.ravel()])

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.flat()), initial=0.0))

    def scaled(self, c: float) -> "EdgeCurrent":
        return EdgeCurrent(self.grid, c * self.horizontal, c * self.vertical, self.eigenvalue, self.residual)

    def to_csv(self, path) -> None:
        g = self.grid
        ph, qh = g.horizontal_edges()
        pv, qv = g.vertical_edges()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x0", "y0", "x1", "y1", "value"])
            for p, q, v in ((ph, qh, self.horizontal), (pv, qv, self.vertical)):
                for a, b, c in zip(p.reshape(-1, 2), q.reshape(-1, 2), v.ravel()):
                    w.writerow([repr(float(a[0])), repr(float(a[1])), repr(float(b[0])), repr(float(b[1])),
                                repr(float(c))])


def _node_grid(grid: Grid, psi: np.ndarray) -> np.ndarray:
    """Flat vector (index i2 * n + i1) to an array indexed [i1, i2]."""
    return np.asarray(psi).reshape(grid.n, grid.n).T


def current_from_vector(H: DiscreteHamiltonian, lam: float, psi: np.ndarray) -> EdgeCurrent:
    g = H.grid
    P = _node_grid(g, psi)
    th, tv = H.links.horizontal, H.links.vertical
    jh = (2.0 / g.h) * np.imag(np.conj(P[:-1, :]) * np.exp(-1j * th) * P[1:, :])
    jv = (2.0 / g.h) * np.imag(np.conj(P[:, :-1]) * np.exp(-1j * tv) * P[:, 1:])
    res = float(np.linalg.norm(H.matrix @ psi - lam * psi))
    return EdgeCurrent(g, jh, jv, float(lam), res)


def eigen_current(H: DiscreteHamiltonian, eigenpair, max_residual: float = 1e-10) -> EdgeCurrent:
    """Current of a normalized eigenpair (lambda, psi); refuses inaccurate pairs."""
    lam, psi = eigenpair
    psi = np.asarray(psi)
    psi = psi / np.linalg.norm(psi)
    cur = current_from_vector(H, lam, psi)
    if cur.residual > max_residual:
        raise ValueError(f"eigenpair residual {cur.residual:.3g} exceeds {max_residual:.3g}; "
                         "discrete conservation would not hold")
    return cur


def transport_eigenvector(H_from: DiscreteHamiltonian, H_to: DiscreteHamiltonian, psi: np.ndarray,
                          tol: float = 1e-9) -> np.ndarray:
    """exp(i phi) psi where theta_to - theta_from = d phi (checked to be a discrete gradient)."""
    diff = LinkPhases(H_to.grid, H_to.links.horizontal - H_from.links.horizontal,
                      H_to.links.vertical - H_from.links.vertical)
    phi, defect = integrate_gradient(diff)
    if defect > tol:
        raise ValueError(f"link phases differ by a non-gradient (defect {defect:.3g})")
    return np.exp(1j * node_values_flat(phi)) * psi


# ---------------------------------------------------------------------------
# Hamiltonian as a function of the disorder
# ---------------------------------------------------------------------------

class HamiltonianFamily:
    """H(omega) on a fixed grid in the gauge A^(tau) = A_det + mu sum omega alpha^(tau)."""

    def __init__(self, spec: DisorderSpec, realization: DisorderRealization, grid: Grid, tau: int = 1):
        self.spec = spec
        self.realization = realization
        self.grid = grid
        self.tau = tau
        self.view = MagneticFieldView(spec, realization)
        self.potential = total_alpha_potential(self.view, tau)
        links = link_phases(self.potential, grid)
        self.H = assemble_hamiltonian(grid, links, self.view.V)

    def with_tau(self, tau: int) -> "HamiltonianFamily":
        return HamiltonianFamily(self.spec, self.realization, self.grid, tau)

    def perturbed(self, k: int, z, omega: float) -> "HamiltonianFamily":
        return HamiltonianFamily(self.spec, self.realization.with_value(k, z, omega), self.grid, self.tau)

    def sites(self, k: int) -> list[tuple[float, float]]:
        lv = self.realization.levels[k]
        return [(float(a), float(b)) for a in lv.z1 for b in lv.z2]

    def dtheta(self, k: int, z, tau: int | None = None) -> LinkPhases:
        """d theta_e / d omega_z^(k) = mu int_e alpha_z^(k, tau) . ds (closed form)."""
        alpha = alpha_potential(self.spec.profile, k, z, self.tau if tau is None else tau)
        return link_phases(alpha, self.grid, "exact").scaled(self.spec.mu)

    def spectrum(self, m: int, tol: float = 1e-10) -> SpectralResult:
        return lowest_eigenpairs(self.H, m, tol)


def _check_gap(result: SpectralResult, index: int, fd_step: float, family: HamiltonianFamily | None = None):
    ev = result.eigenvalues
    if index + 1 >= ev.size:
        if family is None:
            raise ValueError("neighbouring eigenvalue missing; compute at least index + 2 pairs")
        ev = family.spectrum(index + 2).eigenvalues
    gaps = [ev[index + 1] - ev[index]]
    if index > 0:
        gaps.append(ev[index] - ev[index - 1])
    gap = float(min(gaps))
    if gap < 100.0 * fd_step:
        raise DegenerateEigenvalueError(f"eigenvalue {index} is near-degenerate (gap {gap:.3g})", gap)
    return gap


def hellmann_feynman(family: HamiltonianFamily, result: SpectralResult, index: int, k: int, z,
                     fd_step: float = 1e-4, return_pairing: bool = False):
    """d lambda_index / d omega_z^(k) = <psi, dH psi>; optionally also the current pairing."""
    _check_gap(result, index, fd_step, family)
    lam, psi = result.pair(index)
    dth = family.dtheta(k, z)
    dH = edge_derivative_matrix(family.grid, family.H.links, dth)
    val = float(np.real(np.vdot(psi, dH @ psi)))
    if not return_pairing:
        return val
    cur = current_from_vector(family.H, lam, psi)
    pairing = -float(np.dot(dth.flat(), cur.flat())) / family.grid.h
    return val, pairing


def finite_difference_derivative(family: HamiltonianFamily, index: int, k: int, z, step: float,
                                 m: int | None = None) -> float:
    """Central difference (lambda(w + s) - lambda(w - s)) / 2s by full reassembly.

    The eigenvalue difference is evaluated through the exact identity
    lambda_+ - lambda_- = <psi_+, (H_+ - H_-) psi_-> / <psi_+, psi_->, which avoids
    the cancellation of subtracting two eigenvalues of size ||H||.
    """
    m = index + 1 if m is None else m
    w0 = family.realization.value(k, z)
    Hp = family.perturbed(k, z, w0 + step).H
    Hm = family.perturbed(k, z, w0 - step).H
    psi_p = lowest_eigenpairs(Hp, m, 1e-9).eigenvectors[:, index]
    psi_m = lowest_eigenpairs(Hm, m, 1e-9).eigenvectors[:, index]
    overlap = np.vdot(psi_p, psi_m)
    if abs(overlap) < 0.5:
        raise DegenerateEigenvalueError("eigenvector changed branch inside the stencil", 0.0)
    diff = np.vdot(psi_p, (Hp.matrix - Hm.matrix) @ psi_m) / overlap
    return float(np.real(diff) / (2 * step))


def gradient_sum_squares(family: HamiltonianFamily, result: SpectralResult, index: int, k: int,
                         fd_step: float = 1e-4) -> dict:
    """sum_z (Y_z lambda)^2 over level-k sites and the two alpha-gauge pairing routes.

    The routes use P_tau(z) = -(1/h) sum_e int_e alpha_z^(tau) . ds j_e with the
    current of the eigenvector transported into the A^(tau) gauge.  Because the
    two alpha gauges differ by a discrete gradient and j is divergence free,
    mu^-2 sum (Y_z lambda)^2 = sum P_1^2 = sum P_2^2 = (sum P_1^2 + sum P_2^2) / 2.
    """
    _check_gap(result, index, fd_step, family)
    lam, psi = result.pair(index)
    mu = family.spec.mu
    fams = {family.tau: family, 3 - family.tau: family.with_tau(3 - family.tau)}
    currents = {}
    for tau, fam in fams.items():
        vec = psi if fam is family else transport_eigenvector(family.H, fam.H, psi)
        currents[tau] = current_from_vector(fam.H, lam, vec).flat()
    total = 0.0
    routes = {1: 0.0, 2: 0.0}
    per_site = []
    h = family.grid.h
    for z in family.sites(k):
        dth = family.dtheta(k, z)
        dH = edge_derivative_matrix(family.grid, family.H.links, dth)
        y = float(np.real(np.vdot(psi, dH @ psi)))
        total += y * y
        for tau in (1, 2):
            a = link_phases(alpha_potential(family.spec.profile, k, z, tau), family.grid, "exact").flat()
            p = -float(np.dot(a, currents[tau])) / h
            routes[tau] += p * p
        per_site.append((z, y))
    decomposition = 0.5 * routes[1] + 0.5 * routes[2]
    return {"sum": total, "alpha1": routes[1], "alpha2": routes[2],
            "decomposition": mu * mu * decomposition, "per_site": per_site}


# ---------------------------------------------------------------------------
# averaging boxes and the error term of the alpha decomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AveragingBox:
    profile: ProfileFunction
    k: int
    center: tuple = (0.0, 0.0)

    @property
    def eps(self) -> float:
        return 2.0 ** -self.k

    @property
    def N(self) -> int:
        return int(math.floor(self.profile.delta ** -2)) + 1

    @property
    def half_side(self) -> float:
        return self.N * self.eps

    @property
    def outer_half_side(self) -> float:
        """Half side of Q_z' = (N + 1/delta) eps."""
        return (self.N + 1.0 / self.profile.delta) * self.eps

    def M(self, x1, x2, tau: int):
        """L2-normalized indicator of Q_z along e_tau."""
        a = 1.0 / (2 * self.N * self.eps)
        inside = (np.abs(x1 - self.center[0]) <= self.half_side) & (np.abs(x2 - self.center[1]) <= self.half_side)
        val = np.where(inside, a, 0.0)
        return (val, np.zeros_like(val)) if tau == 1 else (np.zeros_like(val), val)

    def alpha_sum(self, x1, x2, tau: int):
        """(1 / (2 N eps^2)) sum_k of alpha differences approximating M (sign-adjusted to curl +beta)."""
        N, eps = self.N, self.eps
        z1, z2 = self.center
        total1 = np.zeros(np.broadcast(x1, x2).shape)
        total2 = np.zeros_like(total1)
        for kk in range(-N, N + 1):
            if tau == 1:
                hi = alpha_potential(self.profile, self.k, (z1 + kk * eps, z2 + N * eps), 1)
                lo = alpha_potential(self.profile, self.k, (z1 + kk * eps, z2 - N * eps), 1)
            else:
                hi = alpha_potential(self.profile, self.k, (z1 - N * eps, z2 + kk * eps), 2)
                lo = alpha_potential(self.profile, self.k, (z1 + N * eps, z2 + kk * eps), 2)
            a1, a2 = hi(x1, x2)
            b1, b2 = lo(x1, x2)
            total1 += a1 - b1
            total2 += a2 - b2
        c = 1.0 / (2 * N * eps * eps)
        return c * total1, c * total2

    def error(self, x1, x2, tau: int):
        m1, m2 = self.M(x1, x2, tau)
        s1, s2 = self.alpha_sum(x1, x2, tau)
        return m1 - s1, m2 - s2


def _factor_profiles(box: AveragingBox, t: np.ndarray):
    """Along-axis factors in units of eps: S(t) = sum_k g(t - k), D(t) = G(t + N) - G(t - N), indicator a(t)."""
    p, N = box.profile, box.N
    S = np.zeros_like(t)
    for kk in range(-N, N + 1):
        S += p.g(t - kk)
    D = p.G(t + N) - p.G(t - N)
    a = (np.abs(t) <= N).astype(float)
    return S, D, a


def _axis_nodes(box: AveragingBox, n_gauss: int = 7, max_piece: float = 0.5):
    """Composite Gauss nodes in units of eps over the outer box, split at all profile breakpoints."""
    R = box.outer_half_side / box.eps
    N = box.N
    bp = box.profile.breakpoints()
    ks = np.arange(-N - 1, N + 2)
    cuts = [np.arange(-math.ceil(R), math.ceil(R) + max_piece, max_piece), (ks[:, None] + bp[None, :]).ravel(),
            bp + N, bp - N, [-N, N, -R, R]]
    cuts = np.unique(np.concatenate([np.ravel(c) for c in cuts]))
    cuts = cuts[(cuts >= -R) & (cuts <= R)]
    xs, ws = _gl(n_gauss)
    a, b = cuts[:-1], cuts[1:]
    t = ((a + b) / 2)[:, None] + ((b - a) / 2)[:, None] * xs
    w = ((b - a) / 2)[:, None] * ws
    return t.ravel(), w.ravel()


def mollifier_error_mass(profile: ProfileFunction, k: int = 0, tau: int = 1, n_gauss: int = 7,
                         max_points: int = 40_000_000) -> float:
    """int |err_z^(tau)|^2 over Q_z' by tensor-product 2D quadrature (>= 8 points per eps).

    The error is err = M - alpha_sum; outside Q_z' it vanishes identically.
    """
    if profile.delta > 0.25:
        raise ValueError("delta must not exceed 0.25")
    box = AveragingBox(profile, k)
    t, w = _axis_nodes(box, n_gauss)
    if t.size ** 2 > max_points:
        raise MemoryError(f"{t.size}^2 quadrature points exceed the cap {max_points}")
    S, D, a = _factor_profiles(box, t)
    N = box.N
    # err (tau = 1) in units: (1 / (2 N eps)) [a(t1) a(t2) - S(t1) D(t2)]; eps^2 from the area element
    total = 0.0
    for s in range(0, t.size, 512):
        sl = slice(s, s + 512)
        E = a[sl, None] * a[None, :] - S[sl, None] * D[None, :]
        total += float(np.einsum("i,ij,j->", w[sl], E * E, w))
    mass = total / (4.0 * N * N)
    return mass  # identical for tau = 2 by the x1 <-> x2 symmetry


def mollifier_error_mass_separable(profile: ProfileFunction, k: int = 0) -> float:
    """Independent route: expand the square into products of 1D integrals."""
    box = AveragingBox(profile, k)
    t, w = _axis_nodes(box, 9, 0.25)
    S, D, a = _factor_profiles(box, t)
    ia = np.sum(w * a * a)
    return float((ia * ia - 2 * np.sum(w * a * S) * np.sum(w * a * D)
                  + np.sum(w * S * S) * np.sum(w * D * D)) / (4.0 * box.N ** 2))


def error_mass_bound(profile: ProfileFunction) -> float:
    """Theta * delta with Theta = 100 (plateau) or 20 + ||grad u0||^2 (mollifier)."""
    if profile.kind == "plateau":
        return 100.0 * profile.delta
    return (20.0 + profile.base_grad_sup ** 2) * profile.delta


# ---------------------------------------------------------------------------
# current norms
# ---------------------------------------------------------------------------

def current_norms(current: EdgeCurrent) -> dict:
    """||j||^2 and ||grad j||^2 in the continuum normalization int |psi|^2 = 1.

    A unit vector psi corresponds to psi / h, so j scales by 1 / h^2.  Each edge
    carries the area h^2; cell-centre components average the two parallel
    edges of a cell and are differenced between neighbouring cells.
    """
    h = current.grid.h
    jh = current.horizontal / h ** 2
    jv = current.vertical / h ** 2
    l2 = float(h * h * (np.sum(jh ** 2) + np.sum(jv ** 2)))
    c1 = 0.5 * (jh[:, :-1] + jh[:, 1:])
    c2 = 0.5 * (jv[:-1, :] + jv[1:, :])
    grad = 0.0
    for c in (c1, c2):
        grad += float(np.sum(np.diff(c, axis=0) ** 2) + np.sum(np.diff(c, axis=1) ** 2))
    return {"l2_sq": l2, "grad_l2_sq": grad, **NORM_EXPONENTS}
