"""Explicit vector potentials for a given field and the shift gauge phase.

Every potential is an immutable callable ``A(x1, x2) -> (A1, A2)``.  Most also
provide ``line_integrals(p, q)`` returning int_p^q A . ds in closed form for
axis-parallel segments, which keeps discrete gauge transformations exact.

Orientation: curl A = d1 A2 - d2 A1.  With this convention the column
potentials are alpha^(1) = -(int_{-inf}^{x2} beta) e1 and
alpha^(2) = +(int_{-inf}^{x1} beta) e2, both with curl beta.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import fft
from scipy.interpolate import RegularGridInterpolator

from .discretize import Grid, LinkPhases, gauss3_line_integrals, link_phases
from .randfield import MagneticFieldView, ProfileFunction

_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gl(m: int):
    if m not in _GL_CACHE:
        _GL_CACHE[m] = np.polynomial.legendre.leggauss(m)
    return _GL_CACHE[m]


class VectorPotential:
    """Evaluable potential with a gauge tag."""

    def __init__(self, kind: str, fn, line_integrals=None, source=None, **meta):
        self.kind = kind
        self._fn = fn
        self._li = line_integrals
        self.source = source
        self.meta = meta

    def __call__(self, x1, x2):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
        a1, a2 = self._fn(x1, x2)
        return np.broadcast_to(a1, x1.shape) * 1.0, np.broadcast_to(a2, x1.shape) * 1.0

    @property
    def line_integrals(self):
        if self._li is None:
            return None
        return self._checked_li

    def _checked_li(self, p, q):
        p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
        horiz = np.abs(p[..., 1] - q[..., 1]) < 1e-14
        vert = np.abs(p[..., 0] - q[..., 0]) < 1e-14
        if np.all(horiz | vert):
            return self._li(p, q, horiz)
        out = gauss3_line_integrals(self, p, q)
        ax = horiz | vert
        if np.any(ax):
            out[ax] = self._li(p[ax], q[ax], horiz[ax])
        return out

    def __add__(self, other: "VectorPotential") -> "VectorPotential":
        def fn(x1, x2):
            a1, a2 = self(x1, x2)
            b1, b2 = other(x1, x2)
            return a1 + b1, a2 + b2

        li = None
        if self._li is not None and other._li is not None:
            def li(p, q, horiz):
                return self._li(p, q, horiz) + other._li(p, q, horiz)
        return VectorPotential(f"{self.kind}+{other.kind}", fn, li, self.source)

    def curl_fd(self, x1, x2, h_fd: float = 1e-4):
        """Centered finite-difference curl d1 A2 - d2 A1."""
        _, a2p = self(x1 + h_fd, x2)
        _, a2m = self(x1 - h_fd, x2)
        a1p, _ = self(x1, x2 + h_fd)
        a1m, _ = self(x1, x2 - h_fd)
        return (a2p - a2m - a1p + a1m) / (2 * h_fd)


# ---------------------------------------------------------------------------
# elementary potentials
# ---------------------------------------------------------------------------

def symmetric_gauge(b: float, center=(0.0, 0.0)) -> VectorPotential:
    c1, c2 = center

    def fn(x1, x2):
        return -0.5 * b * (x2 - c2), 0.5 * b * (x1 - c1)

    def li(p, q, horiz):
        # exact for linear potentials
        mid = 0.5 * (p + q)
        a1, a2 = fn(mid[..., 0], mid[..., 1])
        return a1 * (q[..., 0] - p[..., 0]) + a2 * (q[..., 1] - p[..., 1])

    return VectorPotential("Symmetric", fn, li, b=b, center=center)


def landau_column_gauge(b: float, y1: float = 0.0) -> VectorPotential:
    """A = (0, b (x1 - y1)) for a constant field."""
    def fn(x1, x2):
        return np.zeros_like(x1), b * (x1 - y1)

    def li(p, q, horiz):
        return np.where(horiz, 0.0, b * (p[..., 0] - y1) * (q[..., 1] - p[..., 1]))

    return VectorPotential("ColumnGauge", fn, li, b=b, y=(y1, 0.0))


def alpha_potential(profile: ProfileFunction, k: int, z, tau: int) -> VectorPotential:
    """Column potential alpha_z^(tau) of the single bump u(2^k (x - z))."""
    if tau not in (1, 2):
        raise ValueError("tau must be 1 or 2")
    eps = 2.0 ** -k
    z1, z2 = float(z[0]), float(z[1])
    g, G = profile.g, profile.G

    def fn(x1, x2):
        y1, y2 = (x1 - z1) / eps, (x2 - z2) / eps
        if tau == 1:
            return -eps * g(y1) * G(y2), np.zeros_like(y1)
        return np.zeros_like(y1), eps * G(y1) * g(y2)

    def li(p, q, horiz):
        if tau == 1:
            val = -eps * eps * (G((q[..., 0] - z1) / eps) - G((p[..., 0] - z1) / eps)) * G((p[..., 1] - z2) / eps)
        else:
            val = eps * eps * (G((q[..., 1] - z2) / eps) - G((p[..., 1] - z2) / eps)) * G((p[..., 0] - z1) / eps)
        return np.where(horiz if tau == 1 else ~horiz, val, 0.0)

    return VectorPotential("AlphaColumn1" if tau == 1 else "AlphaColumn2", fn, li,
                           profile=profile, k=k, z=(z1, z2), tau=tau)


def deterministic_potential(view: MagneticFieldView) -> VectorPotential:
    """Potential of B_det: symmetric for a constant, column (based at x1 = 0) otherwise."""
    desc = view.B_det
    sym = symmetric_gauge(desc.const)
    if desc.is_constant:
        return sym

    def fn(x1, x2):
        a1, a2 = sym(x1, x2)
        return a1, a2 + desc.col_integral(0.0, x1, x2) - desc.const * x1

    def li(p, q, horiz):
        base = sym._li(p, q, horiz)
        flux = desc.rect_flux(0.0, p[..., 0], p[..., 1], q[..., 1]) - desc.const * p[..., 0] * (q[..., 1] - p[..., 1])
        return base + np.where(horiz, 0.0, flux)

    return VectorPotential("Deterministic", fn, li, view)


def random_alpha_sum(view: MagneticFieldView, tau: int) -> VectorPotential:
    """mu * sum_k sum_z omega_z^(k) alpha_z^(k, tau) over the stored sites."""
    g, G = view.profile.g, view.profile.G

    def fn(x1, x2):
        if tau == 1:
            a1 = view._levels_sum(lambda t, e: -e * g(t), lambda t, e: G(t), x1, x2)
            return a1, np.zeros_like(a1)
        a2 = view._levels_sum(lambda t, e: e * G(t), lambda t, e: g(t), x1, x2)
        return np.zeros_like(a2), a2

    def li(p, q, horiz):
        if tau == 1:
            val = _horizontal_alpha(view, p, q)
            return np.where(horiz, val, 0.0)
        val = _vertical_alpha(view, p, q)
        return np.where(horiz, 0.0, val)

    return VectorPotential(f"AlphaSum{tau}", fn, li, view, tau=tau)


def _segment_levels(view: MagneticFieldView, lo1, hi1, x2, G_first: bool):
    """mu sum omega eps^2 [G((hi1 - z1)/eps) - G((lo1 - z1)/eps)] G((x2 - z2)/eps) (axis order by flag)."""
    G = view.profile.G
    lo1, hi1, x2 = (np.asarray(v, dtype=float).ravel() for v in (lo1, hi1, x2))
    out = np.zeros(lo1.size)
    for lv in view._active_levels():
        eps = lv.eps
        za, zb = (lv.z1, lv.z2) if G_first else (lv.z2, lv.z1)
        W = lv.values if G_first else lv.values.T
        for s in range(0, lo1.size, 16384):
            sl = slice(s, s + 16384)
            F1 = eps * eps * (G((hi1[sl, None] - za) / eps) - G((lo1[sl, None] - za) / eps))
            F2 = G((x2[sl, None] - zb) / eps)
            out[sl] += np.einsum("rj,rj->r", F1 @ W, F2)
    return view.mu * out


def _horizontal_alpha(view, p, q):
    shape = p.shape[:-1]
    return -_segment_levels(view, p[..., 0], q[..., 0], p[..., 1], True).reshape(shape)


def _vertical_alpha(view, p, q):
    shape = p.shape[:-1]
    return _segment_levels(view, p[..., 1], q[..., 1], p[..., 0], False).reshape(shape)


def total_alpha_potential(view: MagneticFieldView, tau: int) -> VectorPotential:
    """A^(tau) = A_det + mu sum omega alpha^(tau); curl equals B on the padded box."""
    pot = deterministic_potential(view) + random_alpha_sum(view, tau)
    pot.kind = f"SumWithRandom({tau})"
    return pot


def column_gauge(view: MagneticFieldView, y=(0.0, 0.0)) -> VectorPotential:
    """A(x) = (0, int_{y1}^{x1} B(s, x2) ds) evaluated in closed form."""
    y1 = float(y[0])

    def fn(x1, x2):
        view._check(x1, x2)
        view._check(np.full_like(x1, y1), x2)
        return np.zeros_like(x1), view.col_integral(y1, x1, x2)

    def li(p, q, horiz):
        flux = view.rect_flux(y1, p[..., 0], p[..., 1], q[..., 1])
        return np.where(horiz, 0.0, flux)

    return VectorPotential("ColumnGauge", fn, li, view, y=(y1, float(y[1])))


# ---------------------------------------------------------------------------
# Poincare gauge and divergence-free correction
# ---------------------------------------------------------------------------

def _ray_nodes(view: MagneticFieldView, o, x1, x2, m: int = 5, max_piece: float = 0.125):
    """Composite Gauss nodes/weights on t in [0, 1] along o + t (x - o), split at field breakpoints.

    Returns (T, W) with shape (P, K); pieces vary per point, padded with zero weights.
    """
    xs, ws = _gl(m)
    d1, d2 = x1 - o[0], x2 - o[1]
    bx = view.breakpoints(0, min(o[0], np.min(x1, initial=o[0])), max(o[0], np.max(x1, initial=o[0])))
    by = view.breakpoints(1, min(o[1], np.min(x2, initial=o[1])), max(o[1], np.max(x2, initial=o[1])))
    length = np.hypot(d1, d2)
    n_uniform = int(math.ceil(np.max(length, initial=0.0) / max_piece)) + 1
    uni = np.linspace(0.0, 1.0, n_uniform + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (bx[None, :] - o[0]) / d1[:, None] if bx.size else np.zeros((d1.size, 0))
        t2 = (by[None, :] - o[1]) / d2[:, None] if by.size else np.zeros((d1.size, 0))
    cuts = np.concatenate([np.broadcast_to(uni, (d1.size, uni.size)), t1, t2], axis=1)
    valid = np.isfinite(cuts) & (cuts > 0) & (cuts < 1)
    cuts = np.sort(np.where(valid, cuts, 1.0), axis=1)
    cuts = cuts[:, : max(int(valid.sum(axis=1).max(initial=0)), 1)]
    cuts = np.concatenate([np.zeros((d1.size, 1)), cuts, np.ones((d1.size, 1))], axis=1)
    lo, hi = cuts[:, :-1], cuts[:, 1:]
    half = 0.5 * (hi - lo)
    T = (0.5 * (hi + lo))[..., None] + half[..., None] * xs
    W = half[..., None] * ws
    return T.reshape(d1.size, -1), W.reshape(d1.size, -1)


def poincare_gauge(view: MagneticFieldView, origin=(0.0, 0.0)) -> VectorPotential:
    """A*(x) = int_0^1 t B(o + t (x - o)) dt (-(x2 - o2), x1 - o1).

    Point values use composite Gauss quadrature split at the field breakpoints
    (exact on polynomial pieces).  Edge phases use Stokes: A* differs from the
    column gauge based at o1 by the gradient of
    lam(x) = -(x2 - o2) int_0^1 C(o + t (x - o)) dt, C the column integral.
    """
    o = (float(origin[0]), float(origin[1]))

    def fn(x1, x2):
        shape = x1.shape
        a, b = x1.ravel(), x2.ravel()
        T, W = _ray_nodes(view, o, a, b)
        P1 = o[0] + T * (a - o[0])[:, None]
        P2 = o[1] + T * (b - o[1])[:, None]
        s = np.sum(W * T * view.B(P1, P2), axis=1)
        return (-(b - o[1]) * s).reshape(shape), ((a - o[0]) * s).reshape(shape)

    def lam(x1, x2):
        T, W = _ray_nodes(view, o, x1, x2)
        P1 = o[0] + T * (x1 - o[0])[:, None]
        P2 = o[1] + T * (x2 - o[1])[:, None]
        C = view.col_integral(o[0], P1, P2)
        return -(x2 - o[1]) * np.sum(W * C, axis=1)

    col = column_gauge(view, o)

    cache: dict[tuple[float, float], float] = {}

    def lam_cached(pts):
        keys = [(round(a, 12), round(b, 12)) for a, b in pts]
        missing = sorted({k for k in keys if k not in cache})
        if missing:
            arr = np.array(missing)
            cache.update(zip(missing, lam(arr[:, 0], arr[:, 1])))
        return np.array([cache[k] for k in keys])

    def li(p, q, horiz):
        shape = p.shape[:-1]
        pf, qf = p.reshape(-1, 2), q.reshape(-1, 2)
        lv = lam_cached(np.concatenate([pf, qf]))
        dl = lv[pf.shape[0]:] - lv[: pf.shape[0]]
        return col._li(p, q, horiz) + dl.reshape(shape)

    pot = VectorPotential("Poincare", fn, li, view, origin=o)
    pot.gradient_part = lam
    return pot


def _neumann_laplacian_solve(rhs: np.ndarray) -> np.ndarray:
    """Solve L phi = rhs for the grid-graph Laplacian (reflecting ends), mean-zero phi."""
    n1, n2 = rhs.shape
    if n1 < 2 or n2 < 2:
        raise np.linalg.LinAlgError("degenerate grid for the Poisson solve")
    r = fft.dctn(rhs, type=2, norm="ortho")
    l1 = 2.0 - 2.0 * np.cos(np.pi * np.arange(n1) / n1)
    l2 = 2.0 - 2.0 * np.cos(np.pi * np.arange(n2) / n2)
    lam = l1[:, None] + l2[None, :]
    lam[0, 0] = 1.0
    r = r / lam
    r[0, 0] = 0.0
    return fft.idctn(r, type=2, norm="ortho")


def node_divergence(links: LinkPhases) -> np.ndarray:
    """Graph divergence sum_{y ~ x} theta_{x -> y} per node, array indexed [i1, i2]."""
    n = links.grid.n
    H, V = links.horizontal, links.vertical
    div = np.zeros((n, n))
    div[:-1, :] += H
    div[1:, :] -= H
    div[:, :-1] += V
    div[:, 1:] -= V
    return div


def divfree_gauge(A_star: VectorPotential, grid: Grid) -> VectorPotential:
    """A~ = A* - grad phi with the discrete divergence of A~ vanishing on ``grid``.

    phi solves the grid Poisson problem with reflecting (Neumann) ends via a
    DCT; the gradient is the exact nodal difference, so the phase correction
    is a discrete gauge transformation.
    """
    links = link_phases(A_star, grid)
    div = node_divergence(links)
    phi = _neumann_laplacian_solve(-div)  # graph Laplacian L = -div grad
    corrected = links.gauge_shift(-phi)
    x1g, x2g = grid.x1, grid.x2
    h = grid.h

    def grad_phi(x1, x2):
        # centered differences of phi interpolated bilinearly; one-sided at the ends
        g1 = np.gradient(phi, h, axis=0)
        g2 = np.gradient(phi, h, axis=1)
        pts = np.stack([np.clip(x1, x1g[0], x1g[-1]), np.clip(x2, x2g[0], x2g[-1])], -1)
        f1 = RegularGridInterpolator((x1g, x2g), g1)
        f2 = RegularGridInterpolator((x1g, x2g), g2)
        return f1(pts), f2(pts)

    def fn(x1, x2):
        a1, a2 = A_star(x1, x2)
        g1, g2 = grad_phi(x1, x2)
        return a1 - g1, a2 - g2

    def node_of(pt):
        i1 = np.rint((pt[..., 0] - grid.origin[0]) / h).astype(int) - 1
        i2 = np.rint((pt[..., 1] - grid.origin[1]) / h).astype(int) - 1
        ok = (np.abs(grid.origin[0] + (i1 + 1) * h - pt[..., 0]) < 1e-9) & \
             (np.abs(grid.origin[1] + (i2 + 1) * h - pt[..., 1]) < 1e-9) & \
             (i1 >= 0) & (i1 < grid.n) & (i2 >= 0) & (i2 < grid.n)
        if not np.all(ok):
            raise ValueError("divergence-free phases are defined on the solve grid only")
        return phi[i1, i2]

    def li(p, q, horiz):
        return A_star.line_integrals(p, q) - (node_of(q) - node_of(p))

    pot = VectorPotential("DivFree", fn, li, A_star.source, grid=grid)
    pot.phi = phi
    pot.links = corrected
    return pot


# ---------------------------------------------------------------------------
# disk integral and shift phase
# ---------------------------------------------------------------------------

def disk_l2_sq(A: VectorPotential, R: float, center=(0.0, 0.0), n_r: int = 64, n_phi: int = 128) -> float:
    """int_{D_R(center)} |A|^2 by polar Gauss-Legendre x trapezoid quadrature."""
    xr, wr = _gl(n_r)
    r = 0.5 * R * (xr + 1)
    wr = 0.5 * R * wr
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    Rr, Pp = np.meshgrid(r, phi, indexing="ij")
    a1, a2 = A(center[0] + Rr * np.cos(Pp), center[1] + Rr * np.sin(Pp))
    integrand = (a1 ** 2 + a2 ** 2) * Rr
    return float(np.sum(wr[:, None] * integrand) * 2 * np.pi / n_phi)


def disk_lower_bound(b0: float, R: float) -> float:
    return math.pi / 8 * b0 ** 2 * R ** 4


class PhaseField:
    """lambda_a[B](x) = int_{gamma_x} (T_a A[B] - A[T_a B]) . ds, A[.] the column gauge at 0."""

    def __init__(self, view: MagneticFieldView, a):
        self.view = view
        self.a = (int(a[0]), int(a[1]))

    def integrand(self, x1, x2):
        """(D1, D2) = T_a(A[B])(x) - A[T_a B](x) using T_a B(x) = B(x - a)."""
        a1, a2 = self.a
        x1, x2 = np.broadcast_arrays(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
        shifted = self.view.col_integral(0.0, x1 - a1, x2 - a2)
        direct = self.view.col_integral(-a1, x1 - a1, x2 - a2)
        return np.zeros_like(x1), shifted - direct

    def _leg(self, start, end, m: int = 8):
        """int along the straight leg start -> end, composite Gauss split at breakpoints."""
        xs, ws = _gl(m)
        (s1, s2), (e1, e2) = start, end
        length = math.hypot(e1 - s1, e2 - s2)
        if length == 0:
            return 0.0
        axis = 0 if abs(e2 - s2) < 1e-15 else 1
        lo, hi = sorted((s1, e1) if axis == 0 else (s2, e2))
        shift = self.a[axis]
        box = self.view.box
        blo, bhi = (box.x0, box.x1) if axis == 0 else (box.y0, box.y1)
        bp = self.view.breakpoints(axis, blo, bhi) + shift
        cuts = np.unique(np.concatenate([[lo, hi], bp[(bp > lo) & (bp < hi)],
                                         np.linspace(lo, hi, int(math.ceil((hi - lo) / 0.125)) + 1)]))
        a, b = cuts[:-1], cuts[1:]
        t = (0.5 * (a + b))[:, None] + 0.5 * (b - a)[:, None] * xs
        w = 0.5 * (b - a)[:, None] * ws
        if axis == 0:
            d1, _ = self.integrand(t, np.full_like(t, s2))
            val = float(np.sum(w * d1))
            return val if e1 >= s1 else -val
        _, d2 = self.integrand(np.full_like(t, s1), t)
        val = float(np.sum(w * d2))
        return val if e2 >= s2 else -val

    def __call__(self, x, path: str = "axis_first") -> float:
        x1, x2 = float(x[0]), float(x[1])
        if self.a == (0, 0):
            return 0.0
        if path == "axis_first":
            return self._leg((0.0, 0.0), (x1, 0.0)) + self._leg((x1, 0.0), (x1, x2))
        if path == "ordinate_first":
            return self._leg((0.0, 0.0), (0.0, x2)) + self._leg((0.0, x2), (x1, x2))
        raise ValueError(path)

    def at(self, x1, x2, path: str = "axis_first") -> np.ndarray:
        x1, x2 = np.broadcast_arrays(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
        return np.array([self((a, b), path) for a, b in zip(x1.ravel(), x2.ravel())]).reshape(x1.shape)


def gauge_phase(view: MagneticFieldView, a) -> PhaseField:
    return PhaseField(view, a)
