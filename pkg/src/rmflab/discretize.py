"""Peierls finite-difference discretization of (p - A)^2 + V with Dirichlet conditions.

Nodes are the interior points of a uniform grid on the square Lambda_L(center).
Node (i1, i2) has coordinates (x0 + (i1 + 1) h, y0 + (i2 + 1) h) and flat index
i2 * n + i1, so every grid row along x1 is one contiguous block.

Sign convention: theta_e = int_e A . ds for the directed edge e = (x -> y).
With H = (p - A)^2 the hopping entry is H[x, y] = -exp(-i theta_e) / h^2 and
H[y, x] = -exp(+i theta_e) / h^2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

DEFAULT_NODE_CAP = 250_000

_GAUSS3_X = np.array([-math.sqrt(0.6), 0.0, math.sqrt(0.6)])
_GAUSS3_W = np.array([5.0, 8.0, 5.0]) / 9.0


@dataclass(frozen=True)
class Grid:
    L: float
    h: float
    center: tuple = (0.0, 0.0)
    cap: int = DEFAULT_NODE_CAP

    def __post_init__(self):
        ratio = self.L / self.h
        N = int(round(ratio))
        if abs(ratio - N) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"L/h = {ratio} is not an integer")
        if N < 4:
            raise ValueError("L/h must be at least 4")
        if (N - 1) ** 2 > self.cap:
            raise ValueError(f"{(N - 1) ** 2} nodes exceed the cap {self.cap}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    @property
    def N(self) -> int:
        return int(round(self.L / self.h))

    @property
    def n(self) -> int:
        return self.N - 1

    @property
    def dim(self) -> int:
        return self.n ** 2

    @property
    def origin(self) -> tuple[float, float]:
        return self.center[0] - self.L / 2, self.center[1] - self.L / 2

    @property
    def coords(self) -> np.ndarray:
        """1D node coordinate offsets (same along both axes, before adding origin)."""
        return self.h * np.arange(1, self.n + 1)

    @property
    def x1(self) -> np.ndarray:
        return self.origin[0] + self.coords

    @property
    def x2(self) -> np.ndarray:
        return self.origin[1] + self.coords

    def index(self, i1, i2):
        return np.asarray(i2) * self.n + np.asarray(i1)

    def unindex(self, idx):
        idx = np.asarray(idx)
        return idx % self.n, idx // self.n

    def node_xy(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat arrays of node coordinates in index order."""
        X2, X1 = np.meshgrid(self.x2, self.x1, indexing="ij")
        return X1.ravel(), X2.ravel()

    def horizontal_edges(self):
        """Start/end points of edges (i1, i2) -> (i1 + 1, i2); arrays shaped (n - 1, n)."""
        I1, I2 = np.meshgrid(np.arange(self.n - 1), np.arange(self.n), indexing="ij")
        p = np.stack([self.x1[I1], self.x2[I2]], -1)
        q = np.stack([self.x1[I1 + 1], self.x2[I2]], -1)
        return p, q

    def vertical_edges(self):
        """Start/end points of edges (i1, i2) -> (i1, i2 + 1); arrays shaped (n, n - 1)."""
        I1, I2 = np.meshgrid(np.arange(self.n), np.arange(self.n - 1), indexing="ij")
        p = np.stack([self.x1[I1], self.x2[I2]], -1)
        q = np.stack([self.x1[I1], self.x2[I2 + 1]], -1)
        return p, q

    @property
    def n_edges(self) -> tuple[int, int]:
        """Undirected interior edges (horizontal, vertical)."""
        return (self.n - 1) * self.n, self.n * (self.n - 1)

    def translated(self, a) -> "Grid":
        return Grid(self.L, self.h, (self.center[0] + a[0], self.center[1] + a[1]), self.cap)

    def region_mask(self, half_side: float, center=None, inner: float | None = None) -> np.ndarray:
        """Nodes with |x - c|_inf <= half_side (and > inner if given), flat index order."""
        c = self.center if center is None else center
        X1, X2 = self.node_xy()
        d = np.maximum(np.abs(X1 - c[0]), np.abs(X2 - c[1]))
        m = d <= half_side + 1e-12
        if inner is not None:
            m &= d > inner + 1e-12
        return m


def build_grid(L: float, h: float, center=(0.0, 0.0), cap: int = DEFAULT_NODE_CAP) -> Grid:
    return Grid(L, h, center, cap)


def check_resolution(k_max: int, h: float, override: bool = False) -> None:
    """Enforce h <= 2^-k_max / 4 unless overridden."""
    limit = 2.0 ** -k_max / 4.0
    if h > limit + 1e-15 and not override:
        raise ValueError(f"h={h} does not resolve level {k_max} (need h <= {limit})")


@dataclass(frozen=True)
class LinkPhases:
    """theta on horizontal (shape (n-1, n)) and vertical (shape (n, n-1)) edges."""

    grid: Grid
    horizontal: np.ndarray
    vertical: np.ndarray

    def __post_init__(self):
        n = self.grid.n
        if self.horizontal.shape != (n - 1, n) or self.vertical.shape != (n, n - 1):
            raise ValueError("link phase arrays do not match the grid")

    def phase(self, a, b) -> float:
        """theta for the directed edge between node tuples a -> b (reverse is negated)."""
        (i1, i2), (j1, j2) = a, b
        if j2 == i2 and j1 == i1 + 1:
            return float(self.horizontal[i1, i2])
        if j2 == i2 and j1 == i1 - 1:
            return -float(self.horizontal[j1, j2])
        if j1 == i1 and j2 == i2 + 1:
            return float(self.vertical[i1, i2])
        if j1 == i1 and j2 == i2 - 1:
            return -float(self.vertical[j1, j2])
        raise KeyError("nodes are not nearest neighbours")

    def __add__(self, other: "LinkPhases") -> "LinkPhases":
        return LinkPhases(self.grid, self.horizontal + other.horizontal, self.vertical + other.vertical)

    def scaled(self, c: float) -> "LinkPhases":
        return LinkPhases(self.grid, c * self.horizontal, c * self.vertical)

    def gauge_shift(self, phi: np.ndarray) -> "LinkPhases":
        """theta_e + phi(y) - phi(x) for a node function phi (flat or (n, n) indexed [i1, i2])."""
        n = self.grid.n
        P = np.asarray(phi).reshape(n, n).T if np.ndim(phi) == 1 else np.asarray(phi)
        return LinkPhases(self.grid, self.horizontal + (P[1:, :] - P[:-1, :]),
                          self.vertical + (P[:, 1:] - P[:, :-1]))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.horizontal.ravel(), self.vertical.ravel()])

    @classmethod
    def zeros(cls, grid: Grid) -> "LinkPhases":
        n = grid.n
        return cls(grid, np.zeros((n - 1, n)), np.zeros((n, n - 1)))


def gauss3_line_integrals(A, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """int_p^q A . ds by 3-point Gauss-Legendre (exact for polynomial A of degree <= 5)."""
    d = q - p
    mid = 0.5 * (p + q)
    total = np.zeros(p.shape[:-1])
    for x, w in zip(_GAUSS3_X, _GAUSS3_W):
        pt = mid + 0.5 * x * d
        a1, a2 = A(pt[..., 0], pt[..., 1])
        total = total + 0.5 * w * (a1 * d[..., 0] + a2 * d[..., 1])
    return total


def link_phases(A, grid: Grid, method: str = "auto") -> LinkPhases:
    """Peierls phases of a vector potential on every interior edge.

    ``A`` is a callable (x1, x2) -> (A1, A2).  If it also exposes
    ``line_integrals(p, q)`` (closed form) and ``method`` is "auto" or "exact",
    that is used; otherwise 3-point Gauss quadrature along each edge.
    """
    ph, qh = grid.horizontal_edges()
    pv, qv = grid.vertical_edges()
    exact = getattr(A, "line_integrals", None)
    if method == "exact" and exact is None:
        raise ValueError("potential has no closed-form line integrals")
    if exact is not None and method in ("auto", "exact"):
        th, tv = exact(ph, qh), exact(pv, qv)
    else:
        th, tv = gauss3_line_integrals(A, ph, qh), gauss3_line_integrals(A, pv, qv)
    return LinkPhases(grid, np.asarray(th, dtype=float), np.asarray(tv, dtype=float))


def plaquette_flux(links: LinkPhases, cell) -> float:
    """Counter-clockwise phase sum around the cell with lower-left node ``cell``."""
    i1, i2 = cell
    n = links.grid.n
    if not (0 <= i1 < n - 1 and 0 <= i2 < n - 1):
        raise ValueError("cell lacks interior edges")
    return float(links.horizontal[i1, i2] + links.vertical[i1 + 1, i2]
                 - links.horizontal[i1, i2 + 1] - links.vertical[i1, i2])


def plaquette_fluxes(links: LinkPhases) -> np.ndarray:
    """All interior plaquette sums, shape (n - 1, n - 1)."""
    H, V = links.horizontal, links.vertical
    return H[:, :-1] + V[1:, :] - H[:, 1:] - V[:-1, :]


@dataclass(frozen=True)
class DiscreteHamiltonian:
    grid: Grid
    matrix: sp.csr_matrix
    links: LinkPhases
    potential: np.ndarray

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def h(self) -> float:
        return self.grid.h

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def export_coo(self, path) -> None:
        """Coordinate-triplet text: one line 'row col re im' per stored entry."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with open(path, "w") as fh:
            fh.write(f"% {self.dim} {self.dim} {coo.nnz}\n")
            for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
                fh.write(f"{r} {c} {float(v.real)!r} {float(v.imag)!r}\n")

    @staticmethod
    def read_coo(path) -> sp.csr_matrix:
        with open(path) as fh:
            head = fh.readline().split()
            n = int(head[1])
            data = np.loadtxt(fh, ndmin=2)
        return sp.csr_matrix((data[:, 2] + 1j * data[:, 3], (data[:, 0].astype(int), data[:, 1].astype(int))),
                             shape=(n, n))

    def with_links(self, links: LinkPhases) -> "DiscreteHamiltonian":
        return assemble_hamiltonian(self.grid, links, self.potential)


def _hopping_pattern(grid: Grid):
    n = grid.n
    I1, I2 = np.meshgrid(np.arange(n - 1), np.arange(n), indexing="ij")
    h_src, h_dst = grid.index(I1, I2).ravel(), grid.index(I1 + 1, I2).ravel()
    J1, J2 = np.meshgrid(np.arange(n), np.arange(n - 1), indexing="ij")
    v_src, v_dst = grid.index(J1, J2).ravel(), grid.index(J1, J2 + 1).ravel()
    return np.concatenate([h_src, v_src]), np.concatenate([h_dst, v_dst])


def assemble_hamiltonian(grid: Grid, links: LinkPhases, V=None) -> DiscreteHamiltonian:
    """Sparse Hermitian H with diagonal 4/h^2 + V and Peierls hopping."""
    if links.grid.n != grid.n:
        raise ValueError("link phases were built on a different grid")
    h2 = grid.h ** 2
    X1, X2 = grid.node_xy()
    if V is None:
        pot = np.zeros(grid.dim)
    elif callable(V):
        pot = np.asarray(V(X1, X2), dtype=float) * np.ones(grid.dim)
    else:
        pot = np.asarray(V, dtype=float) * np.ones(grid.dim)
        if pot.shape != (grid.dim,):
            raise ValueError("potential has the wrong dimension")
    src, dst = _hopping_pattern(grid)
    theta = links.flat()
    fwd = -np.exp(-1j * theta) / h2
    rows = np.concatenate([np.arange(grid.dim), src, dst])
    cols = np.concatenate([np.arange(grid.dim), dst, src])
    vals = np.concatenate([4.0 / h2 + pot + 0j, fwd, np.conj(fwd)])
    M = sp.csr_matrix((vals, (rows, cols)), shape=(grid.dim, grid.dim))
    M.sort_indices()
    return DiscreteHamiltonian(grid, M, links, pot)


def hamiltonian_from_potential(A, grid: Grid, V=None, method: str = "auto") -> DiscreteHamiltonian:
    return assemble_hamiltonian(grid, link_phases(A, grid, method), V)


def edge_derivative_matrix(grid: Grid, links: LinkPhases, dtheta: LinkPhases) -> sp.csr_matrix:
    """dH/dt for theta -> theta + t * dtheta at t = 0."""
    src, dst = _hopping_pattern(grid)
    theta = links.flat()
    d = dtheta.flat()
    fwd = 1j * d * np.exp(-1j * theta) / grid.h ** 2
    M = sp.csr_matrix((np.concatenate([fwd, np.conj(fwd)]),
                       (np.concatenate([src, dst]), np.concatenate([dst, src]))),
                      shape=(grid.dim, grid.dim))
    return M


def dirichlet_laplacian_eigenvalues(grid: Grid) -> np.ndarray:
    """Closed-form spectrum of the A = 0, V = 0 matrix (sorted)."""
    j = np.arange(1, grid.n + 1)
    lam1 = (2.0 - 2.0 * np.cos(j * np.pi / grid.N)) / grid.h ** 2
    return np.sort((lam1[:, None] + lam1[None, :]).ravel())


def integrate_gradient(links: LinkPhases) -> tuple[np.ndarray, float]:
    """Node function phi with theta_e = phi(y) - phi(x), and the largest defect.

    phi is built along the first column and then along each row; the defect
    max |theta - d phi| is zero exactly when ``links`` is a discrete gradient.
    """
    H, V = links.horizontal, links.vertical
    n = links.grid.n
    phi = np.zeros((n, n))
    phi[0, 1:] = np.cumsum(V[0, :])
    phi[1:, :] = phi[0, :][None, :] + np.cumsum(H, axis=0)
    defect = max(float(np.max(np.abs(H - (phi[1:, :] - phi[:-1, :])), initial=0.0)),
                 float(np.max(np.abs(V - (phi[:, 1:] - phi[:, :-1])), initial=0.0)))
    return phi, defect


def node_values_flat(phi: np.ndarray) -> np.ndarray:
    """(n, n) array indexed [i1, i2] to the flat index order i2 * n + i1."""
    return np.asarray(phi).T.ravel()
