"""Eigenpairs, window counts, the smooth cutoff and resolvent blocks."""
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rmflab.discretize import LinkPhases, assemble_hamiltonian, build_grid, hamiltonian_from_potential
from rmflab.eigensolve import (
    CutoffSpec, count_below, count_in_window, gershgorin_floor, lowest_eigenpairs, negative_count,
    resolvent_block_norm, smooth_cutoff, t_map,
)
from rmflab.experiments import combes_thomas_bound
from rmflab.gauges import symmetric_gauge


def _random_instance(L, h, seed, b=3.0):
    g = build_grid(L, h)
    rng = np.random.default_rng(seed)
    links = link = hamiltonian_from_potential(symmetric_gauge(b), g).links
    jitter = LinkPhases(g, rng.normal(0, 0.3, link.horizontal.shape), rng.normal(0, 0.3, link.vertical.shape))
    return assemble_hamiltonian(g, links + jitter, rng.uniform(-0.5, 0.5, g.dim))


# -- eigenpairs -------------------------------------------------------------------

def test_free_laplacian_lowest():
    g = build_grid(4, 1)
    res = lowest_eigenpairs(assemble_hamiltonian(g, LinkPhases.zeros(g)), 1, 1e-12)
    assert res.eigenvalues[0] == pytest.approx(4 - 2 * math.sqrt(2), abs=1e-12)


def test_landau_level_small_box():
    H = hamiltonian_from_potential(symmetric_gauge(5.0), build_grid(6, 0.1))
    assert lowest_eigenpairs(H, 1, 1e-9).eigenvalues[0] == pytest.approx(5.0, rel=0.02)  # [PAPER] lowest level B


def test_dense_and_lanczos_agree():
    H = _random_instance(12.75, 0.25, 0)
    assert H.dim == 2500
    tol = 1e-8
    dense = lowest_eigenpairs(H, 6, tol, method="dense")
    lanczos = lowest_eigenpairs(H, 6, tol, method="lanczos")
    assert np.max(np.abs(dense.eigenvalues - lanczos.eigenvalues)) <= 10 * tol


def test_residual_and_orthonormality_contract():
    H = _random_instance(7.75, 0.25, 1)
    res = lowest_eigenpairs(H, 8, 1e-9, method="lanczos")
    V = res.eigenvectors
    assert np.all(res.residuals <= 1e-9)
    assert np.all(np.linalg.norm(H.matrix @ V - V * res.eigenvalues, axis=0) <= 1e-9)
    assert np.max(np.abs(V.conj().T @ V - np.eye(8))) <= 1e-10
    assert np.all(np.diff(res.eigenvalues) >= 0)
    assert res.eigenvalues[0] >= gershgorin_floor(H) - 1e-12


def test_lanczos_is_seed_deterministic():
    H = _random_instance(7.75, 0.25, 2)
    a = lowest_eigenpairs(H, 3, 1e-9, seed=5, method="lanczos")
    b = lowest_eigenpairs(H, 3, 1e-9, seed=5, method="lanczos")
    assert np.array_equal(a.eigenvalues, b.eigenvalues)


def test_invalid_requests_rejected():
    H = _random_instance(2, 0.5, 0)
    with pytest.raises(ValueError):
        lowest_eigenpairs(H, 0)
    with pytest.raises(ValueError):
        lowest_eigenpairs(H, 1, tol=0.0)
    with pytest.raises(ValueError):
        lowest_eigenpairs(H, 1, method="arnoldi")


def test_eigenvalue_csv(tmp_path):
    res = lowest_eigenpairs(_random_instance(2, 0.5, 0), 3)
    res.to_csv(tmp_path / "ev.csv")
    lines = (tmp_path / "ev.csv").read_text().splitlines()
    assert lines[0] == "index,value,residual"
    assert float(lines[1].split(",")[1]) == res.eigenvalues[0]


# -- counting -------------------------------------------------------------------------

def test_count_below_floor_is_zero():
    H = _random_instance(4, 0.25, 3)
    assert count_in_window(H, gershgorin_floor(H) - 2.0, 1.0) == 0


def test_count_whole_spectrum():
    H = _random_instance(4, 0.25, 3)
    ev = np.linalg.eigvalsh(H.toarray())
    E = 0.5 * (ev[0] + ev[-1])
    assert count_in_window(H, E, ev[-1] - ev[0] + 2.0) == H.dim


def test_inertia_matches_dense_counts():
    H = _random_instance(7.75, 0.25, 4)
    assert H.dim == 900
    ev = np.linalg.eigvalsh(H.toarray())
    rng = np.random.default_rng(0)
    for _ in range(20):
        E = rng.uniform(ev[0], 10.0)
        eta = rng.uniform(0.05, 1.0)
        dense = int(np.sum((ev >= E - eta / 2) & (ev <= E + eta / 2)))
        assert count_in_window(H, E, eta, method="block") == dense == count_in_window(H, E, eta, method="dense")


@given(st.floats(1.0, 9.0), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_adjacent_windows_add(lo, w1, w2):
    H = _random_instance(5, 0.25, 5)
    a = count_in_window(H, lo + w1 / 2, w1)
    b = count_in_window(H, lo + w1 + w2 / 2, w2)
    ev = np.linalg.eigvalsh(H.toarray())
    on_cut = int(np.sum(np.abs(ev - (lo + w1)) <= 1e-9))
    assert a + b - on_cut == count_in_window(H, lo + (w1 + w2) / 2, w1 + w2)


@pytest.mark.parametrize("method", ["block", "dense"])
def test_shift_on_eigenvalue_is_perturbed(method):
    g = build_grid(5, 0.25)
    H = assemble_hamiltonian(g, LinkPhases.zeros(g))
    lam = float(np.linalg.eigvalsh(H.toarray())[0])
    count, used = negative_count(H, lam, method)
    assert used == lam + 1e-10
    assert count == 1


def test_window_edges_on_eigenvalues_are_closed():
    g = build_grid(5, 0.25)
    H = assemble_hamiltonian(g, LinkPhases.zeros(g))
    ev = np.linalg.eigvalsh(H.toarray())
    lo, hi = float(ev[0]), float(ev[4])
    expected = int(np.sum((ev >= lo - 1e-9) & (ev <= hi + 1e-9)))
    assert count_in_window(H, 0.5 * (lo + hi), hi - lo, method="block") == expected


def test_nonpositive_width_rejected():
    with pytest.raises(ValueError):
        count_in_window(_random_instance(2, 0.5, 0), 1.0, 0.0)


# -- smooth cutoff ----------------------------------------------------------------------

SPEC = CutoffSpec.from_constants(E=4.0, eta=0.5, b0=2.0, K1=4.0)


def test_cutoff_scale():
    assert SPEC.s == 80.0  # [PAPER] s = 10 K1 b0


def test_t_at_zero_and_s():
    assert float(t_map(0.0, SPEC.s)) == 0.0
    assert float(t_map(SPEC.s, SPEC.s)) == pytest.approx(SPEC.s / 8, rel=1e-15)


def test_t_derivative_bounded_by_one():
    u = np.linspace(0, 20 * SPEC.s, 200_001)
    d = np.diff(t_map(u, SPEC.s)) / np.diff(u)
    assert d.max() <= 1 + 1e-6  # [PAPER] t' <= 1


@given(st.floats(0.0, 200.0))
def test_F_and_G_are_antiderivatives(u):
    s = 1e-6
    lo, mid, hi = (smooth_cutoff(v, SPEC) for v in (max(u - s, 0.0), u, u + s))
    c = float(t_map(SPEC.E, SPEC.s))
    t = float(mid["t"])
    assert 0.0 <= float(mid["F"]) <= SPEC.eta
    if abs(t - (c - SPEC.eta / 2)) > 1e-4 and abs(t - (c + SPEC.eta / 2)) > 1e-4:
        dt = float(hi["t"] - lo["t"])
        chi = 1.0 if abs(t - c) <= SPEC.eta / 2 else 0.0
        assert float(hi["F"] - lo["F"]) == pytest.approx(chi * dt, abs=1e-10)
        assert float(hi["G"] - lo["G"]) == pytest.approx(float(mid["F"]) * dt, abs=1e-10)


def test_cutoff_rejects_negative_argument():
    with pytest.raises(ValueError):
        smooth_cutoff(-1.0, SPEC)
    with pytest.raises(ValueError):
        CutoffSpec(1.0, 1.5, 1.0)


# -- resolvent blocks ------------------------------------------------------------------------

def test_full_block_norm_is_inverse_distance():
    H = _random_instance(4, 0.25, 6)
    lam0 = lowest_eigenpairs(H, 1, 1e-12).eigenvalues[0]
    E = lam0 - 3.0
    full = np.ones(H.dim, dtype=bool)
    assert resolvent_block_norm(H, E, full, full, tol=1e-9) == pytest.approx(1 / (lam0 - E), rel=1e-5)


@pytest.mark.parametrize("l", [8, 12])
def test_constant_field_block_bound(l):
    b = 4.0
    g = build_grid(l, 0.25)
    H = hamiltonian_from_potential(symmetric_gauge(b), g)
    E = b / 2
    eta = lowest_eigenpairs(H, 1, 1e-10).eigenvalues[0] - E
    pin = g.region_mask(l / 6)
    pout = g.region_mask(l / 2, inner=l / 2 - 1)
    assert resolvent_block_norm(H, E, pin, pout) <= combes_thomas_bound(eta, l)  # [PAPER] block decay bound


def test_block_norm_decreases_with_separation():
    g = build_grid(12, 0.25)
    H = hamiltonian_from_potential(symmetric_gauge(4.0), g)
    pin = g.region_mask(1.0, center=(-4.0, 0.0))
    norms = [resolvent_block_norm(H, 2.0, pin, g.region_mask(0.5, center=(c, 0.0))) for c in (-1.5, 1.0, 3.5)]
    assert norms[0] > norms[1] > norms[2]


def test_resolvent_refuses_eigenvalue():
    H = _random_instance(3, 0.25, 7)
    lam = float(np.linalg.eigvalsh(H.toarray())[2])
    full = np.ones(H.dim, dtype=bool)
    with pytest.raises(ValueError):
        resolvent_block_norm(H, lam, full, full)
    with pytest.raises(ValueError):
        resolvent_block_norm(H, lam - 5, full[:-1], full)
