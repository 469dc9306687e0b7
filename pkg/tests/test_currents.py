"""Eigenfunction currents, eigenvalue derivatives and the averaging-box error."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rmflab.currents import (
    AveragingBox, DegenerateEigenvalueError, HamiltonianFamily, current_from_vector, current_norms,
    eigen_current, error_mass_bound, finite_difference_derivative, gradient_sum_squares,
    hellmann_feynman, mollifier_error_mass, mollifier_error_mass_separable, transport_eigenvector,
)
from rmflab.discretize import LinkPhases, assemble_hamiltonian, build_grid, hamiltonian_from_potential
from rmflab.eigensolve import lowest_eigenpairs
from rmflab.gauges import symmetric_gauge
from rmflab.randfield import DisorderSpec, ProfileFunction, constant, padded_box, sample_disorder

PLATEAU = ProfileFunction("plateau", 0.1, relaxed=True)
MOLLIFIER = ProfileFunction("mollifier", 0.1, relaxed=True)
SPEC = DisorderSpec(profile=PLATEAU)


def _family(seed, L=4.0, h=0.25, spec=SPEC, tau=1):
    real = sample_disorder(spec, padded_box(spec, L), seed)
    return HamiltonianFamily(spec, real, build_grid(L, h), tau)


def _landau(b=4.0, L=6.0, h=0.25):
    H = hamiltonian_from_potential(symmetric_gauge(b), build_grid(L, h))
    return H, lowest_eigenpairs(H, 1, 1e-12)


def _loop_circulation(cur, r):
    """Counter-clockwise sum of j around the square of nodes at index distance r from the centre."""
    c = cur.grid.n // 2
    lo, hi = c - r, c + r
    nodes = ([(i, lo) for i in range(lo, hi)] + [(hi, j) for j in range(lo, hi)]
             + [(i, hi) for i in range(hi, lo, -1)] + [(lo, j) for j in range(hi, lo, -1)])
    return sum(cur.value(a, b) for a, b in zip(nodes, nodes[1:] + nodes[:1]))


# -- currents ----------------------------------------------------------------------

def test_real_ground_state_carries_no_current():
    g = build_grid(4, 0.25)
    H = assemble_hamiltonian(g, LinkPhases.zeros(g))
    cur = eigen_current(H, lowest_eigenpairs(H, 1, 1e-12).pair(0))
    assert cur.max_abs <= 1e-14


def test_landau_current_conserved_and_circulating():
    H, res = _landau()
    cur = eigen_current(H, res.pair(0))
    assert np.max(np.abs(cur.divergence())) <= 1e-10 * cur.max_abs
    assert all(abs(_loop_circulation(cur, r)) > 1e-3 * cur.max_abs for r in (2, 5, 8))


def test_current_antisymmetric():
    H, res = _landau()
    cur = eigen_current(H, res.pair(0))
    assert cur.value((4, 5), (5, 5)) == -cur.value((5, 5), (4, 5))


@given(st.integers(0, 2 ** 32 - 1))
def test_current_gauge_invariant(seed):
    H, res = _landau(L=4.0)
    lam, psi = res.pair(0)
    phi = np.random.default_rng(seed).uniform(-5, 5, (H.grid.n, H.grid.n))
    H2 = H.with_links(H.links.gauge_shift(phi))
    psi2 = transport_eigenvector(H, H2, psi)
    j1 = eigen_current(H, (lam, psi)).flat()
    j2 = eigen_current(H2, (lam, psi2)).flat()
    assert np.max(np.abs(j1 - j2)) <= 1e-13


def test_inaccurate_pair_refused():
    H, res = _landau(L=4.0)
    lam, psi = res.pair(0)
    with pytest.raises(ValueError):
        eigen_current(H, (lam + 1e-3, psi))


def test_transport_rejects_non_gradient():
    H, res = _landau(L=4.0)
    other = hamiltonian_from_potential(symmetric_gauge(5.0), H.grid)
    with pytest.raises(ValueError):
        transport_eigenvector(H, other, res.eigenvectors[:, 0])


def test_conservation_residual_tracks_eigen_residual():
    H, res = _landau(L=4.0)
    lam, psi = res.pair(0)
    rng = np.random.default_rng(0)
    ratios = []
    for target in (1e-6, 1e-8, 1e-10):
        d = rng.normal(size=psi.size) + 1j * rng.normal(size=psi.size)
        d -= psi * np.vdot(psi, d)
        r = H.matrix @ d - lam * d
        phi = psi + target * d / np.linalg.norm(r)
        phi /= np.linalg.norm(phi)
        cur = current_from_vector(H, lam, phi)
        ratios.append(np.max(np.abs(cur.divergence())) / cur.residual)
    assert max(ratios) / min(ratios) <= 10.0


def test_current_csv(tmp_path):
    H, res = _landau(L=2.0)
    cur = eigen_current(H, res.pair(0))
    cur.to_csv(tmp_path / "j.csv")
    lines = (tmp_path / "j.csv").read_text().splitlines()
    assert lines[0] == "x0,y0,x1,y1,value"
    assert len(lines) == 1 + cur.flat().size


# -- eigenvalue derivatives ------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_hellmann_feynman_matches_finite_difference(seed):
    fam = _family(seed)
    res = fam.spectrum(2)
    z = (0.0, 1.0)
    hf = hellmann_feynman(fam, res, 0, 0, z)
    fd = finite_difference_derivative(fam, 0, 0, z, 1e-3)
    assert abs(hf - fd) <= 1e-5 * abs(hf)


def test_hellmann_feynman_current_pairing():
    fam = _family(3)
    res = fam.spectrum(2)
    for z in [(0.0, 0.0), (1.0, -1.0), (-2.0, 2.0)]:
        val, pairing = hellmann_feynman(fam, res, 0, 0, z, return_pairing=True)
        assert abs(val - pairing) <= 1e-12


def test_hellmann_feynman_zero_outside_box():
    spec = DisorderSpec(profile=PLATEAU)
    fam = _family(4, spec=spec)
    res = fam.spectrum(2)
    assert abs(hellmann_feynman(fam, res, 0, 0, (3.0, 0.0))) <= 1e-14


def test_finite_difference_is_second_order():
    fam = _family(5)
    res = fam.spectrum(2)
    z = (0.0, 0.0)
    hf = hellmann_feynman(fam, res, 0, 0, z, fd_step=1e-4)
    steps = np.array([1e-2, 1e-3, 1e-4])
    err = [abs(finite_difference_derivative(fam, 0, 0, z, s) - hf) for s in steps]
    slope = np.polyfit(np.log(steps), np.log(err), 1)[0]
    assert abs(slope - 2.0) <= 0.3


def test_degenerate_target_refused():
    spec = DisorderSpec(profile=PLATEAU, mu=0.0, B_det=constant(4.0))
    fam = _family(0, L=8.0, h=0.5, spec=spec)
    res = fam.spectrum(3)
    with pytest.raises(DegenerateEigenvalueError) as exc:
        hellmann_feynman(fam, res, 1, 0, (0.0, 0.0))
    assert exc.value.gap < 1e-2


def test_gradient_sum_routes_agree():
    fam = _family(6, L=3.0)
    res = fam.spectrum(2)
    out = gradient_sum_squares(fam, res, 0, 0)
    assert out["sum"] > 0
    for key in ("alpha1", "alpha2", "decomposition"):
        ref = out["sum"] if key == "decomposition" else out["sum"] / SPEC.mu ** 2
        assert abs(out[key] - ref) <= 1e-10 * ref


def test_gradient_sum_vanishes_without_coupling():
    spec = DisorderSpec(profile=PLATEAU, mu=0.0)
    fam = _family(7, L=3.0, spec=spec)
    res = fam.spectrum(2)
    assert gradient_sum_squares(fam, res, 0, 0)["sum"] == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_gradient_sum_positive(seed):
    fam = _family(100 + seed, L=3.0)
    res = fam.spectrum(2)
    assert res.eigenvalues[0] <= SPEC.K1 * SPEC.b0
    assert gradient_sum_squares(fam, res, 0, 0)["sum"] > 0


# -- averaging box -------------------------------------------------------------------------

@pytest.mark.parametrize("tau", [1, 2])
def test_averaging_indicator_unit_norm(tau):
    box = AveragingBox(ProfileFunction("plateau", 0.25, relaxed=True), 1)
    r = box.half_side
    t = np.linspace(-r, r, 2001)
    X1, X2 = np.meshgrid(t, t)
    m1, m2 = box.M(X1, X2, tau)
    dx = t[1] - t[0]
    assert float(np.sum(m1 ** 2 + m2 ** 2) * dx * dx) == pytest.approx(1.0, rel=5e-3)


def test_error_mass_plateau_bound():
    assert mollifier_error_mass(PLATEAU) <= 10.0  # [PAPER] Theta = 100


def test_error_mass_mollifier_bound():
    bound = error_mass_bound(MOLLIFIER)
    assert bound == pytest.approx((20 + MOLLIFIER.base_grad_sup ** 2) * 0.1)
    assert mollifier_error_mass(MOLLIFIER) <= bound  # [PAPER] Theta = 20 + ||grad u0||^2


@pytest.mark.parametrize("profile", [PLATEAU, MOLLIFIER, ProfileFunction("plateau", 0.25, relaxed=True)])
def test_error_mass_routes_agree(profile):
    a = mollifier_error_mass(profile)
    b = mollifier_error_mass_separable(profile)
    assert abs(a - b) <= 1e-8 * max(abs(a), 1e-12)


def test_error_mass_matches_pointwise_error():
    profile = ProfileFunction("plateau", 0.25, relaxed=True)
    box = AveragingBox(profile, 0)
    R = box.outer_half_side
    t = np.linspace(-R, R, 1201)
    X1, X2 = np.meshgrid(t, t)
    e1, e2 = box.error(X1, X2, 1)
    dx = t[1] - t[0]
    brute = float(np.sum(e1 ** 2 + e2 ** 2) * dx * dx)
    assert brute == pytest.approx(mollifier_error_mass(profile), rel=2e-2)


def test_error_confined_to_outer_box():
    box = AveragingBox(ProfileFunction("plateau", 0.25, relaxed=True), 1)
    R = box.outer_half_side
    rng = np.random.default_rng(0)
    pts = rng.uniform(R, 3 * R, size=(2, 200)) * rng.choice([-1, 1], size=(2, 200))
    for tau in (1, 2):
        e1, e2 = box.error(pts[0], pts[1], tau)
        assert np.all(e1 == 0) and np.all(e2 == 0)  # [PAPER] supp eps_z inside Q_z'


def test_error_mass_rejects_wide_delta():
    with pytest.raises(ValueError):
        mollifier_error_mass(ProfileFunction("plateau", 0.3, relaxed=True))


# -- current norms -----------------------------------------------------------------------------

def test_zero_current_norms():
    g = build_grid(4, 0.25)
    H = assemble_hamiltonian(g, LinkPhases.zeros(g))
    out = current_norms(eigen_current(H, lowest_eigenpairs(H, 1, 1e-12).pair(0)))
    assert out["l2_sq"] == 0.0 and out["grad_l2_sq"] == 0.0


def test_norms_scale_quartically():
    H, res = _landau(L=4.0)
    lam, psi = res.pair(0)
    a = current_norms(current_from_vector(H, lam, psi))["l2_sq"]
    b = current_norms(current_from_vector(H, lam, (1.5 - 0.5j) * psi))["l2_sq"]
    assert b == pytest.approx(abs(1.5 - 0.5j) ** 4 * a, rel=1e-12)


def test_landau_current_norms_across_boxes():
    vals = []
    for L in (6.0, 8.0, 10.0):
        H, res = _landau(L=L)
        out = current_norms(eigen_current(H, res.pair(0)))
        assert out["l2_sq"] > 0
        assert out["d_prime"] == 126
        vals.append(out["l2_sq"])
    assert max(vals) / min(vals) < 10.0
