"""Multiscale random magnetic field, background field, potential and disorder model.

The random field is

    B(x) = B_det(x) + mu * sum_{k <= k_max} sum_z omega_z^(k) u(2^k (x - z))

with z running over the dyadic lattice (2^-k Z)^2 intersected with a padded box.
Both admissible profiles are tensor products u(x) = g(x1) g(x2), so every line
and rectangle integral of B has a closed form built from the 1D antiderivative
of g.  That is what the gauge and discretization modules lean on.
"""
from __future__ import annotations

import dataclasses
import functools
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate, optimize, special

PLATEAU = "plateau"
MOLLIFIER = "mollifier"

# normalisation of the 1D mollifier factor (1 - s^2)^3 on [-1, 1]
_MOLL_INT = 32.0 / 35.0
_MOLL_KAPPA = 1.0 / _MOLL_INT

EXPORT_MAGIC = b"RMFD"
EXPORT_VERSION = 1
_ROW_DTYPE = np.dtype([("k", "<i4"), ("z1", "<f8"), ("z2", "<f8"), ("omega", "<f8")])

DEFAULT_SITE_CAP = 4_000_000


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_path: str, message: str):
        self.field = field_path
        super().__init__(f"{field_path}: {message}")


# ---------------------------------------------------------------------------
# profile functions
# ---------------------------------------------------------------------------

def _moll_p(s):
    s = np.asarray(s, dtype=float)
    return np.where(np.abs(s) < 1.0, (1.0 - s * s) ** 3, 0.0)


def _moll_dp(s):
    s = np.asarray(s, dtype=float)
    return np.where(np.abs(s) < 1.0, -6.0 * s * (1.0 - s * s) ** 2, 0.0)


def _moll_P(s):
    # antiderivative of (1 - s^2)^3 from -1
    s = np.clip(np.asarray(s, dtype=float), -1.0, 1.0)
    return s - s ** 3 + 0.6 * s ** 5 - s ** 7 / 7.0 + 16.0 / 35.0


@functools.lru_cache(maxsize=None)
def mollifier_base_grad_sup() -> float:
    """sup |grad u0| (Euclidean) for u0 = c (1-x1^2)^3_+ (1-x2^2)^3_+."""
    c = _MOLL_KAPPA ** 2

    def neg(v):
        a, b = v
        ga = float(_moll_dp(a) * _moll_p(b))
        gb = float(_moll_p(a) * _moll_dp(b))
        return -c * math.hypot(ga, gb)

    ts = np.linspace(-1, 1, 201)
    A, Bg = np.meshgrid(ts, ts, indexing="ij")
    vals = c * np.hypot(_moll_dp(A) * _moll_p(Bg), _moll_p(A) * _moll_dp(Bg))
    i = np.unravel_index(np.argmax(vals), vals.shape)
    res = optimize.minimize(neg, x0=[A[i], Bg[i]], method="Nelder-Mead",
                            options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 4000})
    return float(max(-res.fun, vals.max()))


@dataclass(frozen=True)
class ProfileFunction:
    """Bump profile u generating the local fields.

    ``plateau``: u = 1 on |x|_inf <= 1/2 - delta, 0 on |x|_inf >= 1/2 + delta,
    with a C^1 cubic ramp in between (tensor product of 1D ramps, so the unit
    translates form an exact partition of unity).

    ``mollifier``: u(x) = delta^2 u0(delta x) with
    u0 = c (1 - x1^2)^3_+ (1 - x2^2)^3_+ and unit integral.
    """

    kind: str = PLATEAU
    delta: float = 1.0 / 3200.0
    relaxed: bool = False

    def __post_init__(self):
        if self.kind not in (PLATEAU, MOLLIFIER):
            raise ConfigError("profile.kind", f"unknown profile kind {self.kind!r}")
        if not (self.delta > 0):
            raise ConfigError("profile.delta", "must be positive")
        limit = 0.25 if self.relaxed else self.delta0
        if self.kind == PLATEAU and self.delta >= 0.5:
            raise ConfigError("profile.delta", "plateau width requires delta < 1/2")
        if self.delta > limit:
            raise ConfigError(
                "profile.delta",
                f"delta={self.delta} exceeds {'relaxed cap 0.25' if self.relaxed else f'delta0={self.delta0:.3g}'}",
            )

    # -- constants ---------------------------------------------------------
    @property
    def delta0(self) -> float:
        if self.kind == PLATEAU:
            return 1.0 / 3200.0
        return 1.0 / (640.0 + 32.0 * mollifier_base_grad_sup() ** 2)

    @property
    def compliant(self) -> bool:
        return self.delta <= self.delta0

    @property
    def c_delta(self) -> float:
        """Independence distance of the field."""
        return 1.5 if self.kind == PLATEAU else 1.0 / self.delta

    @property
    def support_radius(self) -> float:
        return 0.5 + self.delta if self.kind == PLATEAU else 1.0 / self.delta

    @property
    def base_grad_sup(self) -> float:
        """||grad u0||_inf for the mollifier; nan for the plateau."""
        return mollifier_base_grad_sup() if self.kind == MOLLIFIER else float("nan")

    @property
    def factor_sup(self) -> float:
        return 1.0 if self.kind == PLATEAU else self.delta * _MOLL_KAPPA

    def grad_sup(self) -> float:
        """sup |grad u| (Euclidean)."""
        if self.kind == PLATEAU:
            return 0.75 / self.delta
        return self.delta ** 3 * mollifier_base_grad_sup()

    def breakpoints(self) -> np.ndarray:
        """Points where the 1D factor g changes polynomial piece."""
        d = self.delta
        if self.kind == PLATEAU:
            return np.array([-0.5 - d, -0.5 + d, 0.5 - d, 0.5 + d])
        return np.array([-1.0 / d, 1.0 / d])

    # -- 1D factor g and its antiderivatives ---------------------------------
    def g(self, t):
        t = np.asarray(t, dtype=float)
        d = self.delta
        if self.kind == PLATEAU:
            a = np.clip((0.5 + d - np.abs(t)) / (2 * d), 0.0, 1.0)
            return a * a * (3.0 - 2.0 * a)
        return d * _MOLL_KAPPA * _moll_p(d * t)

    def dg(self, t):
        t = np.asarray(t, dtype=float)
        d = self.delta
        if self.kind == PLATEAU:
            a = (0.5 + d - np.abs(t)) / (2 * d)
            inside = (a > 0) & (a < 1)
            return np.where(inside, -np.sign(t) * 6.0 * a * (1 - a) / (2 * d), 0.0)
        return d * d * _MOLL_KAPPA * _moll_dp(d * t)

    def G(self, t):
        """Antiderivative of g vanishing at -inf (rises from 0 to 1)."""
        t = np.asarray(t, dtype=float)
        d = self.delta
        if self.kind == PLATEAU:
            def lower(s):
                a = np.clip((0.5 + d + s) / (2 * d), 0.0, 1.0)
                ramp = 2 * d * a * a * a * (1.0 - 0.5 * a)
                return np.where(s <= -0.5 + d, ramp, s + 0.5)
            neg = t <= 0
            tn = np.where(neg, t, -t)
            val = lower(tn)
            return np.where(neg, val, 1.0 - val)
        return _MOLL_KAPPA * _moll_P(d * t)

    def __call__(self, x1, x2):
        return self.g(x1) * self.g(x2)

    def grad(self, x1, x2):
        return self.dg(x1) * self.g(x2), self.g(x1) * self.dg(x2)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileFunction":
        return cls(**d)


def profile_eval(profile: ProfileFunction, x) -> float:
    """u(x) for a single point or an array of points with trailing axis 2."""
    x = np.asarray(x, dtype=float)
    return profile(x[..., 0], x[..., 1])


# ---------------------------------------------------------------------------
# deterministic descriptors (background field and potential)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldDescriptor:
    """Scalar function on R^2: constant, Z^2-periodic trig polynomial, or a Gaussian bump.

    trig: f(x) = const + sum a cos(2 pi n.x) + b sin(2 pi n.x), terms (n1, n2, a, b).
    bump: f(x) = const + amp * exp(-|x - center|^2 / width^2) (not periodic).
    """

    kind: str = "constant"
    const: float = 0.0
    terms: tuple = ()
    amp: float = 0.0
    center: tuple = (0.0, 0.0)
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "trig", "bump"):
            raise ConfigError("kind", f"unknown descriptor kind {self.kind!r}")
        terms = tuple(tuple(float(v) for v in t) for t in self.terms)
        for t in terms:
            if len(t) != 4 or t[0] != int(t[0]) or t[1] != int(t[1]):
                raise ConfigError("terms", "each term is (n1, n2, a, b) with integer n")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def periodic(self) -> bool:
        return self.kind in ("constant", "trig")

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant" or (self.kind == "trig" and not self.terms)

    def _coeffs(self):
        for n1, n2, a, b in self.terms:
            yield int(n1), int(n2), complex(a, -b)

    def __call__(self, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        out = np.full(np.broadcast(x1, x2).shape, float(self.const))
        if self.kind == "trig":
            for n1, n2, c in self._coeffs():
                out = out + np.real(c * np.exp(2j * np.pi * (n1 * x1 + n2 * x2)))
        elif self.kind == "bump":
            r2 = (x1 - self.center[0]) ** 2 + (x2 - self.center[1]) ** 2
            out = out + self.amp * np.exp(-r2 / self.width ** 2)
        return out

    def grad(self, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        shape = np.broadcast(x1, x2).shape
        g1 = np.zeros(shape)
        g2 = np.zeros(shape)
        if self.kind == "trig":
            for n1, n2, c in self._coeffs():
                e = 2j * np.pi * c * np.exp(2j * np.pi * (n1 * x1 + n2 * x2))
                g1 = g1 + np.real(n1 * e)
                g2 = g2 + np.real(n2 * e)
        elif self.kind == "bump":
            f = self(x1, x2) - self.const
            g1 = -2 * (x1 - self.center[0]) / self.width ** 2 * f
            g2 = -2 * (x2 - self.center[1]) / self.width ** 2 * f
        return g1, g2

    def sup_bound(self) -> float:
        if self.kind == "trig":
            return abs(self.const) + sum(math.hypot(a, b) for _, _, a, b in self.terms)
        if self.kind == "bump":
            return abs(self.const) + abs(self.amp)
        return abs(self.const)

    def range_bound(self) -> tuple[float, float]:
        """Rigorous [lower, upper] envelope of the function."""
        if self.kind == "trig":
            s = sum(math.hypot(a, b) for _, _, a, b in self.terms)
            return self.const - s, self.const + s
        if self.kind == "bump":
            return self.const + min(0.0, self.amp), self.const + max(0.0, self.amp)
        return self.const, self.const

    @staticmethod
    def _seg(n, p, q):
        # int_p^q exp(2 pi i n s) ds
        if n == 0:
            return q - p
        w = 2j * np.pi * n
        return (np.exp(w * q) - np.exp(w * p)) / w

    def col_integral(self, p, q, x2):
        """int_p^q f(s, x2) ds."""
        p, q, x2 = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (p, q, x2)))
        out = self.const * (q - p)
        if self.kind == "trig":
            for n1, n2, c in self._coeffs():
                out = out + np.real(c * self._seg(n1, p, q) * np.exp(2j * np.pi * n2 * x2))
        elif self.kind == "bump":
            w = self.width
            e2 = np.exp(-((x2 - self.center[1]) / w) ** 2)
            e1 = 0.5 * math.sqrt(math.pi) * w * (special.erf((q - self.center[0]) / w)
                                                  - special.erf((p - self.center[0]) / w))
            out = out + self.amp * e1 * e2
        return out

    def rect_flux(self, a1, b1, a2, b2):
        """int_{a1}^{b1} int_{a2}^{b2} f."""
        a1, b1, a2, b2 = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a1, b1, a2, b2)))
        out = self.const * (b1 - a1) * (b2 - a2)
        if self.kind == "trig":
            for n1, n2, c in self._coeffs():
                out = out + np.real(c * self._seg(n1, a1, b1) * self._seg(n2, a2, b2))
        elif self.kind == "bump":
            w = self.width
            k = 0.5 * math.sqrt(math.pi) * w
            c0, c1 = self.center
            i1 = k * (special.erf((b1 - c0) / w) - special.erf((a1 - c0) / w))
            i2 = k * (special.erf((b2 - c1) / w) - special.erf((a2 - c1) / w))
            out = out + self.amp * i1 * i2
        return out

    def translated(self, a) -> "FieldDescriptor":
        """x -> f(x - a)."""
        if self.kind == "bump":
            return dataclasses.replace(self, center=(self.center[0] + a[0], self.center[1] + a[1]))
        if self.kind == "trig":
            terms = []
            for n1, n2, aa, bb in self.terms:
                c = complex(aa, -bb) * np.exp(-2j * np.pi * (n1 * a[0] + n2 * a[1]))
                terms.append((n1, n2, c.real, -c.imag))
            return dataclasses.replace(self, terms=tuple(terms))
        return self

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "const": self.const}
        if self.kind == "trig":
            d["terms"] = [list(t) for t in self.terms]
        if self.kind == "bump":
            d.update(amp=self.amp, center=list(self.center), width=self.width)
        return d

    @classmethod
    def from_dict(cls, d) -> "FieldDescriptor":
        if isinstance(d, (int, float)):
            return cls("constant", float(d))
        d = dict(d)
        if "value" in d:
            d["const"] = d.pop("value")
        if "terms" in d:
            d["terms"] = tuple(tuple(t) for t in d["terms"])
        if "center" in d:
            d["center"] = tuple(d["center"])
        return cls(**d)


def constant(value: float) -> FieldDescriptor:
    return FieldDescriptor("constant", float(value))


# ---------------------------------------------------------------------------
# disorder distribution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DensityFamily:
    """Polynomial bump v(s) = c (1 + s)^tau_pow (1 - s)^upper_pow on [-1, 1].

    ``upper_pow`` defaults to ``tau_pow`` which makes v symmetric (zero mean).
    The lower tail obeys nu(h) <= c_v h^(tau_pow + 1).
    """

    tau_pow: float = 3.0
    upper_pow: float | None = None

    def __post_init__(self):
        if self.upper_pow is None:
            object.__setattr__(self, "upper_pow", float(self.tau_pow))
        if self.tau_pow < 2 or self.upper_pow < 2:
            raise ConfigError("density_family.tau_pow", "exponents must be >= 2")

    @property
    def a(self) -> float:
        return self.tau_pow + 1.0

    @property
    def b(self) -> float:
        return self.upper_pow + 1.0

    @property
    def norm(self) -> float:
        return 1.0 / (2.0 ** (self.a + self.b - 1.0) * special.beta(self.a, self.b))

    @property
    def is_c2(self) -> bool:
        # v'' vanishes at both endpoints iff both exponents exceed 2
        return self.tau_pow > 2 and self.upper_pow > 2

    def pdf(self, s, sigma: float = 1.0):
        s = np.asarray(s, dtype=float) / sigma
        inside = np.abs(s) <= 1.0
        sc = np.clip(s, -1.0, 1.0)
        return np.where(inside, self.norm * (1 + sc) ** self.tau_pow * (1 - sc) ** self.upper_pow, 0.0) / sigma

    def pdf_dd(self, s, sigma: float = 1.0):
        """Second derivative of the scaled density."""
        s = np.asarray(s, dtype=float) / sigma
        p, q = self.tau_pow, self.upper_pow
        sc = np.clip(s, -1.0, 1.0)
        x, y = 1 + sc, 1 - sc
        with np.errstate(invalid="ignore", divide="ignore"):
            val = (p * (p - 1) * x ** (p - 2) * y ** q
                   - 2 * p * q * x ** (p - 1) * y ** (q - 1)
                   + q * (q - 1) * x ** p * y ** (q - 2))
        val = np.where(np.abs(s) <= 1.0, np.nan_to_num(val), 0.0)
        return self.norm * val / sigma ** 3

    def cdf(self, s, sigma: float = 1.0):
        s = np.clip(np.asarray(s, dtype=float) / sigma, -1.0, 1.0)
        return special.betainc(self.a, self.b, (s + 1.0) / 2.0)

    def ppf(self, u, sigma: float = 1.0):
        return sigma * (2.0 * special.betaincinv(self.a, self.b, np.asarray(u, dtype=float)) - 1.0)

    def nu(self, h):
        """Lower-tail mass nu(h) = int_{-1}^{-1+h} v at level 0."""
        h = np.clip(np.asarray(h, dtype=float), 0.0, 2.0)
        return special.betainc(self.a, self.b, h / 2.0)

    def tail_constant(self) -> float:
        """c_v with nu(h) <= c_v h^(tau_pow+1) for all h >= 0."""
        hs = np.linspace(1e-6, 2.0, 4001)
        return float(np.max(self.nu(hs) / hs ** (self.tau_pow + 1)))

    def mean(self, sigma: float = 1.0) -> float:
        return sigma * (2.0 * self.a / (self.a + self.b) - 1.0)

    def to_dict(self) -> dict:
        return {"tau_pow": self.tau_pow, "upper_pow": self.upper_pow}

    @classmethod
    def from_dict(cls, d) -> "DensityFamily":
        return cls(**d)


# ---------------------------------------------------------------------------
# disorder spec
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DisorderSpec:
    b0: float = 2.0
    K0: float = 4.0
    K1: float = 4.0
    mu: float = 1.0
    rho: float = 1.0
    k_max: int = 0
    density_family: DensityFamily = field(default_factory=DensityFamily)
    iid: bool = True
    profile: ProfileFunction = field(default_factory=ProfileFunction)
    B_det: FieldDescriptor = field(default_factory=lambda: constant(4.0))
    V: FieldDescriptor = field(default_factory=lambda: constant(0.0))
    site_cap: int = DEFAULT_SITE_CAP

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.b0 > 0:
            raise ConfigError("b0", "must be positive")
        if not self.K0 > 3:
            raise ConfigError("K0", f"K0 must exceed 3 (got {self.K0})")
        if not self.K1 >= 1:
            raise ConfigError("K1", "K1 must be >= 1")
        if not (0.0 <= self.mu <= 1.0):
            raise ConfigError("mu", "coupling must lie in [0, 1]")
        if not self.rho > math.log(2.0):
            raise ConfigError("rho", f"rho must exceed ln 2 (got {self.rho})")
        if int(self.k_max) != self.k_max or self.k_max < 0:
            raise ConfigError("k_max", "nonnegative integer required")
        if (1.0 - math.exp(-self.rho)) * self.b0 < 1.0 - 1e-12:
            raise ConfigError("b0", "requires (1 - exp(-rho)) b0 >= 1")
        lo, hi = self.B_det.range_bound()
        if lo < 2 * self.b0 - 1e-12 or hi > (self.K0 - 1) * self.b0 + 1e-12:
            raise ConfigError("B_det", f"B_det range [{lo}, {hi}] outside [2 b0, (K0 - 1) b0]")
        if self.V.sup_bound() > self.b0 / 4 + 1e-12:
            raise ConfigError("V", "||V||_inf must not exceed b0/4")

    # -- derived quantities -----------------------------------------------------
    def sigma(self, k: int) -> float:
        return math.exp(-self.rho * k)

    def m_minus(self, k: int) -> float:
        return -self.sigma(k)

    def m_plus(self, k: int) -> float:
        return self.sigma(k)

    @property
    def M_minus(self) -> float:
        return sum(self.m_minus(k) for k in range(self.k_max + 1))

    @property
    def M_plus(self) -> float:
        return sum(self.m_plus(k) for k in range(self.k_max + 1))

    @property
    def sigma_sum(self) -> float:
        return 1.0 / (1.0 - math.exp(-self.rho))

    def site_scale(self, k: int, i1, i2):
        """Per-site scale factor of the density (1 unless iid is off)."""
        if self.iid:
            return np.ones(np.broadcast(i1, i2).shape)
        return 1.0 - 0.25 * ((np.asarray(i1) + np.asarray(i2)) % 2)

    def to_dict(self) -> dict:
        return {
            "b0": self.b0, "K0": self.K0, "K1": self.K1, "mu": self.mu, "rho": self.rho,
            "k_max": int(self.k_max), "density_family": self.density_family.to_dict(),
            "iid": self.iid, "profile": self.profile.to_dict(),
            "B_det": self.B_det.to_dict(), "V": self.V.to_dict(), "site_cap": self.site_cap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DisorderSpec":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        for key, kind in (("density_family", DensityFamily), ("profile", ProfileFunction),
                          ("B_det", FieldDescriptor), ("V", FieldDescriptor)):
            if key not in d:
                continue
            try:
                d[key] = kind.from_dict(d[key])
            except ConfigError as exc:
                name = exc.field.split(".")[-1]
                raise ConfigError(f"{key}.{name}", str(exc).split(": ", 1)[-1]) from None
            except TypeError as exc:
                raise ConfigError(key, str(exc)) from None
        for key in ("b0", "K0", "K1", "mu", "rho"):
            if key in d and not isinstance(d[key], (int, float)):
                raise ConfigError(key, "must be a number")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "DisorderSpec":
        return cls.from_dict(json.loads(s))


def truncation_tail(spec: DisorderSpec) -> float:
    """Sup-norm bound of the discarded levels k > k_max."""
    return math.exp(-spec.rho * (spec.k_max + 1)) / (1.0 - math.exp(-spec.rho))


def density_eval(spec: DisorderSpec, k: int, s) -> np.ndarray:
    """v^(k)(s) = sigma^-1 v(s / sigma)."""
    return spec.density_family.pdf(s, spec.sigma(k))


def second_derivative_mass(spec: DisorderSpec, k: int) -> float:
    """int |d^2 v^(k) / ds^2| ds by adaptive quadrature."""
    sig = spec.sigma(k)
    fam = spec.density_family
    # split at the interior zeros of v'' for an accurate |.| integral
    xs = np.linspace(-sig, sig, 20001)
    vals = fam.pdf_dd(xs, sig)
    idx = np.nonzero(np.diff(np.sign(vals)))[0]
    roots = [optimize.brentq(lambda t: float(fam.pdf_dd(t, sig)), xs[i], xs[i + 1]) for i in idx]
    pts = [-sig, *roots, sig]
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        val, _ = integrate.quad(lambda t: float(fam.pdf_dd(t, sig)), a, b, epsabs=1e-13, epsrel=1e-12)
        total += abs(val)
    return total


# ---------------------------------------------------------------------------
# counter-based sampling
# ---------------------------------------------------------------------------

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15))
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def counter_uniform(seed: int, k, i1, i2) -> np.ndarray:
    """Uniform(0,1) value that is a pure function of (seed, k, i1, i2)."""
    with np.errstate(over="ignore"):
        s = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        kk = np.uint64(int(k) & 0xFFFFFFFFFFFFFFFF)
        a = np.asarray(i1, dtype=np.int64).view(np.uint64)
        b = np.asarray(i2, dtype=np.int64).view(np.uint64)
        h = _splitmix(s ^ _splitmix(kk + np.uint64(0x632BE59BD9B4E019)))
        h = _splitmix(h ^ a)
        h = _splitmix(h ^ (b * np.uint64(0xD6E8FEB86659FD93)))
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def derive_seed(master: int, index: int) -> int:
    """Per-realization seed derived from the master seed (splittable counter)."""
    with np.errstate(over="ignore"):
        v = _splitmix(np.uint64(int(master) & 0xFFFFFFFFFFFFFFFF) ^ _splitmix(np.uint64(index)))
    return int(v)


# ---------------------------------------------------------------------------
# realizations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Closed axis-parallel rectangle [x0, x1] x [y0, y1]."""

    x0: float
    x1: float
    y0: float
    y1: float

    @classmethod
    def square(cls, L: float, center=(0.0, 0.0)) -> "Box":
        return cls(center[0] - L / 2, center[0] + L / 2, center[1] - L / 2, center[1] + L / 2)

    def padded(self, c: float) -> "Box":
        return Box(self.x0 - c, self.x1 + c, self.y0 - c, self.y1 + c)

    def union(self, other: "Box") -> "Box":
        return Box(min(self.x0, other.x0), max(self.x1, other.x1),
                   min(self.y0, other.y0), max(self.y1, other.y1))

    def translated(self, a) -> "Box":
        return Box(self.x0 + a[0], self.x1 + a[0], self.y0 + a[1], self.y1 + a[1])

    def contains(self, x1, x2, tol: float = 1e-12):
        return ((x1 >= self.x0 - tol) & (x1 <= self.x1 + tol)
                & (x2 >= self.y0 - tol) & (x2 <= self.y1 + tol))

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


def padded_box(spec: DisorderSpec, L: float, center=(0.0, 0.0)) -> Box:
    return Box.square(L, center).padded(spec.profile.c_delta)


def lattice_range(box: Box, k: int):
    """Integer index ranges (i1_lo, i1_hi, i2_lo, i2_hi) of (2^-k Z)^2 within box."""
    s = 2.0 ** k
    eps = 1e-9
    return (math.ceil(box.x0 * s - eps), math.floor(box.x1 * s + eps),
            math.ceil(box.y0 * s - eps), math.floor(box.y1 * s + eps))


@dataclass(frozen=True)
class LevelValues:
    k: int
    i1_lo: int
    i2_lo: int
    values: np.ndarray  # shape (n1, n2), values[a, b] at index (i1_lo + a, i2_lo + b)

    @property
    def eps(self) -> float:
        return 2.0 ** -self.k

    @property
    def z1(self) -> np.ndarray:
        return (self.i1_lo + np.arange(self.values.shape[0])) * self.eps

    @property
    def z2(self) -> np.ndarray:
        return (self.i2_lo + np.arange(self.values.shape[1])) * self.eps


class DisorderRealization:
    """Coefficients omega_z^(k) on a padded box; immutable after construction."""

    def __init__(self, spec: DisorderSpec, box: Box, seed: int | None, levels: Sequence[LevelValues],
                 shift=(0, 0)):
        self.spec = spec
        self.box = box
        self.seed = seed
        self.levels = tuple(levels)
        self.shift = tuple(int(v) for v in shift)
        for lv in self.levels:
            lv.values.setflags(write=False)

    # -- construction ---------------------------------------------------------
    @staticmethod
    def _ranges(spec: DisorderSpec, box: Box):
        ranges = [lattice_range(box, k) for k in range(spec.k_max + 1)]
        total = sum(max(0, r[1] - r[0] + 1) * max(0, r[3] - r[2] + 1) for r in ranges)
        if total > spec.site_cap:
            raise MemoryError(f"{total} lattice sites exceed the configured cap {spec.site_cap}")
        return ranges

    @classmethod
    def sample(cls, spec: DisorderSpec, box: Box, seed: int, shift=(0, 0)) -> "DisorderRealization":
        levels = []
        for k, (a0, a1, b0, b1) in enumerate(cls._ranges(spec, box)):
            i1 = np.arange(a0, a1 + 1)[:, None]
            i2 = np.arange(b0, b1 + 1)[None, :]
            # translated realizations read the parent coefficient at z - a
            j1 = i1 - shift[0] * 2 ** k
            j2 = i2 - shift[1] * 2 ** k
            u = counter_uniform(seed, k, *np.broadcast_arrays(j1, j2))
            sig = spec.sigma(k) * spec.site_scale(k, j1, j2)
            vals = sig * (2.0 * special.betaincinv(spec.density_family.a, spec.density_family.b, u) - 1.0)
            levels.append(LevelValues(k, a0, b0, np.ascontiguousarray(vals)))
        return cls(spec, box, seed, levels, shift)

    @classmethod
    def from_function(cls, spec: DisorderSpec, box: Box, fn) -> "DisorderRealization":
        """Deterministic configuration; ``fn(k, z1, z2)`` gives omega (arrays)."""
        levels = []
        for k, (a0, a1, b0, b1) in enumerate(cls._ranges(spec, box)):
            eps = 2.0 ** -k
            z1 = (np.arange(a0, a1 + 1) * eps)[:, None]
            z2 = (np.arange(b0, b1 + 1) * eps)[None, :]
            vals = np.broadcast_to(np.asarray(fn(k, z1, z2), dtype=float), (a1 - a0 + 1, b1 - b0 + 1))
            levels.append(LevelValues(k, a0, b0, np.array(vals)))
        return cls(spec, box, None, levels)

    @classmethod
    def zeros(cls, spec: DisorderSpec, box: Box) -> "DisorderRealization":
        return cls.from_function(spec, box, lambda k, z1, z2: 0.0)

    @classmethod
    def extremal(cls, spec: DisorderSpec, box: Box, sign: int) -> "DisorderRealization":
        """All omega_z^(k) at m_-^(k) (sign < 0) or m_+^(k) (sign > 0)."""
        return cls.from_function(spec, box, lambda k, z1, z2: math.copysign(spec.sigma(k), sign))

    # -- queries --------------------------------------------------------------
    def value(self, k: int, z) -> float:
        lv = self.levels[k]
        s = 2 ** k
        i1 = int(round(z[0] * s)) - lv.i1_lo
        i2 = int(round(z[1] * s)) - lv.i2_lo
        if not (0 <= i1 < lv.values.shape[0] and 0 <= i2 < lv.values.shape[1]):
            raise KeyError(f"site {(k, tuple(z))} outside the realization box")
        return float(lv.values[i1, i2])

    def items(self) -> Iterable[tuple[int, float, float, float]]:
        for lv in self.levels:
            Z1, Z2 = np.meshgrid(lv.z1, lv.z2, indexing="ij")
            for z1, z2, w in zip(Z1.ravel(), Z2.ravel(), lv.values.ravel()):
                yield lv.k, float(z1), float(z2), float(w)

    @property
    def n_sites(self) -> int:
        return sum(lv.values.size for lv in self.levels)

    def with_value(self, k: int, z, omega: float) -> "DisorderRealization":
        """Copy with a single coefficient replaced."""
        levels = list(self.levels)
        lv = levels[k]
        s = 2 ** k
        i1 = int(round(z[0] * s)) - lv.i1_lo
        i2 = int(round(z[1] * s)) - lv.i2_lo
        vals = np.array(lv.values)
        vals[i1, i2] = omega
        levels[k] = LevelValues(k, lv.i1_lo, lv.i2_lo, vals)
        return DisorderRealization(self.spec, self.box, self.seed, levels, self.shift)

    def translated(self, a) -> "DisorderRealization":
        """(T_a omega)_z = omega_{z - a} for an integer shift a."""
        a = (int(a[0]), int(a[1]))
        levels = [LevelValues(lv.k, lv.i1_lo + a[0] * 2 ** lv.k, lv.i2_lo + a[1] * 2 ** lv.k, lv.values)
                  for lv in self.levels]
        return DisorderRealization(self.spec, self.box.translated(a), self.seed, levels,
                                   (self.shift[0] + a[0], self.shift[1] + a[1]))

    # -- export ---------------------------------------------------------------
    def to_bytes(self) -> bytes:
        rows = np.array(list(self.items()), dtype=_ROW_DTYPE) if self.n_sites else np.zeros(0, _ROW_DTYPE)
        seed = 0 if self.seed is None else int(self.seed) & 0xFFFFFFFFFFFFFFFF
        return EXPORT_MAGIC + struct.pack("<IQ", EXPORT_VERSION, seed) + rows.tobytes()

    def export(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @staticmethod
    def read_table(path_or_bytes):
        raw = path_or_bytes if isinstance(path_or_bytes, bytes) else open(path_or_bytes, "rb").read()
        if raw[:4] != EXPORT_MAGIC:
            raise ValueError("bad magic")
        version, seed = struct.unpack("<IQ", raw[4:16])
        return version, seed, np.frombuffer(raw[16:], dtype=_ROW_DTYPE)


def sample_disorder(spec: DisorderSpec, box: Box, seed: int) -> DisorderRealization:
    return DisorderRealization.sample(spec, box, seed)


# ---------------------------------------------------------------------------
# field evaluation
# ---------------------------------------------------------------------------

_CHUNK = 16384


def _level_contract(F1: np.ndarray, W: np.ndarray, F2: np.ndarray) -> np.ndarray:
    return np.einsum("rj,rj->r", F1 @ W, F2)


class MagneticFieldView:
    """Evaluation of B, V and related integrals for one realization."""

    def __init__(self, spec: DisorderSpec, realization: DisorderRealization):
        self.spec = spec
        self.realization = realization
        self.box = realization.box
        self.profile = spec.profile
        self.mu = spec.mu
        if realization.shift != (0, 0):
            a = realization.shift
            self.B_det = spec.B_det.translated(a)
            self.V_desc = spec.V.translated(a)
        else:
            self.B_det = spec.B_det
            self.V_desc = spec.V

    # -- helpers ----------------------------------------------------------------
    def _check(self, x1, x2):
        inside = self.box.contains(x1, x2, tol=1e-9)
        if not np.all(inside):
            raise ValueError("query outside the padded box where the realization is defined")

    def _active_levels(self):
        if self.mu == 0:
            return []
        return [lv for lv in self.realization.levels if np.any(lv.values)]

    def _levels_sum(self, f1, f2, x1, x2, check=True):
        """mu * sum_k sum_z omega f1((x1 - z1)/eps, eps) f2((x2 - z2)/eps, eps)."""
        x1, x2 = np.broadcast_arrays(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
        shape = x1.shape
        a, b = x1.ravel(), x2.ravel()
        out = np.zeros(a.size)
        for lv in self._active_levels():
            eps = lv.eps
            z1, z2 = lv.z1, lv.z2
            for s in range(0, a.size, _CHUNK):
                sl = slice(s, s + _CHUNK)
                F1 = f1((a[sl, None] - z1[None, :]) / eps, eps)
                F2 = f2((b[sl, None] - z2[None, :]) / eps, eps)
                out[sl] += _level_contract(F1, lv.values, F2)
        return self.mu * out.reshape(shape)

    # -- fields -----------------------------------------------------------------
    def B(self, x1, x2, check: bool = True):
        if check:
            self._check(x1, x2)
        g = self.profile.g
        return self.B_det(x1, x2) + self._levels_sum(lambda t, e: g(t), lambda t, e: g(t), x1, x2)

    def B_random(self, x1, x2):
        g = self.profile.g
        return self._levels_sum(lambda t, e: g(t), lambda t, e: g(t), x1, x2)

    def V(self, x1, x2):
        return self.V_desc(x1, x2)

    def grad_B(self, x1, x2):
        p = self.profile
        d1 = self._levels_sum(lambda t, e: p.dg(t) / e, lambda t, e: p.g(t), x1, x2)
        d2 = self._levels_sum(lambda t, e: p.g(t), lambda t, e: p.dg(t) / e, x1, x2)
        g1, g2 = self.B_det.grad(x1, x2)
        return g1 + d1, g2 + d2

    def col_integral(self, y1, x1, x2):
        """int_{y1}^{x1} B(s, x2) ds in closed form."""
        G, g = self.profile.G, self.profile.g
        y1, x1, x2 = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (y1, x1, x2)))
        det = self.B_det.col_integral(y1, x1, x2)
        hi = self._levels_sum(lambda t, e: e * G(t), lambda t, e: g(t), x1, x2)
        lo = self._levels_sum(lambda t, e: e * G(t), lambda t, e: g(t), y1, x2)
        return det + hi - lo

    def rect_flux(self, a1, b1, a2, b2):
        """Flux of B through [a1, b1] x [a2, b2] in closed form."""
        G = self.profile.G
        a1, b1, a2, b2 = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a1, b1, a2, b2)))
        total = self.B_det.rect_flux(a1, b1, a2, b2)
        shape = a1.shape
        A1, B1, A2, B2 = (v.ravel() for v in (a1, b1, a2, b2))
        out = np.zeros(A1.size)
        for lv in self._active_levels():
            eps = lv.eps
            for s in range(0, A1.size, _CHUNK):
                sl = slice(s, s + _CHUNK)
                F1 = eps * (G((B1[sl, None] - lv.z1) / eps) - G((A1[sl, None] - lv.z1) / eps))
                F2 = eps * (G((B2[sl, None] - lv.z2) / eps) - G((A2[sl, None] - lv.z2) / eps))
                out[sl] += _level_contract(F1, lv.values, F2)
        return total + self.mu * out.reshape(shape)

    def breakpoints(self, axis: int, lo: float, hi: float) -> np.ndarray:
        """Coordinates in [lo, hi] where B changes polynomial piece along ``axis``."""
        pts = []
        bp = self.profile.breakpoints()
        for lv in self._active_levels():
            z = lv.z1 if axis == 0 else lv.z2
            cand = (z[:, None] + lv.eps * bp[None, :]).ravel()
            pts.append(cand[(cand > lo) & (cand < hi)])
        return np.unique(np.concatenate(pts)) if pts else np.zeros(0)

    def field_bounds(self) -> tuple[float, float]:
        tail = truncation_tail(self.spec)
        return self.spec.b0 - tail, self.spec.K0 * self.spec.b0 + tail


def field_eval(view: MagneticFieldView, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return view.B(x[..., 0], x[..., 1])


def make_field(spec: DisorderSpec, L: float, seed: int | None, center=(0.0, 0.0)) -> MagneticFieldView:
    """Convenience: sample on the padded box of Lambda_L(center) and wrap."""
    box = padded_box(spec, L, center)
    real = (DisorderRealization.zeros(spec, box) if seed is None
            else DisorderRealization.sample(spec, box, seed))
    return MagneticFieldView(spec, real)


# ---------------------------------------------------------------------------
# spectrum-location constants
# ---------------------------------------------------------------------------

def _U_cell(profile: ProfileFunction, t: np.ndarray) -> np.ndarray:
    """1D periodisation sum_z g(t - z)."""
    r = int(math.ceil(profile.support_radius)) + 1
    return sum(profile.g(t - j) for j in range(-r, r + 1))


def _dU_cell(profile: ProfileFunction, t, order: int) -> np.ndarray:
    r = int(math.ceil(profile.support_radius)) + 1
    if order == 0:
        return _U_cell(profile, t)
    if order == 1:
        return sum(profile.dg(t - j) for j in range(-r, r + 1))
    raise ValueError(order)


def _agree(cur, prev, rtol):
    cur, prev = np.asarray(cur, dtype=float), np.asarray(prev, dtype=float)
    same_inf = np.isinf(cur) & (cur == prev)
    with np.errstate(invalid="ignore"):
        close = np.abs(cur - prev) <= rtol * np.maximum(np.abs(cur), np.abs(prev)) + 1e-9
    return bool(np.all(same_inf | close))


def _refine(fn, n0: int = 16, rtol: float = 1e-4, n_max: int = 2048):
    """Dyadic refinement until two successive levels agree."""
    prev = fn(n0)
    n = n0
    while n < n_max:
        n *= 2
        cur = fn(n)
        if _agree(cur, prev, rtol):
            return cur, n
        prev = cur
    return prev, n


def envelope_constants(view_or_spec) -> dict:
    """c_u, M_-/+, K2, K3, E_inf, E_sup and the upper bound for inf Sigma.

    Infima use dyadic grid refinement over one unit cell until two successive
    levels agree to 1e-4 relative.  Derivative sup-norms use periodic finite
    differences on the same grids.
    """
    spec = view_or_spec.spec if isinstance(view_or_spec, MagneticFieldView) else view_or_spec
    if not (spec.B_det.periodic and spec.V.periodic):
        raise ValueError("envelope constants require Z^2-periodic B_det and V descriptors")
    prof = spec.profile
    mu = spec.mu
    kmin = spec.k_max

    def grid(n):
        t = np.arange(n) / n
        return np.meshgrid(t, t, indexing="ij")

    def Uval(X1, X2, scale=1.0):
        return _U_cell(prof, X1 * scale) * _U_cell(prof, X2 * scale)

    def c_u_fn(n):
        X1, X2 = grid(n)
        return float(Uval(X1, X2).min())

    def B_ext(X1, X2, sign):
        out = spec.B_det(X1, X2)
        for k in range(spec.k_max + 1):
            out = out + mu * math.copysign(spec.sigma(k), sign) * Uval(X1, X2, 2.0 ** k)
        return out

    def E_fn(n):
        X1, X2 = grid(n)
        V = spec.V(X1, X2)
        return np.array([float((B_ext(X1, X2, -1) + V).min()), float((B_ext(X1, X2, +1) + V).min())])

    def fd(F, n):
        hh = 1.0 / n
        d1 = (np.roll(F, -1, 0) - np.roll(F, 1, 0)) / (2 * hh)
        d2 = (np.roll(F, -1, 1) - np.roll(F, 1, 1)) / (2 * hh)
        d11 = (np.roll(F, -1, 0) - 2 * F + np.roll(F, 1, 0)) / hh ** 2
        d22 = (np.roll(F, -1, 1) - 2 * F + np.roll(F, 1, 1)) / hh ** 2
        d12 = (np.roll(np.roll(F, -1, 0), -1, 1) - np.roll(np.roll(F, -1, 0), 1, 1)
               - np.roll(np.roll(F, 1, 0), -1, 1) + np.roll(np.roll(F, 1, 0), 1, 1)) / (4 * hh ** 2)
        return [np.abs(d).max() for d in (d1, d2)], [np.abs(d).max() for d in (d11, d22, d12)]

    def K_fn(n):
        X1, X2 = grid(n)
        U1, U2 = fd(Uval(X1, X2), n)
        Bd1, Bd2 = fd(spec.B_det(X1, X2), n)
        V1, V2 = fd(spec.V(X1, X2), n)
        k2 = max(U1[i] / (1 - 2 * math.exp(-spec.rho)) + Bd1[i] + V1[i] for i in range(2))
        if 4 * math.exp(-spec.rho) < 1:
            k3 = 2 * max(Bd2[i] + U2[i] / (1 - 4 * math.exp(-spec.rho)) + V2[i] for i in range(3))
        else:
            k3 = float("inf")
        return np.array([k2, k3])

    n0 = max(16, 4 * 2 ** kmin)
    c_u, _ = _refine(c_u_fn, n0)
    (E_inf, E_sup), nE = _refine(E_fn, n0)
    (K2, K3), _ = _refine(K_fn, n0)
    b0 = spec.b0
    upper = E_inf + 4 * K2 ** 2 / b0 ** 2 + min(K2 / math.sqrt(b0), K3 / b0)
    return {
        "c_u": float(c_u), "M_minus": spec.M_minus, "M_plus": spec.M_plus,
        "K2": float(K2), "K3": float(K3), "E_inf": float(E_inf), "E_sup": float(E_sup),
        "sigma_inf_upper": float(upper), "grid_n": int(nE),
    }


def landau_ladder(spec: DisorderSpec, n_levels: int = 3) -> list[tuple[float, float]]:
    """Intervals (1 + 2n)(B_det + mu [M_-, M_+]) for constant B_det."""
    if not spec.B_det.is_constant:
        raise ValueError("Landau ladder needs a constant background field")
    b = spec.B_det.const
    return [((1 + 2 * n) * (b + spec.mu * spec.M_minus), (1 + 2 * n) * (b + spec.mu * spec.M_plus))
            for n in range(n_levels)]
