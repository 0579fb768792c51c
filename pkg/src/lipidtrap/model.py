"""Model configuration and closed-form reference solutions.

Everything in this module is pure and analytic: the drift and recovery
coefficients, the localization profiles, the characteristic flow of the
structural variable, the exact concentration time for the whole-line
supercritical regime, root finding for the drift/recovery balance, and the
Gronwall-type bound that certifies finite-time blow-up from a superlinear
integral inequality.  The PDE, particle, and diagnostics modules all consume
these as oracles.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "DomainError",
    "DriftSign",
    "DriftSpec",
    "LocalizationKind",
    "LocalizationSpec",
    "LogisticSpec",
    "ProblemSpec",
    "Profile",
    "InitialDataSpec",
    "GronwallBound",
    "drift_f",
    "logistic_g",
    "h_function",
    "find_root_h",
    "characteristic_a",
    "characteristic_vanishing_time",
    "blowup_time_Tb",
    "gronwall_T_alpha",
]


class DomainError(ValueError):
    """An argument left the mathematical domain of an operation."""


class DriftSign(str, enum.Enum):
    ACCELERATION = "acceleration"
    DECELERATION = "deceleration"


class LocalizationKind(str, enum.Enum):
    WHOLE_LINE = "whole_line"
    INTERVAL = "interval"
    SMOOTH_BUMP = "smooth_bump"
    BALL_2D = "ball_2d"


def _scalar_or_array(a, out):
    if np.ndim(a) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class DriftSpec:
    """Power-law drift on the structural variable: f(a) = +a^gamma when the
    lipid load decelerates the cell, -a^gamma when it accelerates it."""

    sign: DriftSign
    gamma: float

    def __post_init__(self):
        if not math.isfinite(self.gamma) or self.gamma < 0.0:
            raise DomainError(f"gamma must be a finite nonnegative real, got {self.gamma}")
        object.__setattr__(self, "sign", DriftSign(self.sign))

    @property
    def supercritical(self) -> bool:
        """Deceleration with gamma < 1: the structural variable can hit 0."""
        return self.sign is DriftSign.DECELERATION and self.gamma < 1.0


def drift_f(a, spec: DriftSpec):
    """Evaluate f(a) = +/- a^gamma.

    Exactly 0 at a = 0 when gamma > 0; +/-1 at a = 0 when gamma = 0.
    Negative a is a domain error.
    """
    arr = np.asarray(a, dtype=float)
    if np.any(arr < 0.0):
        raise DomainError("drift_f requires a >= 0")
    mag = arr**spec.gamma  # 0**0 == 1, matching the gamma = 0 convention
    if spec.sign is DriftSign.DECELERATION:
        return _scalar_or_array(a, mag)
    return _scalar_or_array(a, -mag)


@dataclass(frozen=True, eq=False)
class LocalizationSpec:
    """Spatial profile of the lipid-rich region."""

    kind: LocalizationKind
    delta: Optional[float] = None
    bump_points: Optional[np.ndarray] = None
    bump_values: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LocalizationKind(self.kind))
        if self.kind is LocalizationKind.INTERVAL:
            if self.delta is None or self.delta <= 0.0:
                raise DomainError("interval localization requires delta > 0")
        if self.kind is LocalizationKind.SMOOTH_BUMP:
            pts = np.asarray(self.bump_points, dtype=float)
            vals = np.asarray(self.bump_values, dtype=float)
            if pts.ndim != 1 or pts.shape != vals.shape or pts.size < 2:
                raise DomainError("smooth_bump requires matching 1d point/value tables")
            if np.any(np.diff(pts) <= 0):
                raise DomainError("smooth_bump points must be strictly increasing")
            if pts[0] < -1.0 or pts[-1] > 1.0:
                raise DomainError("smooth_bump support must lie inside [-1, 1]")
            if np.any(vals < 0.0):
                raise DomainError("smooth_bump values must be nonnegative")
            integral = np.trapezoid(vals, pts)
            if integral <= 0.0:
                raise DomainError("smooth_bump must have positive integral")
            vals = vals / integral
            if vals.max() > 1.0 + 1e-12:
                raise DomainError("smooth_bump must satisfy 0 <= psi <= 1 after unit normalization")
            object.__setattr__(self, "bump_points", pts)
            object.__setattr__(self, "bump_values", vals)

    # -- constructors ------------------------------------------------------
    @classmethod
    def whole_line(cls) -> "LocalizationSpec":
        return cls(kind=LocalizationKind.WHOLE_LINE)

    @classmethod
    def interval(cls, delta: float) -> "LocalizationSpec":
        return cls(kind=LocalizationKind.INTERVAL, delta=float(delta))

    @classmethod
    def smooth_bump(cls, points=None, values=None) -> "LocalizationSpec":
        if points is None:
            points = np.linspace(-1.0, 1.0, 2001)
            values = (1.0 - points**2) ** 2  # peak 15/16 <= 1 after normalization
        return cls(kind=LocalizationKind.SMOOTH_BUMP, bump_points=points, bump_values=values)

    @classmethod
    def ball_2d(cls) -> "LocalizationSpec":
        return cls(kind=LocalizationKind.BALL_2D)

    # -- evaluation --------------------------------------------------------
    def evaluate(self, x, y=None):
        """psi at position(s) x (and y in 2d)."""
        xs = np.asarray(x, dtype=float)
        if self.kind is LocalizationKind.WHOLE_LINE:
            out = np.ones_like(xs)
        elif self.kind is LocalizationKind.INTERVAL:
            out = np.where(np.abs(xs) <= self.delta, 1.0 / (2.0 * self.delta), 0.0)
        elif self.kind is LocalizationKind.SMOOTH_BUMP:
            out = np.interp(xs, self.bump_points, self.bump_values, left=0.0, right=0.0)
        else:  # ball in 2d
            if y is None:
                raise DomainError("ball_2d localization needs both coordinates")
            ys = np.asarray(y, dtype=float)
            out = np.where(xs**2 + ys**2 <= 1.0, 1.0, 0.0)
        return _scalar_or_array(x, out)

    @property
    def sup_value(self) -> float:
        if self.kind is LocalizationKind.INTERVAL:
            return 1.0 / (2.0 * self.delta)
        if self.kind is LocalizationKind.SMOOTH_BUMP:
            return float(self.bump_values.max())
        return 1.0


@dataclass(frozen=True)
class LogisticSpec:
    """Recovery (lipid unloading) drift lambda * a * (a_star - a); lam = 0 disables it."""

    lam: float = 0.0
    a_star: float = 1.0

    def __post_init__(self):
        if self.lam < 0.0 or not math.isfinite(self.lam):
            raise DomainError("lambda must be a finite nonnegative real")
        if self.a_star <= 0.0:
            raise DomainError("a_star must be positive")


def logistic_g(a, spec: LogisticSpec):
    """g(a): 0 for a <= 0, a (a_star - a) on [0, a_star], 0 for a >= a_star."""
    arr = np.asarray(a, dtype=float)
    inside = (arr > 0.0) & (arr < spec.a_star)
    out = np.where(inside, arr * (spec.a_star - arr), 0.0)
    return _scalar_or_array(a, out)


def h_function(a, lam: float, a_star: float, gamma: float):
    """Balance of recovery against deceleration: lambda (a_star - a) a - a^gamma on [0, a_star]."""
    arr = np.asarray(a, dtype=float)
    if np.any((arr < 0.0) | (arr > a_star)):
        raise DomainError("h_function requires a in [0, a_star]")
    out = lam * (a_star - arr) * arr - arr**gamma
    return _scalar_or_array(a, out)


def find_root_h(
    lam: float, a_star: float, gamma: float, tol: float = 1e-12, scan_points: int = 10_000
) -> Optional[float]:
    """Smallest root of h in (0, a_star), or None when no sign change exists.

    Scans a uniform grid of at least 10^4 interior points and bisects the
    first bracket.  h(0) = 0 is not counted as a root.
    """
    if tol <= 0.0:
        raise DomainError("tol must be positive")
    n = max(int(scan_points), 10_000)
    grid = np.linspace(0.0, a_star, n + 2)[1:-1]
    h = h_function(grid, lam, a_star, gamma)
    bracket = None
    for k in range(len(grid) - 1):
        if h[k] == 0.0:
            bracket = (grid[k], grid[k])
            break
        if h[k] * h[k + 1] < 0.0:
            bracket = (grid[k], grid[k + 1])
            break
    if bracket is None:
        return None
    lo, hi = bracket
    if lo == hi:
        return float(lo)
    h_scale = 1.0 + lam * a_star**2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        hm = h_function(mid, lam, a_star, gamma)
        if abs(hm) <= tol * h_scale and (hi - lo) <= tol:
            return float(mid)
        if h_function(lo, lam, a_star, gamma) * hm <= 0.0:
            hi = mid
        else:
            lo = mid
    return float(0.5 * (lo + hi))


def characteristic_a(t, a0: float, gamma: float):
    """Solution of a' = -a^gamma, a(0) = a0 > 0.

    gamma = 1 is the exponential; otherwise max(a0^(1-gamma) - (1-gamma) t, 0)^(1/(1-gamma)).
    For gamma < 1 the trajectory hits 0 at t* = a0^(1-gamma)/(1-gamma); for
    gamma >= 1 it stays positive forever.
    """
    if a0 <= 0.0 or not math.isfinite(a0):
        raise DomainError("a0 must be positive")
    ts = np.asarray(t, dtype=float)
    if np.any(ts < 0.0):
        raise DomainError("t must be nonnegative")
    if gamma < 0.0:
        raise DomainError("gamma must be nonnegative")
    if gamma == 1.0:
        out = a0 * np.exp(-ts)
    else:
        base = a0 ** (1.0 - gamma) - (1.0 - gamma) * ts
        if gamma < 1.0:
            out = np.clip(base, 0.0, None) ** (1.0 / (1.0 - gamma))
        else:
            # both terms positive: base > 0 for all t
            out = base ** (1.0 / (1.0 - gamma))
    return _scalar_or_array(t, out)


def characteristic_vanishing_time(a0: float, gamma: float) -> float:
    """t* at which the characteristic reaches 0 (inf for gamma >= 1)."""
    if a0 <= 0.0:
        raise DomainError("a0 must be positive")
    if gamma >= 1.0:
        return math.inf
    return a0 ** (1.0 - gamma) / (1.0 - gamma)


def blowup_time_Tb(a_centers, a_masses, gamma: float) -> float:
    """Exact whole-line concentration time: moment of a^(1-gamma) over (1-gamma) x mass.

    ``a_masses[j]`` is the mass carried by the cell centred at ``a_centers[j]``
    (the x integration already folded in), so the midpoint quadrature of the
    defining ratio is a plain weighted sum.
    """
    if not 0.0 <= gamma < 1.0:
        raise DomainError("blowup_time_Tb requires gamma in [0, 1)")
    centers = np.asarray(a_centers, dtype=float)
    masses = np.asarray(a_masses, dtype=float)
    if np.any(masses < 0.0):
        raise DomainError("masses must be nonnegative")
    total = masses.sum()
    if total <= 0.0:
        raise DomainError("blowup_time_Tb needs a nonzero datum")
    moment = float(np.sum(centers ** (1.0 - gamma) * masses))
    return moment / ((1.0 - gamma) * total)


@dataclass(frozen=True)
class GronwallBound:
    """Output of the superlinear Gronwall bound for y' >= C2 y^(1+theta) - C1."""

    alpha: float
    t_alpha: Optional[float]
    lower_bound: Optional[Callable[[float], float]]


def gronwall_T_alpha(c1: float, c2: float, theta: float, y0: float) -> GronwallBound:
    """Blow-up bound for continuous y with y(t) >= y(0) + int (C2 y^(1+theta) - C1).

    With alpha = C2 y0^(1+theta) - C1 > 0 the existence time is bounded by
    T(alpha) = alpha^(-theta/(1+theta)) (1/theta) (C1/C2)^(1/(1+theta)) and
    y(t) >= y0 (1 - t alpha theta / y0)^(-1/theta).  alpha <= 0 gives no
    guarantee.  C1 = 0 degenerates the formula and is rejected.
    """
    if c1 <= 0.0:
        raise DomainError("C1 must be strictly positive (the bound degenerates at C1 = 0)")
    if c2 <= 0.0 or theta <= 0.0 or y0 <= 0.0:
        raise DomainError("C2, theta, y0 must all be positive")
    alpha = c2 * y0 ** (1.0 + theta) - c1
    if alpha <= 0.0:
        return GronwallBound(alpha=alpha, t_alpha=None, lower_bound=None)
    t_alpha = alpha ** (-theta / (1.0 + theta)) * (1.0 / theta) * (c1 / c2) ** (1.0 / (1.0 + theta))
    t_div = y0 / (alpha * theta)

    def lower_bound(t: float) -> float:
        if t < 0.0 or t >= t_div:
            raise DomainError(f"lower_bound is defined on [0, {t_div}) only")
        return y0 * (1.0 - t * alpha * theta / y0) ** (-1.0 / theta)

    return GronwallBound(alpha=alpha, t_alpha=t_alpha, lower_bound=lower_bound)


@dataclass(frozen=True, eq=False)
class Profile:
    """Tabulated nonnegative profile with linear interpolation, zero outside the table."""

    points: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if pts.ndim != 1 or pts.shape != vals.shape or pts.size < 2:
            raise DomainError("profile needs matching 1d point/value tables")
        if np.any(np.diff(pts) <= 0):
            raise DomainError("profile points must be strictly increasing")
        if np.any(vals < 0.0):
            raise DomainError("profile values must be nonnegative")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "values", vals)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "Profile":
        return cls(points=np.array([lo, hi]), values=np.array([1.0, 1.0]))

    @classmethod
    def bump(cls, center: float, half_width: float, n: int = 201) -> "Profile":
        s = np.linspace(-1.0, 1.0, n)
        return cls(points=center + half_width * s, values=(1.0 - s**2) ** 2)

    def evaluate(self, x):
        out = np.interp(np.asarray(x, dtype=float), self.points, self.values, left=0.0, right=0.0)
        return _scalar_or_array(x, out)


@dataclass(frozen=True, eq=False)
class InitialDataSpec:
    """Product datum u0(x, a) ~ x_profile(x) a_profile(a) restricted to [a_lo, a_hi], mass-normalized."""

    a_lo: float
    a_hi: float
    x_profile: Profile
    a_profile: Profile
    total_mass: float = 1.0
    y_profile: Optional[Profile] = None  # 2d only; defaults to x_profile

    def __post_init__(self):
        if not (0.0 <= self.a_lo < self.a_hi):
            raise DomainError("need 0 <= a_lo < a_hi")
        if self.total_mass <= 0.0:
            raise DomainError("total_mass must be positive")


@dataclass(frozen=True)
class ProblemSpec:
    """Full model configuration for one run."""

    dimension: int
    drift: DriftSpec
    localization: LocalizationSpec
    logistic: LogisticSpec = field(default_factory=LogisticSpec)
    diffusion_exponent: float = 1.0  # q; porous mode when q > 1
    x_half_width: float = 20.0
    a_max: float = 1.0

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise DomainError("dimension must be 1 or 2")
        if (self.dimension == 2) != (self.localization.kind is LocalizationKind.BALL_2D):
            raise DomainError("dimension 2 pairs exactly with ball_2d localization")
        q = self.diffusion_exponent
        if q < 1.0:
            raise DomainError("diffusion exponent q must be >= 1")
        g = self.drift.gamma
        if q > 1.0 and g > 0.0 and q >= 1.0 + 1.0 / g:
            raise DomainError(
                f"porous exponent q = {q} violates q in [1, 1 + 1/gamma) = [1, {1.0 + 1.0 / g:g})"
            )
        if self.x_half_width <= 0.0 or self.a_max <= 0.0:
            raise DomainError("x_half_width and a_max must be positive")

    def a_velocity(self, psi, a):
        """Transport velocity of the structural variable: -psi f(a) + lambda g(a)."""
        f = drift_f(a, self.drift)
        g = logistic_g(a, self.logistic)
        return -np.asarray(psi) * f + self.logistic.lam * g
