"""Functionals of the density field, theorem checkers, and blow-up verdicts.

All reductions are midpoint quadratures on the cell-averaged field so that the
discrete conservation identities hold exactly.  Nothing here mutates a field;
everything is safe to call concurrently and sums in a fixed order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .model import (
    DomainError,
    DriftSign,
    LocalizationKind,
    ProblemSpec,
    blowup_time_Tb,
    characteristic_vanishing_time,
)

__all__ = [
    "DiagnosticsConfig",
    "DiagnosticsRow",
    "DiagnosticsSeries",
    "BlowupReport",
    "EnvelopeReport",
    "ConfigurationError",
    "mass",
    "lp_norm",
    "moment_a",
    "half_moment_psi",
    "virial_y",
    "support_bounds",
    "sup_weighted",
    "detect_blowup",
    "check_envelopes",
    "fit_blowup_time",
    "compute_row",
    "write_diagnostics_csv",
    "write_report",
]


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# quadratures
# ---------------------------------------------------------------------------


def _measure(grid) -> float:
    return grid.dx if grid.dimension == 1 else grid.dx * grid.dy


def mass(field, grid) -> float:
    """Total mass of the field (excluding the boundary accumulator)."""
    return float(np.sum(field.values * grid.a_widths) * _measure(grid))


def lp_norm(field, grid, p: float) -> float:
    """(sum u^p dx da)^(1/p); p = 1 equals the mass for nonnegative fields."""
    if p < 1.0:
        raise DomainError("lp_norm requires p >= 1")
    total = float(np.sum(np.abs(field.values) ** p * grid.a_widths) * _measure(grid))
    return total ** (1.0 / p)


def moment_a(field, grid, exponent: float) -> float:
    """sum a^exponent u dx da with cell-center weights."""
    if exponent <= -1.0:
        raise DomainError("moment exponent must exceed -1 for integrability near a = 0")
    w = grid.a_centers**exponent * grid.a_widths
    return float(np.sum(field.values * w) * _measure(grid))


def half_moment_psi(field, grid, spec: ProblemSpec) -> float:
    """sum psi(x) a^(1/2) u dx da: stays bounded in the localized supercritical regime."""
    from .pde import psi_on_grid

    psi = psi_on_grid(grid, spec)
    w = np.sqrt(grid.a_centers) * grid.a_widths
    return float(np.sum(psi[..., None] * field.values * w) * _measure(grid))


def _virial_weight_x(grid) -> np.ndarray:
    if grid.dimension == 1:
        x = grid.x_centers
        return np.where(np.abs(x) <= 1.0, (1.0 - x**2) ** 2, 0.0)
    X, Y = np.meshgrid(grid.x_centers, grid.y_centers, indexing="ij")
    r2 = X**2 + Y**2
    return np.where(r2 <= 1.0, (1.0 - r2) ** 2, 0.0)


def virial_y(field, grid, m: float) -> float:
    """Weighted integral (1 - |x|^2)^2 1_{|x|<=1} a^(-m) u; the blow-up monitor."""
    if not 0.0 < m < 1.0:
        raise DomainError("virial exponent m must lie in (0, 1)")
    wx = _virial_weight_x(grid)
    wa = grid.a_centers ** (-m) * grid.a_widths
    return float(np.sum(wx[..., None] * field.values * wa) * _measure(grid))


def support_bounds(field, grid, mass_threshold: Optional[float] = None):
    """Smallest and largest cell centers outside of which the mass stays below
    the threshold (default 1e-12 of the field mass); full range for an empty field."""
    total = mass(field, grid)
    thr = 1e-12 * total if mass_threshold is None else mass_threshold
    slice_mass = field.values * grid.a_widths
    while slice_mass.ndim > 1:
        slice_mass = slice_mass.sum(axis=0)
    slice_mass = slice_mass * _measure(grid)
    if total <= thr or total <= 0.0:
        return float(grid.a_centers[0]), float(grid.a_centers[-1])
    below = np.concatenate([[0.0], np.cumsum(slice_mass)])
    j_lo = int(np.searchsorted(below[1:], thr, side="right"))
    above = below[-1] - below
    j_hi = int(np.searchsorted(-above[:-1], -thr, side="right")) - 1
    j_lo = min(j_lo, grid.na - 1)
    j_hi = max(j_hi, j_lo)
    return float(grid.a_centers[j_lo]), float(grid.a_centers[j_hi])


def sup_weighted(field, grid, gamma: float) -> float:
    """max over cells of a^gamma u; the maximum-principle proxy."""
    w = grid.a_centers**gamma
    return float(np.max(field.values * w))


def dissipation_proxy(field, grid) -> float:
    """sum a |grad_x u|^2 dx da, the decay mechanism of the L^p estimates."""
    u = field.values
    if grid.dimension == 1:
        g2 = (np.diff(u, axis=0) / grid.dx) ** 2
        g2 = 0.5 * (np.pad(g2, ((1, 0), (0, 0))) + np.pad(g2, ((0, 1), (0, 0))))
    else:
        gx = (np.diff(u, axis=0) / grid.dx) ** 2
        gy = (np.diff(u, axis=1) / grid.dy) ** 2
        g2 = 0.5 * (
            np.pad(gx, ((1, 0), (0, 0), (0, 0)))
            + np.pad(gx, ((0, 1), (0, 0), (0, 0)))
        ) + 0.5 * (
            np.pad(gy, ((0, 0), (1, 0), (0, 0)))
            + np.pad(gy, ((0, 0), (0, 1), (0, 0)))
        )
    return float(np.sum(grid.a_centers * g2 * grid.a_widths) * _measure(grid))


# ---------------------------------------------------------------------------
# series plumbing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiagnosticsConfig:
    """What to record per output time and when to declare blow-up."""

    gamma: float
    p_extra: float = 3.0  # the 'lp' CSV column
    virial_m: float = 0.25
    moment_exponent: float = 0.5  # 1 - gamma by default
    virial_factor: float = 1e3
    lp_factor: float = 1e2
    detector_norm: str = "l2"  # l1 | l2 | lp
    support_threshold_rel: float = 1e-12

    @classmethod
    def for_problem(cls, problem: ProblemSpec, **overrides) -> "DiagnosticsConfig":
        g = problem.drift.gamma
        m = overrides.pop("virial_m", (1.0 - g) / 2.0 if g < 1.0 else 0.25)
        if not 0.0 < m < 1.0:
            m = 0.25
        me = overrides.pop("moment_exponent", 1.0 - g if g < 1.0 else 0.5)
        return cls(gamma=g, virial_m=m, moment_exponent=me, **overrides)

    def detector_value(self, row: "DiagnosticsRow") -> float:
        return {"l1": row.l1, "l2": row.l2, "lp": row.lp}[self.detector_norm]


@dataclass(frozen=True)
class DiagnosticsRow:
    t: float
    mass: float
    boundary_mass: float
    l1: float
    l2: float
    lp: float
    moment_1mg: float
    half_moment: float
    virial_y: float
    support_min: float
    support_max: float
    sup_agamma: float
    dissipation: float


def compute_row(field, grid, problem: ProblemSpec, cfg: DiagnosticsConfig) -> DiagnosticsRow:
    m_total = mass(field, grid)
    smin, smax = support_bounds(field, grid, cfg.support_threshold_rel * max(m_total, 1e-300))
    return DiagnosticsRow(
        t=field.time,
        mass=m_total,
        boundary_mass=field.boundary_mass,
        l1=lp_norm(field, grid, 1.0),
        l2=lp_norm(field, grid, 2.0),
        lp=lp_norm(field, grid, cfg.p_extra),
        moment_1mg=moment_a(field, grid, cfg.moment_exponent),
        half_moment=half_moment_psi(field, grid, problem),
        virial_y=virial_y(field, grid, cfg.virial_m),
        support_min=smin,
        support_max=smax,
        sup_agamma=sup_weighted(field, grid, problem.drift.gamma),
        dissipation=dissipation_proxy(field, grid),
    )


_SERIES_COLUMNS = (
    "t",
    "mass",
    "boundary_mass",
    "l1",
    "l2",
    "lp",
    "moment_1mg",
    "half_moment",
    "virial_y",
    "support_min",
    "support_max",
    "sup_agamma",
)


@dataclass(eq=False)
class DiagnosticsSeries:
    t: np.ndarray
    mass: np.ndarray
    boundary_mass: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    lp: np.ndarray
    moment_1mg: np.ndarray
    half_moment: np.ndarray
    virial_y: np.ndarray
    support_min: np.ndarray
    support_max: np.ndarray
    sup_agamma: np.ndarray
    dissipation: np.ndarray
    config: Optional[DiagnosticsConfig] = None

    @classmethod
    def from_rows(cls, rows, config: Optional[DiagnosticsConfig] = None) -> "DiagnosticsSeries":
        cols = {
            name: np.array([getattr(r, name) for r in rows], dtype=float)
            for name in _SERIES_COLUMNS + ("dissipation",)
        }
        return cls(config=config, **cols)

    def __len__(self) -> int:
        return self.t.size

    def norm_series(self, p: float) -> np.ndarray:
        if p == 1.0:
            return self.l1
        if p == 2.0:
            return self.l2
        if self.config is not None and p == self.config.p_extra:
            return self.lp
        raise ConfigurationError(f"L^{p} norm was not recorded in this series")


def write_diagnostics_csv(series: DiagnosticsSeries, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(_SERIES_COLUMNS) + "\n")
        for k in range(len(series)):
            fh.write(",".join(f"{getattr(series, c)[k]:.12e}" for c in _SERIES_COLUMNS) + "\n")


# ---------------------------------------------------------------------------
# blow-up detection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlowupReport:
    verdict: str  # "global_up_to_horizon" | "blow_up"
    t_detect: Optional[float] = None
    t_star_estimate: Optional[float] = None
    t_star_method: Optional[str] = None
    theory_bound_name: Optional[str] = None
    theory_bound_value: Optional[float] = None
    comparison: Optional[float] = None  # estimate / theory

    def as_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "t_detect": self.t_detect,
            "t_star_estimate": self.t_star_estimate,
            "t_star_method": self.t_star_method,
            "theory_bound_name": self.theory_bound_name,
            "theory_bound_value": self.theory_bound_value,
            "comparison": self.comparison,
        }


def write_report(report: BlowupReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def fit_blowup_time(t: np.ndarray, y: np.ndarray, theta: float) -> Optional[float]:
    """Estimate T* from y ~ c (T* - t)^(-1/theta): z = y^(-theta) is linear in t
    and T* is its root.  Fits the last decade of growth."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    good = y > 0.0
    t, y = t[good], y[good]
    if t.size < 3:
        return None
    window = y >= y[-1] / 10.0
    if window.sum() < 3:
        window = np.zeros_like(window)
        window[-3:] = True
    tw, zw = t[window], y[window] ** (-theta)
    slope, intercept = np.polyfit(tw, zw, 1)
    if slope >= 0.0:
        return None
    return float(-intercept / slope)


def _moment_extrapolated_time(series: DiagnosticsSeries) -> Optional[float]:
    """T estimate from the linear decay of the a^(1-gamma) moment: the time at
    which the fitted line reaches zero, i.e. moment(0) / decay rate.

    The fit window covers the first tenth of the decay, early enough that the
    identity's exact slope has not yet been bent by mass already concentrated
    at a = 0.
    """
    n = len(series)
    if n < 3:
        return None
    m0 = series.moment_1mg[0]
    if m0 <= 0.0:
        return None
    k = int(np.searchsorted(-series.moment_1mg, -0.9 * m0, side="right"))
    k = min(max(k, 4), n)
    t, mom = series.t[:k], series.moment_1mg[:k]
    slope, _ = np.polyfit(t, mom, 1)
    if slope >= 0.0:
        return None
    return float(m0 / (-slope))


def detect_blowup(
    series: DiagnosticsSeries,
    cfg: DiagnosticsConfig,
    problem: Optional[ProblemSpec] = None,
    grid=None,
    initial_field_moment: Optional[float] = None,
    dt_collapsed: bool = False,
) -> BlowupReport:
    """Decide the verdict and estimate the singularity time.

    Blow-up requires the virial monitor and the detector norm to both exceed
    their growth factors, or the adaptive stepper to have collapsed below
    dt_min.  The T* estimate uses the exact moment identity for the whole-line
    supercritical regime and the virial power-law fit otherwise.
    """
    if len(series) == 0:
        raise ConfigurationError("detect_blowup needs a nonempty series")
    y0 = max(series.virial_y[0], 1e-300)
    lp0 = max(
        {"l1": series.l1, "l2": series.l2, "lp": series.lp}[cfg.detector_norm][0], 1e-300
    )
    lp_series = {"l1": series.l1, "l2": series.l2, "lp": series.lp}[cfg.detector_norm]
    fired = (series.virial_y >= cfg.virial_factor * y0) & (lp_series >= cfg.lp_factor * lp0)
    t_detect = None
    if fired.any():
        t_detect = float(series.t[np.argmax(fired)])
    elif dt_collapsed:
        t_detect = float(series.t[-1])
    verdict = "blow_up" if (fired.any() or dt_collapsed) else "global_up_to_horizon"

    whole_line_super = (
        problem is not None
        and problem.localization.kind is LocalizationKind.WHOLE_LINE
        and problem.drift.supercritical
        and problem.logistic.lam == 0.0
    )
    t_star = None
    method = None
    if whole_line_super:
        t_star = _moment_extrapolated_time(series)
        method = "moment_extrapolation" if t_star is not None else None
    if t_star is None and series.virial_y[-1] >= 10.0 * y0:
        theta = (1.0 - cfg.gamma) / cfg.virial_m
        t_star = fit_blowup_time(series.t, series.virial_y, theta)
        method = "virial_fit" if t_star is not None else None

    bound_name = bound_value = None
    if problem is not None and problem.drift.supercritical:
        if whole_line_super and grid is not None:
            # T_b from the recorded initial moment and mass (same quadrature)
            m0 = initial_field_moment if initial_field_moment is not None else series.moment_1mg[0]
            bound_name = "T_b"
            bound_value = float(m0 / ((1.0 - cfg.gamma) * series.mass[0]))
        elif problem.localization.kind in (LocalizationKind.INTERVAL, LocalizationKind.BALL_2D):
            cand = interval_gronwall_candidate(series, cfg, problem)
            if cand is not None:
                bound_name = "T_alpha"
                bound_value = cand
    comparison = None
    if t_star is not None and bound_value not in (None, 0.0):
        comparison = float(t_star / bound_value)
    return BlowupReport(
        verdict=verdict,
        t_detect=t_detect,
        t_star_estimate=t_star,
        t_star_method=method,
        theory_bound_name=bound_name,
        theory_bound_value=bound_value,
        comparison=comparison,
    )


def interval_gronwall_candidate(
    series: DiagnosticsSeries, cfg: DiagnosticsConfig, problem: ProblemSpec
) -> Optional[float]:
    """T(alpha) from the virial inequality constants; an upper bound on the
    existence time, reported without asserting closeness to the observed T*."""
    from .model import gronwall_T_alpha

    m = cfg.virial_m
    gamma = cfg.gamma
    M = series.mass[0] + series.boundary_mass[0]
    A0 = series.support_max[0]
    if M <= 0.0 or A0 <= 0.0 or gamma >= 1.0:
        return None
    c1 = 12.0 * A0 ** (1.0 - m) * M
    c2 = (m / 2.0) * M ** (-(1.0 - gamma) / m)
    theta = (1.0 - gamma) / m
    bound = gronwall_T_alpha(c1, c2, theta, max(series.virial_y[0], 1e-300))
    return bound.t_alpha


# ---------------------------------------------------------------------------
# envelope checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvelopeReport:
    passed: bool
    worst_margin: float  # min over outputs of (slacked bound - value)/bound
    worst_time: float
    bound_name: str


def check_envelopes(
    series: DiagnosticsSeries,
    problem: ProblemSpec,
    selector: str,
    p: float,
    A0: Optional[float] = None,
    slack: float = 0.05,
) -> EnvelopeReport:
    """Verify the L^p growth/decay envelope for the selected regime with the
    stated multiplicative slack; the margin is relative to the bound."""
    g = problem.drift.gamma
    if A0 is None:
        A0 = float(series.support_max[0])
    norms = series.norm_series(p) ** p
    t = series.t
    n0 = norms[0]
    if selector == "acceleration":
        if problem.drift.sign is not DriftSign.ACCELERATION:
            raise ConfigurationError("acceleration envelope on a deceleration run")
        bound = np.full_like(t, n0)
        name = "Lp_nonincrease"
    elif selector == "whole_line_subcritical":
        if problem.drift.sign is not DriftSign.DECELERATION or g < 1.0:
            raise ConfigurationError("whole-line subcritical envelope needs deceleration, gamma >= 1")
        if problem.localization.kind is not LocalizationKind.WHOLE_LINE:
            raise ConfigurationError("whole-line envelope on a localized run")
        bound = n0 * np.exp(g * (1.0 - p) * A0 ** (g - 1.0) * t)
        name = "exp(gamma(1-p)A0^(gamma-1)t)"
    elif selector == "interval_subcritical":
        if problem.localization.kind is not LocalizationKind.INTERVAL:
            raise ConfigurationError("interval envelope needs interval localization")
        if problem.drift.sign is not DriftSign.DECELERATION or g < 1.0:
            raise ConfigurationError("interval subcritical envelope needs deceleration, gamma >= 1")
        rate = g * (p - 1.0) * A0 ** (g - 1.0) / (2.0 * problem.localization.delta)
        bound = n0 * np.exp(rate * t)
        name = "exp(gamma(p-1)A0^(gamma-1)t/(2delta))"
    elif selector == "interval_uniform":
        if problem.localization.kind is not LocalizationKind.INTERVAL:
            raise ConfigurationError("uniform-in-delta envelope needs interval localization")
        if g <= 1.5:
            raise ConfigurationError("uniform-in-delta envelope needs gamma > 3/2")
        bound = n0 * np.exp(g**2 * (p - 1.0) * t)
        name = "exp(gamma^2(p-1)t)"
    else:
        raise ConfigurationError(f"unknown envelope selector {selector!r}")
    slacked = bound * (1.0 + slack)
    margins = (slacked - norms) / bound
    worst = int(np.argmin(margins))
    return EnvelopeReport(
        passed=bool(np.all(norms <= slacked)),
        worst_margin=float(margins[worst]),
        worst_time=float(t[worst]),
        bound_name=name,
    )
