"""Conservative finite-volume solver for the structured drift-diffusion model.

Operator splitting: implicit diffusion in space per structural slice (backward
Euler or Crank-Nicolson through a vectorized Thomas solve), and transport in
the structural variable by either a first-order conservative upwind update or
an exact characteristic remap.  The remap integrates cell edges along the
transport flow (closed form when the recovery term is off, RK4 otherwise) and
re-bins mass through the cumulative distribution, so it has no CFL restriction
and keeps the support edge on the analytic characteristic; it is the default
for deeply graded supercritical runs.  Mass plus the a = 0 boundary
accumulator is conserved to round-off by construction in every scheme.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.linalg import solveh_banded

from .model import (
    DomainError,
    DriftSign,
    InitialDataSpec,
    LocalizationKind,
    ProblemSpec,
    drift_f,
    logistic_g,
)

__all__ = [
    "Grid",
    "Field",
    "StepperConfig",
    "CFLError",
    "StabilityError",
    "NumericalFailure",
    "make_grid",
    "build_initial_field",
    "psi_on_grid",
    "step_diffusion",
    "step_advection_a",
    "step_porous_diffusion",
    "step",
    "run",
    "RunResult",
    "write_field_csv",
]

# Cells carrying less than this fraction of the total mass are exempt from the
# CFL bound; their outflow is capped by the flux limiter instead.
MASS_SIGNIFICANCE = 1e-13


class CFLError(RuntimeError):
    pass


class StabilityError(RuntimeError):
    pass


class NumericalFailure(RuntimeError):
    """Carries the offending field (and any series rows) for post-mortems."""

    def __init__(self, message, field=None, rows=None):
        super().__init__(message)
        self.field = field
        self.rows = rows


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform structured grid in space, optionally graded in the structural variable."""

    dimension: int
    x_centers: np.ndarray
    x_edges: np.ndarray
    dx: float
    a_edges: np.ndarray
    a_centers: np.ndarray
    a_widths: np.ndarray
    y_centers: Optional[np.ndarray] = None
    y_edges: Optional[np.ndarray] = None
    dy: Optional[float] = None

    @property
    def nx(self) -> int:
        return self.x_centers.size

    @property
    def ny(self) -> int:
        return 0 if self.y_centers is None else self.y_centers.size

    @property
    def na(self) -> int:
        return self.a_centers.size

    def cell_area(self) -> float:
        """Spatial measure of one cell (dx in 1d, dx*dy in 2d)."""
        return self.dx if self.dimension == 1 else self.dx * self.dy

    def a_width_at(self, a: float) -> float:
        """Width of the cell containing a (clamped to the grid)."""
        j = int(np.clip(np.searchsorted(self.a_edges, a, side="right") - 1, 0, self.na - 1))
        return float(self.a_widths[j])


def make_grid(
    spec: ProblemSpec,
    nx: int,
    na: int,
    grading_ratio: float = 1.0,
    ny: Optional[int] = None,
    uniform_fraction: float = 0.25,
) -> Grid:
    """Build the solver grid: uniform in space on [-L, L] (squared in 2d),
    uniform or graded toward a = 0 in the structural variable.

    A graded mesh keeps ``uniform_fraction`` of the cells at a constant width
    near a_max (the smooth part of the solution, where fat cells would pollute
    the moment quadratures) and lets the rest shrink geometrically toward 0,
    where the singular weights and the collapsing support live.
    """
    if nx < 2 or na < 2:
        raise DomainError("need at least 2 cells per direction")
    if not 1.0 <= grading_ratio <= 1.5:
        raise DomainError("grading ratio must lie in [1, 1.5]")
    if not 0.0 < uniform_fraction <= 1.0:
        raise DomainError("uniform_fraction must lie in (0, 1]")
    L = spec.x_half_width
    x_edges = np.linspace(-L, L, nx + 1)
    dx = 2.0 * L / nx
    x_centers = 0.5 * (x_edges[:-1] + x_edges[1:])
    if grading_ratio == 1.0:
        a_edges = np.linspace(0.0, spec.a_max, na + 1)
    else:
        r = grading_ratio
        nu = max(1, int(round(na * uniform_fraction)))
        ng = na - nu
        geo_sum = (1.0 - r ** (-ng)) / (r - 1.0)
        w = spec.a_max / (nu + geo_sum)
        widths = np.concatenate([w * r ** (-np.arange(ng, 0, -1)), np.full(nu, w)])
        a_edges = np.concatenate([[0.0], np.cumsum(widths)])
        a_edges[-1] = spec.a_max
    a_widths = np.diff(a_edges)
    a_centers = 0.5 * (a_edges[:-1] + a_edges[1:])
    y_centers = y_edges = None
    dy = None
    if spec.dimension == 2:
        ny = nx if ny is None else ny
        y_edges = np.linspace(-L, L, ny + 1)
        dy = 2.0 * L / ny
        y_centers = 0.5 * (y_edges[:-1] + y_edges[1:])
    return Grid(
        dimension=spec.dimension,
        x_centers=x_centers,
        x_edges=x_edges,
        dx=dx,
        a_edges=a_edges,
        a_centers=a_centers,
        a_widths=a_widths,
        y_centers=y_centers,
        y_edges=y_edges,
        dy=dy,
    )


@dataclass(eq=False)
class Field:
    """Cell-averaged density u plus the mass absorbed at the a = 0 face."""

    values: np.ndarray  # (nx, na) in 1d, (nx, ny, na) in 2d
    boundary_mass: float = 0.0
    time: float = 0.0

    def copy(self) -> "Field":
        return Field(self.values.copy(), self.boundary_mass, self.time)


def field_mass(f: Field, grid: Grid) -> float:
    return float(np.sum(f.values * grid.a_widths) * grid.cell_area())


def psi_on_grid(grid: Grid, spec: ProblemSpec) -> np.ndarray:
    """Localization evaluated at cell centers: (nx,) in 1d, (nx, ny) in 2d."""
    if grid.dimension == 1:
        return np.asarray(spec.localization.evaluate(grid.x_centers), dtype=float)
    X, Y = np.meshgrid(grid.x_centers, grid.y_centers, indexing="ij")
    return np.asarray(spec.localization.evaluate(X, Y), dtype=float)


def build_initial_field(grid: Grid, initial: InitialDataSpec) -> Field:
    """Cell-centered evaluation of the product datum, normalized so the
    discrete mass equals total_mass exactly (within round-off)."""
    a_vals = initial.a_profile.evaluate(grid.a_centers)
    a_vals = np.where(
        (grid.a_centers >= initial.a_lo) & (grid.a_centers <= initial.a_hi), a_vals, 0.0
    )
    x_vals = initial.x_profile.evaluate(grid.x_centers)
    if grid.dimension == 1:
        values = np.asarray(x_vals)[:, None] * a_vals[None, :]
    else:
        yp = initial.y_profile or initial.x_profile
        y_vals = yp.evaluate(grid.y_centers)
        values = (
            np.asarray(x_vals)[:, None, None]
            * np.asarray(y_vals)[None, :, None]
            * a_vals[None, None, :]
        )
    raw = float(np.sum(values * grid.a_widths) * grid.cell_area())
    if raw <= 0.0:
        raise DomainError("initial datum has no mass on this grid")
    return Field(values * (initial.total_mass / raw), boundary_mass=0.0, time=0.0)


# ---------------------------------------------------------------------------
# spatial diffusion
# ---------------------------------------------------------------------------


def _noflux_laplacian(u: np.ndarray, dx: float) -> np.ndarray:
    """Discrete Laplacian along the last axis with homogeneous no-flux ends."""
    flux = np.diff(u, axis=-1) / dx**2
    out = np.zeros_like(u)
    out[..., :-1] += flux
    out[..., 1:] -= flux
    return out


def _thomas_noflux(c: np.ndarray, rhs: np.ndarray, dx: float) -> np.ndarray:
    """Solve (I - c * Lap_noflux) x = rhs along the last axis.

    ``c`` has the shape of the leading axes of ``rhs`` (one diffusion
    coefficient per slice).  Plain Thomas elimination, vectorized over the
    leading axes.
    """
    n = rhs.shape[-1]
    r = c / dx**2
    # diag entries: 1 + r at the two ends, 1 + 2r inside; off-diagonals -r
    w = np.empty_like(rhs)
    g = np.empty_like(rhs)
    beta = 1.0 + r
    w[..., 0] = -r / beta
    g[..., 0] = rhs[..., 0] / beta
    for i in range(1, n):
        diag = 1.0 + (r if i == n - 1 else 2.0 * r)
        beta = diag + r * w[..., i - 1]
        w[..., i] = -r / beta
        g[..., i] = (rhs[..., i] + r * g[..., i - 1]) / beta
    x = np.empty_like(rhs)
    x[..., -1] = g[..., -1]
    for i in range(n - 2, -1, -1):
        x[..., i] = g[..., i] - w[..., i] * x[..., i + 1]
    return x


def _solve_noflux_spd(c_slices: np.ndarray, rhs: np.ndarray, dx: float) -> np.ndarray:
    """Solve (I - c_j * Lap_noflux) x_j = rhs_j for every slice j along the
    first axis (rhs: (na, nx) or (na, B, nx)); Cholesky banded per slice."""
    n = rhs.shape[-1]
    out = np.empty_like(rhs)
    ab = np.empty((2, n))
    for j, c in enumerate(c_slices):
        r = c / dx**2
        if r == 0.0:
            out[j] = rhs[j]
            continue
        ab[0, :] = 1.0 + 2.0 * r
        ab[0, 0] = ab[0, -1] = 1.0 + r
        ab[1, :-1] = -r
        ab[1, -1] = 0.0
        b = rhs[j]
        if b.ndim == 1:
            out[j] = solveh_banded(ab, b, lower=True)
        else:
            out[j] = solveh_banded(ab, b.T, lower=True).T
    return out


def _diffuse_slices(u_slices: np.ndarray, coeff, dx: float, dt: float, scheme: str):
    """One implicit diffusion substep along the last axis; ``coeff`` holds the
    per-slice diffusivities (first axis indexes the slices)."""
    c_slices = np.asarray(coeff, dtype=float)
    if scheme == "backward_euler":
        return _solve_noflux_spd(dt * c_slices, u_slices, dx)
    if scheme == "crank_nicolson":
        half = dt * c_slices / 2.0
        shape = (slice(None),) + (None,) * (u_slices.ndim - 1)
        rhs = u_slices + half[shape] * _noflux_laplacian(u_slices, dx)
        return _solve_noflux_spd(half, rhs, dx)
    raise DomainError(f"unknown diffusion scheme {scheme!r}")


def step_diffusion(
    field: Field, dt: float, grid: Grid, spec: ProblemSpec, scheme: str = "backward_euler"
) -> Field:
    """Implicit spatial diffusion with coefficient a_j per slice, no-flux walls.

    2d uses dimension splitting (x sweep, then y).  Slice masses are conserved
    exactly because the no-flux operator has zero column sums.
    """
    if dt <= 0.0:
        raise DomainError("dt must be positive")
    if not np.all(np.isfinite(field.values)):
        raise NumericalFailure("non-finite field handed to step_diffusion", field=field)
    a = grid.a_centers
    if grid.dimension == 1:
        work = np.ascontiguousarray(field.values.T)  # (na, nx)
        out = _diffuse_slices(work, a, grid.dx, dt, scheme)
        values = out.T.copy()
    else:
        work = np.ascontiguousarray(np.transpose(field.values, (2, 1, 0)))  # (na, ny, nx)
        work = _diffuse_slices(work, a, grid.dx, dt, scheme)
        work = np.ascontiguousarray(np.transpose(work, (0, 2, 1)))  # (na, nx, ny)
        work = _diffuse_slices(work, a, grid.dy, dt, scheme)
        values = np.transpose(work, (1, 2, 0)).copy()
    return Field(values, field.boundary_mass, field.time + dt)


def step_porous_diffusion(field: Field, dt: float, grid: Grid, spec: ProblemSpec) -> Field:
    """Explicit conservative update of  du/dt = a * d2(u^q)/dx2  per slice.

    Stability demands dt <= dx^2 / (2 a_j q max(u)^(q-1)) slice by slice; a
    violation raises rather than silently corrupting the run.
    """
    q = spec.diffusion_exponent
    if q < 1.0:
        raise DomainError("porous stepping needs q >= 1")
    if grid.dimension != 1:
        raise DomainError("porous diffusion is implemented for dimension 1")
    if dt <= 0.0:
        raise DomainError("dt must be positive")
    u = field.values
    limit = porous_stable_dt(field, grid, spec, fraction=1.0)
    if dt > limit * (1.0 + 1e-12):
        raise StabilityError(
            f"porous stability violated: dt = {dt:g} exceeds the explicit limit {limit:g}"
        )
    w = u**q
    lap = _noflux_laplacian(w.T, grid.dx).T
    values = u + dt * grid.a_centers[None, :] * lap
    return Field(np.clip(values, 0.0, None), field.boundary_mass, field.time + dt)


def porous_stable_dt(field: Field, grid: Grid, spec: ProblemSpec, fraction: float = 0.9) -> float:
    """Largest explicit dt for the porous substep at the current state."""
    q = spec.diffusion_exponent
    umax = field.values.max(axis=0)  # per slice
    rate = 2.0 * grid.a_centers * q * np.where(umax > 0.0, umax, 0.0) ** (q - 1.0)
    rate = np.where(umax > 0.0, rate, 0.0)
    worst = rate.max()
    if worst <= 0.0:
        return math.inf
    return fraction * grid.dx**2 / worst


# ---------------------------------------------------------------------------
# transport in the structural variable
# ---------------------------------------------------------------------------


def _face_velocities(grid: Grid, spec: ProblemSpec, psi: np.ndarray) -> np.ndarray:
    """v = -psi f(a) + lambda g(a) at the a-faces; zero flux imposed at a_max."""
    f = drift_f(grid.a_edges, spec.drift)
    g = logistic_g(grid.a_edges, spec.logistic)
    v = -psi[..., None] * f[None, :] + spec.logistic.lam * g[None, :]
    v[..., -1] = 0.0  # support condition at the a_max face
    return v


def _upwind_fluxes(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Donor-cell fluxes at the a-faces, limited so no cell sends more than it holds."""
    F = np.zeros_like(v)
    vk = v[..., 1:-1]
    F[..., 1:-1] = np.where(vk > 0.0, vk * u[..., :-1], vk * u[..., 1:])
    v0 = v[..., 0]
    F[..., 0] = np.where(v0 < 0.0, v0 * u[..., 0], 0.0)  # outflow only (gamma = 0)
    return F


def _limit_outflow(F: np.ndarray, u: np.ndarray, a_widths: np.ndarray, dt: float) -> np.ndarray:
    out_rate = np.maximum(-F[..., :-1], 0.0) + np.maximum(F[..., 1:], 0.0)
    cap = u * a_widths / dt
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(out_rate > cap, cap / np.where(out_rate > 0, out_rate, 1.0), 1.0)
    Fl = F.copy()
    low = Fl[..., :-1]
    Fl[..., :-1] = np.where(low < 0.0, low * scale, low)
    high = Fl[..., 1:]
    Fl[..., 1:] = np.where(high > 0.0, high * scale, high)
    return Fl


def advection_cfl_dt(
    field: Field, grid: Grid, spec: ProblemSpec, psi: Optional[np.ndarray] = None
) -> float:
    """Largest dt with CFL number <= 1 over the mass-significant cells."""
    if psi is None:
        psi = psi_on_grid(grid, spec)
    v = _face_velocities(grid, spec, psi)
    out_speed = np.maximum(-v[..., :-1], 0.0) + np.maximum(v[..., 1:], 0.0)
    cell_mass = field.values * grid.a_widths * grid.cell_area()
    significant = cell_mass > MASS_SIGNIFICANCE * max(cell_mass.sum(), 1e-300)
    rel = np.where(significant, out_speed / grid.a_widths, 0.0)
    worst = rel.max()
    if worst <= 0.0:
        return math.inf
    return 1.0 / worst


def step_advection_a(
    field: Field,
    dt: float,
    grid: Grid,
    spec: ProblemSpec,
    cfl_fraction: float = 1.0,
    psi: Optional[np.ndarray] = None,
    check_cfl: bool = True,
) -> Field:
    """First-order conservative upwind transport in the structural variable.

    Face velocities come from -psi f + lambda g; the a_max face carries zero
    flux, and for gamma = 0 deceleration the outflow through the a = 0 face is
    deposited into the boundary-mass accumulator.  Mass + boundary mass is
    conserved to round-off.  The CFL bound is enforced on every cell holding a
    significant fraction of the total mass; emptier cells are protected by the
    outflow limiter instead.
    """
    if dt <= 0.0:
        raise DomainError("dt must be positive")
    if psi is None:
        psi = psi_on_grid(grid, spec)
    if check_cfl:
        allowed = advection_cfl_dt(field, grid, spec, psi)
        if dt > cfl_fraction * allowed * (1.0 + 1e-12):
            raise CFLError(
                f"advection CFL violated: dt = {dt:g} exceeds "
                f"{cfl_fraction:g} x {allowed:g} on mass-bearing cells"
            )
    u = field.values
    v = _face_velocities(grid, spec, psi)
    F = _limit_outflow(_upwind_fluxes(u, v), u, grid.a_widths, dt)
    values = u - dt * np.diff(F, axis=-1) / grid.a_widths
    outflow = -float(np.sum(np.minimum(F[..., 0], 0.0))) * grid.cell_area() * dt
    return Field(values, field.boundary_mass + outflow, field.time + dt)


# -- exact characteristic remap ---------------------------------------------

_REMAP_CAP = 1e30


def _backward_edges(a_edges: np.ndarray, strength: float, dt: float, spec: ProblemSpec):
    """Origins (time t) of the grid edges (time t + dt) under the transport flow.

    Integrates the reversed edge equation da/ds = strength f(a) - lambda g(a);
    closed form when the recovery term is off, RK4 otherwise.
    """
    E = np.asarray(a_edges, dtype=float)
    lam = spec.logistic.lam
    g1 = spec.drift.gamma
    if strength == 0.0 and lam == 0.0:
        return E.copy()
    if lam == 0.0:
        s = strength
        if spec.drift.sign is DriftSign.DECELERATION:
            if g1 == 1.0:
                return E * math.exp(s * dt)
            if g1 < 1.0:
                return (E ** (1.0 - g1) + (1.0 - g1) * s * dt) ** (1.0 / (1.0 - g1))
            out = np.zeros_like(E)
            pos = E > 0.0
            base = E[pos] ** (1.0 - g1) - (g1 - 1.0) * s * dt
            out[pos] = np.where(base > 0.0, base ** (1.0 / (1.0 - g1)), _REMAP_CAP)
            return np.minimum(out, _REMAP_CAP)
        # acceleration: reversed flow moves edges down
        if g1 == 1.0:
            return E * math.exp(-s * dt)
        if g1 < 1.0:
            base = E ** (1.0 - g1) - (1.0 - g1) * s * dt
            return np.clip(base, 0.0, None) ** (1.0 / (1.0 - g1))
        out = np.zeros_like(E)
        pos = E > 0.0
        out[pos] = (E[pos] ** (1.0 - g1) + (g1 - 1.0) * s * dt) ** (1.0 / (1.0 - g1))
        return out

    # recovery active: RK4 on all edges at once
    def reversed_rate(a):
        a = np.clip(a, 0.0, None)
        return strength * drift_f(a, spec.drift) - lam * logistic_g(a, spec.logistic)

    nsub = 8
    h = dt / nsub
    a = E.copy()
    for _ in range(nsub):
        k1 = reversed_rate(a)
        k2 = reversed_rate(a + 0.5 * h * k1)
        k3 = reversed_rate(a + 0.5 * h * k2)
        k4 = reversed_rate(a + h * k3)
        a = np.clip(a + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), 0.0, None)
    return np.maximum.accumulate(a)  # enforce monotone edges against round-off


def _limited_slopes(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Minmod slopes of the cell averages, capped so the linear reconstruction
    stays nonnegative at both cell edges."""
    c = grid.a_centers
    s = np.zeros_like(u)
    if grid.na < 3:
        return s
    left = (u[:, 1:-1] - u[:, :-2]) / (c[1:-1] - c[:-2])
    right = (u[:, 2:] - u[:, 1:-1]) / (c[2:] - c[1:-1])
    same = (left * right) > 0.0
    s[:, 1:-1] = np.where(same, np.sign(left) * np.minimum(np.abs(left), np.abs(right)), 0.0)
    half = 0.5 * grid.a_widths
    cap = u / half
    s = np.clip(s, -cap, cap)
    return s


def _remap_advect(
    field: Field, dt: float, grid: Grid, spec: ProblemSpec, psi: Optional[np.ndarray] = None
) -> Field:
    """Exact-transport conservative remap of the structural variable.

    Cell contents are reconstructed piecewise linearly (minmod-limited, so the
    density stays nonnegative), the fixed grid edges are pulled back along the
    characteristics, and new cell masses are differences of the cumulative
    distribution at the pulled-back edges.  Mass whose characteristic reaches
    a = 0 within the step lands in the bottom cell (gamma > 0) or in the
    boundary accumulator (gamma = 0 deceleration).
    """
    if psi is None:
        psi = psi_on_grid(grid, spec)
    u = field.values.reshape(-1, grid.na)
    psi_flat = psi.reshape(-1)
    widths = grid.a_widths
    edges = grid.a_edges
    centers = grid.a_centers
    gamma0_outflow = spec.drift.gamma == 0.0 and spec.drift.sign is DriftSign.DECELERATION
    new_u = np.empty_like(u)
    boundary_gain = 0.0
    slopes_all = _limited_slopes(u, grid)
    for s in np.unique(psi_flat):
        cols = np.where(psi_flat == s)[0]
        B = np.clip(_backward_edges(edges, float(s), dt, spec), 0.0, None)
        uc = u[cols]
        sc = slopes_all[cols]
        mass = uc * widths
        cum = np.concatenate([np.zeros((cols.size, 1)), np.cumsum(mass, axis=1)], axis=1)
        idx = np.clip(np.searchsorted(edges, B, side="right") - 1, 0, grid.na - 1)
        off = np.clip(B - edges[idx], 0.0, widths[idx])
        # cumulative of the piecewise-linear reconstruction inside cell idx:
        # C(a) = C_j + u_j (a - e_j) + s_j [ (a - c_j)^2 - (e_j - c_j)^2 ] / 2
        d0 = edges[idx] - centers[idx]
        Cb = (
            cum[:, idx]
            + uc[:, idx] * off[None, :]
            + 0.5 * sc[:, idx] * ((off[None, :] + d0[None, :]) ** 2 - d0[None, :] ** 2)
        )
        Cb = np.where(B[None, :] >= edges[-1], cum[:, -1:], Cb)
        Cb = np.maximum.accumulate(np.clip(Cb, 0.0, cum[:, -1:]), axis=1)
        new_mass = Cb[:, 1:] - Cb[:, :-1]
        new_mass[:, -1] = cum[:, -1] - Cb[:, -2]  # zero-flux cap at a_max
        if gamma0_outflow:
            boundary_gain += float(np.sum(Cb[:, 0]))
            new_mass[:, 0] = Cb[:, 1] - Cb[:, 0]
        else:
            new_mass[:, 0] = Cb[:, 1]  # include mass whose characteristic hit 0
        new_u[cols] = np.clip(new_mass, 0.0, None) / widths
    values = new_u.reshape(field.values.shape)
    return Field(
        values,
        field.boundary_mass + boundary_gain * grid.cell_area(),
        field.time + dt,
    )


# ---------------------------------------------------------------------------
# full step and run loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepperConfig:
    """Time-stepping policy for one run."""

    dt: float | str = "adaptive"
    cfl_fraction: float = 0.9
    diffusion_scheme: str = "backward_euler"
    advection_scheme: str = "upwind"  # or "characteristic_remap"
    positivity_clip: bool = True
    dt_min: float = 1e-8
    dt_initial: float = 1e-3  # starting dt in adaptive mode

    def __post_init__(self):
        if self.diffusion_scheme not in ("backward_euler", "crank_nicolson"):
            raise DomainError(f"unknown diffusion scheme {self.diffusion_scheme!r}")
        if self.advection_scheme not in ("upwind", "characteristic_remap"):
            raise DomainError(f"unknown advection scheme {self.advection_scheme!r}")
        if not 0.0 < self.cfl_fraction <= 1.0:
            raise DomainError("cfl_fraction must lie in (0, 1]")
        if isinstance(self.dt, str) and self.dt != "adaptive":
            raise DomainError("dt must be a positive number or 'adaptive'")
        if not isinstance(self.dt, str) and self.dt <= 0.0:
            raise DomainError("dt must be a positive number or 'adaptive'")


def _advect(field, dt, grid, spec, stepper, psi):
    if stepper.advection_scheme == "characteristic_remap":
        return _remap_advect(field, dt, grid, spec, psi)
    # Heun (SSP-RK2) over the conservative upwind flux keeps the substep
    # second order in dt while preserving positivity under the same CFL.
    once = step_advection_a(
        field, dt, grid, spec, cfl_fraction=stepper.cfl_fraction, psi=psi, check_cfl=True
    )
    twice = step_advection_a(
        once, dt, grid, spec, cfl_fraction=stepper.cfl_fraction, psi=psi, check_cfl=False
    )
    values = 0.5 * (field.values + twice.values)
    boundary = 0.5 * (field.boundary_mass + twice.boundary_mass)
    return Field(values, boundary, field.time + dt)


def _clip_positive(field: Field, stepper: StepperConfig) -> Field:
    if not stepper.positivity_clip:
        return field
    vals = field.values
    if vals.size and vals.min() < 0.0:
        floor = -1e-10 * max(vals.max(), 1.0)
        if vals.min() < floor:
            raise NumericalFailure(
                f"positivity lost: min value {vals.min():g} below tolerance", field=field
            )
        field = Field(np.clip(vals, 0.0, None), field.boundary_mass, field.time)
    return field


def step(field: Field, dt: float, grid: Grid, spec: ProblemSpec, stepper: StepperConfig) -> Field:
    """Strang-split step: advection half step, diffusion full step, advection half step."""
    psi = psi_on_grid(grid, spec)
    return _step_with_psi(field, dt, grid, spec, stepper, psi)


def _step_with_psi(field, dt, grid, spec, stepper, psi):
    f = _advect(field, 0.5 * dt, grid, spec, stepper, psi)
    if spec.diffusion_exponent > 1.0:
        # explicit porous update sub-steps itself to its stability limit
        remaining = dt
        for _ in range(100_000):
            if remaining <= 0.0:
                break
            h = min(remaining, porous_stable_dt(f, grid, spec, fraction=0.9))
            f = step_porous_diffusion(f, h, grid, spec)
            remaining -= h
        else:
            raise NumericalFailure("porous stability limit collapsed", field=f)
    else:
        f = step_diffusion(f, dt, grid, spec, scheme=stepper.diffusion_scheme)
    f = _advect(f, 0.5 * dt, grid, spec, stepper, psi)
    f = Field(f.values, f.boundary_mass, field.time + dt)
    return _clip_positive(f, stepper)


@dataclass
class RunResult:
    final: Field
    series: "object"  # diagnostics.DiagnosticsSeries
    report: "object"  # diagnostics.BlowupReport


def run(
    problem: ProblemSpec,
    initial: InitialDataSpec,
    grid: Grid,
    t_end: float,
    stepper: StepperConfig,
    observers: Sequence[Callable[[Field], None]] = (),
    diag=None,
    output_times: Optional[np.ndarray] = None,
) -> RunResult:
    """Advance the model to t_end or until the blow-up detector fires.

    Diagnostics rows are collected at every output time; dt follows the
    adaptive policy (CFL- or stability-limited, halved whenever the virial
    monitor doubles between outputs) and a collapse below dt_min terminates
    the run with a numerical blow-up declaration.  Deterministic for identical
    inputs.
    """
    from . import diagnostics as diag_mod

    if t_end <= 0.0:
        raise DomainError("t_end must be positive")
    cfg = diag or diag_mod.DiagnosticsConfig.for_problem(problem)
    if output_times is None:
        output_times = np.linspace(0.0, t_end, 51)[1:]
    output_times = np.asarray(output_times, dtype=float)
    output_times = output_times[(output_times > 0.0) & (output_times <= t_end + 1e-15)]

    psi = psi_on_grid(grid, problem)
    fld = build_initial_field(grid, initial)
    rows = [diag_mod.compute_row(fld, grid, problem, cfg)]
    for obs in observers:
        obs(fld)

    adaptive = isinstance(stepper.dt, str)
    dt_policy = stepper.dt_initial if adaptive else float(stepper.dt)
    y_prev = rows[0].virial_y
    dt_collapsed = False

    for t_next in output_times:
        while fld.time < t_next - 1e-13:
            dt = dt_policy
            if adaptive:
                if stepper.advection_scheme == "upwind":
                    dt = min(dt, stepper.cfl_fraction * advection_cfl_dt(fld, grid, problem, psi))
                if problem.diffusion_exponent > 1.0:
                    dt = min(dt, porous_stable_dt(fld, grid, problem, fraction=stepper.cfl_fraction))
                if dt < stepper.dt_min:
                    dt_collapsed = True
                    break
            remaining = t_next - fld.time
            nsub = max(1, int(math.ceil(remaining / dt - 1e-9)))
            h = remaining / nsub
            fld = _step_with_psi(fld, h, grid, problem, stepper, psi)
            if not np.all(np.isfinite(fld.values)):
                raise NumericalFailure("non-finite field during run", field=fld, rows=rows)
        if dt_collapsed:
            break
        row = diag_mod.compute_row(fld, grid, problem, cfg)
        rows.append(row)
        for obs in observers:
            obs(fld)
        virial_fired = row.virial_y >= cfg.virial_factor * max(rows[0].virial_y, 1e-300)
        lp_fired = cfg.detector_value(row) >= cfg.lp_factor * max(
            cfg.detector_value(rows[0]), 1e-300
        )
        if virial_fired and lp_fired:
            break
        if adaptive and row.virial_y >= 2.0 * max(y_prev, 1e-300):
            dt_policy = 0.5 * dt_policy
            if dt_policy < stepper.dt_min:
                dt_collapsed = True
                break
        y_prev = row.virial_y

    series = diag_mod.DiagnosticsSeries.from_rows(rows, config=cfg)
    report = diag_mod.detect_blowup(
        series,
        cfg,
        problem=problem,
        grid=grid,
        initial_field_moment=rows[0].moment_1mg,
        dt_collapsed=dt_collapsed,
    )
    return RunResult(final=fld, series=series, report=report)


# ---------------------------------------------------------------------------
# field dumps
# ---------------------------------------------------------------------------


def write_field_csv(field: Field, grid: Grid, path) -> None:
    """Plain-text dump, row-major by x then a; boundary mass in a final
    sentinel row with a = -1.  2d fields gain a y column."""
    with open(path, "w") as fh:
        if grid.dimension == 1:
            fh.write("x,a,u\n")
            for i, x in enumerate(grid.x_centers):
                for j, a in enumerate(grid.a_centers):
                    fh.write(f"{x:.12e},{a:.12e},{field.values[i, j]:.12e}\n")
            fh.write(f"0.0,-1.0,{field.boundary_mass:.12e}\n")
        else:
            fh.write("x,y,a,u\n")
            for i, x in enumerate(grid.x_centers):
                for k, y in enumerate(grid.y_centers):
                    for j, a in enumerate(grid.a_centers):
                        fh.write(f"{x:.12e},{y:.12e},{a:.12e},{field.values[i, k, j]:.12e}\n")
            fh.write(f"0.0,0.0,-1.0,{field.boundary_mass:.12e}\n")
