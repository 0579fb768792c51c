"""Euler-Maruyama simulation of the position/lipid-load particle system.

Each particle carries a position X (diffusing with coefficient A) and a lipid
load A driven by -psi(X) f(A) + lambda g(A).  When the load of a decelerating
particle with gamma < 1 reaches zero the particle is trapped: an absorbing
state in which neither coordinate moves again.  Noise comes from a
counter-based generator keyed by (seed, step index), so trajectories are
reproducible for a fixed (seed, config) regardless of how the ensemble would
be partitioned across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.random import Generator, Philox

from .model import DomainError, DriftSign, ProblemSpec, drift_f, logistic_g
from .pde import Field, Grid

__all__ = [
    "Particle",
    "EnsembleResult",
    "FieldSampler",
    "em_step",
    "simulate_ensemble",
    "empirical_density",
    "step_normals",
    "write_trajectory_csv",
]

_INIT_STREAM = 2**31  # counter block reserved for initial sampling


def step_normals(seed: int, step_index: int, count: int, block: int = 0) -> np.ndarray:
    """Standard normals for one step, from a Philox counter keyed by
    (seed, step index, block); entry i belongs to particle i."""
    bg = Philox(counter=[0, 0, int(block), int(step_index)], key=np.uint64(seed))
    return Generator(bg).standard_normal(count)


def _step_uniforms(seed: int, step_index: int, count: int, block: int = 0) -> np.ndarray:
    bg = Philox(counter=[0, 0, int(block), int(step_index)], key=np.uint64(seed))
    return Generator(bg).random(count)


@dataclass(frozen=True)
class Particle:
    """One particle state; x is a float in 1d, a length-2 array in 2d."""

    x: object
    a: float
    trapped: bool = False
    trap_time: Optional[float] = None


def _drift_a(a, psi_val, spec: ProblemSpec):
    return -psi_val * drift_f(a, spec.drift) + spec.logistic.lam * logistic_g(a, spec.logistic)


def em_step(p: Particle, dt: float, spec: ProblemSpec, noise, t: float = 0.0) -> Particle:
    """One Euler-Maruyama step of an untrapped particle.

    The position moves by sqrt(2 a dt) * noise (one draw per spatial
    dimension, evaluated at the pre-step state); the load follows the explicit
    drift and is clamped at zero, which traps the particle when gamma < 1
    deceleration.
    """
    if dt <= 0.0:
        raise DomainError("dt must be positive")
    if p.trapped:
        raise DomainError("em_step expects an untrapped particle")
    if spec.dimension == 1:
        psi_val = spec.localization.evaluate(p.x)
        x_new = p.x + math.sqrt(2.0 * p.a * dt) * float(np.asarray(noise).reshape(-1)[0])
    else:
        xv = np.asarray(p.x, dtype=float)
        psi_val = spec.localization.evaluate(xv[0], xv[1])
        x_new = xv + math.sqrt(2.0 * p.a * dt) * np.asarray(noise, dtype=float).reshape(2)
    a_new = max(p.a + dt * _drift_a(p.a, psi_val, spec), 0.0)
    traps = (
        a_new == 0.0
        and spec.drift.sign is DriftSign.DECELERATION
        and spec.drift.gamma < 1.0
    )
    return Particle(
        x=x_new,
        a=a_new,
        trapped=traps,
        trap_time=(t + dt) if traps else p.trap_time,
    )


class FieldSampler:
    """Draws initial particles from the discrete measure of a field: a cell is
    picked proportionally to its mass and the particle is placed uniformly
    inside, so the sample matches the solver datum exactly in distribution."""

    def __init__(self, field: Field, grid: Grid):
        self.grid = grid
        masses = (field.values * grid.a_widths) * (
            grid.dx if grid.dimension == 1 else grid.dx * grid.dy
        )
        flat = masses.reshape(-1)
        total = flat.sum()
        if total <= 0.0:
            raise DomainError("cannot sample from an empty field")
        self._cum = np.cumsum(flat) / total
        self._shape = masses.shape

    def sample(self, n: int, seed: int):
        u_cell = _step_uniforms(seed, _INIT_STREAM, n, block=0)
        u_x = _step_uniforms(seed, _INIT_STREAM, n, block=1)
        u_a = _step_uniforms(seed, _INIT_STREAM, n, block=2)
        flat_idx = np.searchsorted(self._cum, u_cell, side="right")
        flat_idx = np.minimum(flat_idx, self._cum.size - 1)
        grid = self.grid
        if grid.dimension == 1:
            ix, ja = np.unravel_index(flat_idx, self._shape)
            x = grid.x_edges[ix] + u_x * grid.dx
            a = grid.a_edges[ja] + u_a * grid.a_widths[ja]
            return x, a
        ix, iy, ja = np.unravel_index(flat_idx, self._shape)
        u_y = _step_uniforms(seed, _INIT_STREAM, n, block=3)
        x = np.stack(
            [grid.x_edges[ix] + u_x * grid.dx, grid.y_edges[iy] + u_y * grid.dy], axis=1
        )
        a = grid.a_edges[ja] + u_a * grid.a_widths[ja]
        return x, a


@dataclass(eq=False)
class EnsembleResult:
    times: np.ndarray
    trapped_fraction: np.ndarray
    mean_a: np.ndarray
    var_x: np.ndarray
    mean_x: np.ndarray
    x: np.ndarray  # final positions
    a: np.ndarray  # final loads
    trapped: np.ndarray
    trap_time: np.ndarray
    seed: int

    def trapped_fraction_at(self, t: float) -> float:
        return float(np.interp(t, self.times, self.trapped_fraction))


def simulate_ensemble(
    n: int,
    sampler,
    spec: ProblemSpec,
    dt: float,
    t_end: float,
    seed: int,
    output_times: Optional[np.ndarray] = None,
) -> EnsembleResult:
    """Evolve n independent particles; deterministic per seed.

    Near the absorbing state (gamma < 1 deceleration) the load update is
    sub-stepped with half steps to resolve the finite-time touchdown.
    Reductions run in a fixed order so results do not depend on scheduling.
    """
    if n < 1:
        raise DomainError("need at least one particle")
    if dt <= 0.0 or t_end <= 0.0:
        raise DomainError("dt and t_end must be positive")
    x, a = sampler.sample(n, seed)
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    trapped = np.zeros(n, dtype=bool)
    trap_time = np.full(n, np.nan)
    if output_times is None:
        output_times = np.linspace(0.0, t_end, 26)
    output_times = np.asarray(output_times, dtype=float)

    gamma = spec.drift.gamma
    decel = spec.drift.sign is DriftSign.DECELERATION
    can_trap = decel and gamma < 1.0
    small_a = 10.0 * dt ** (1.0 / (1.0 - gamma)) if can_trap else 0.0

    nsteps = int(round(t_end / dt))
    nsteps = max(nsteps, 1)
    out = {"t": [], "frac": [], "mean_a": [], "var_x": [], "mean_x": []}

    def record(t):
        out["t"].append(t)
        out["frac"].append(float(trapped.mean()))
        out["mean_a"].append(float(a.mean()))
        if spec.dimension == 1:
            out["var_x"].append(float(x.var()))
            out["mean_x"].append(float(x.mean()))
        else:
            out["var_x"].append(float(x.var(axis=0).sum()))
            out["mean_x"].append(float(x[:, 0].mean()))

    next_out = 0
    t = 0.0
    while next_out < output_times.size and output_times[next_out] <= 1e-14:
        record(0.0)
        next_out += 1
    for k in range(nsteps):
        live = ~trapped
        if spec.dimension == 1:
            noise = step_normals(seed, k, n, block=0)
            psi_val = np.asarray(spec.localization.evaluate(x), dtype=float)
            x = np.where(live, x + np.sqrt(2.0 * a * dt) * noise, x)
        else:
            n0 = step_normals(seed, k, n, block=0)
            n1 = step_normals(seed, k, n, block=1)
            psi_val = np.asarray(spec.localization.evaluate(x[:, 0], x[:, 1]), dtype=float)
            amp = np.sqrt(2.0 * a * dt)
            x[:, 0] = np.where(live, x[:, 0] + amp * n0, x[:, 0])
            x[:, 1] = np.where(live, x[:, 1] + amp * n1, x[:, 1])
        # load update, sub-stepped near touchdown
        a_next = a + dt * _drift_a(a, psi_val, spec)
        if can_trap:
            fine = live & (a < small_a) & (a > 0.0)
            if fine.any():
                half = a[fine]
                for _ in range(2):
                    half = np.clip(
                        half + 0.5 * dt * _drift_a(half, psi_val[fine], spec), 0.0, None
                    )
                a_next[fine] = half
        a_next = np.clip(a_next, 0.0, None)
        a = np.where(live, a_next, a)
        t = (k + 1) * dt
        if can_trap:
            newly = live & (a == 0.0)
            if newly.any():
                trapped |= newly
                trap_time[newly] = t
        while next_out < output_times.size and output_times[next_out] <= t + 1e-12:
            record(t)
            next_out += 1
    while next_out < output_times.size:
        record(t)
        next_out += 1
    return EnsembleResult(
        times=np.array(out["t"]),
        trapped_fraction=np.array(out["frac"]),
        mean_a=np.array(out["mean_a"]),
        var_x=np.array(out["var_x"]),
        mean_x=np.array(out["mean_x"]),
        x=x,
        a=a,
        trapped=trapped,
        trap_time=trap_time,
        seed=seed,
    )


def empirical_density(result: EnsembleResult, grid: Grid, total_mass: float = 1.0) -> Field:
    """Histogram estimate of the density on the solver grid, normalized to the
    total mass; trapped particles are reported through the boundary-mass
    accumulator, untrapped mass lands in the cells containing it."""
    n = result.a.size
    w = total_mass / n
    live = ~result.trapped
    eps = 1e-12
    if grid.dimension == 1:
        xs = np.clip(result.x[live], grid.x_edges[0] + eps, grid.x_edges[-1] - eps)
        aa = np.clip(result.a[live], grid.a_edges[0] + eps, grid.a_edges[-1] - eps)
        counts, _, _ = np.histogram2d(xs, aa, bins=[grid.x_edges, grid.a_edges])
        values = counts * w / (grid.dx * grid.a_widths[None, :])
    else:
        xs = np.clip(result.x[live, 0], grid.x_edges[0] + eps, grid.x_edges[-1] - eps)
        ys = np.clip(result.x[live, 1], grid.y_edges[0] + eps, grid.y_edges[-1] - eps)
        aa = np.clip(result.a[live], grid.a_edges[0] + eps, grid.a_edges[-1] - eps)
        counts, _ = np.histogramdd(
            np.stack([xs, ys, aa], axis=1), bins=[grid.x_edges, grid.y_edges, grid.a_edges]
        )
        values = counts * w / (grid.dx * grid.dy * grid.a_widths[None, None, :])
    boundary = float(result.trapped.sum()) * w
    return Field(values, boundary_mass=boundary, time=float(result.times[-1]))


def write_trajectory_csv(result: EnsembleResult, path, per_particle: bool = False) -> None:
    with open(path, "w") as fh:
        fh.write("t,trapped_fraction,mean_a,var_x,mean_x\n")
        for k in range(result.times.size):
            fh.write(
                f"{result.times[k]:.12e},{result.trapped_fraction[k]:.12e},"
                f"{result.mean_a[k]:.12e},{result.var_x[k]:.12e},{result.mean_x[k]:.12e}\n"
            )
    if per_particle:
        import os

        base, ext = os.path.splitext(str(path))
        with open(base + "_particles" + ext, "w") as fh:
            fh.write("x,a,trapped,trap_time\n")
            for i in range(result.a.size):
                xi = result.x[i] if result.x.ndim == 1 else result.x[i, 0]
                fh.write(
                    f"{xi:.12e},{result.a[i]:.12e},{int(result.trapped[i])},"
                    f"{result.trap_time[i]:.12e}\n"
                )
