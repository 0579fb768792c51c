"""Batch front-end: sectioned key = value configs, presets, CSV artifacts.

Config files use the flat INI-style format documented in the README, with the
five sections [problem], [initial], [stepper], [diagnostics], [output].
Unknown keys are errors (with the offending line), not warnings.  Exit codes:
0 completed globally, 3 blow-up detected, 1 configuration error, 2 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

import numpy as np

from . import diagnostics as diag_mod
from . import particles as particles_mod
from . import pde
from .diagnostics import DiagnosticsConfig
from .model import (
    DomainError,
    DriftSign,
    DriftSpec,
    InitialDataSpec,
    LocalizationSpec,
    LogisticSpec,
    ProblemSpec,
    Profile,
)
from .pde import StepperConfig, make_grid
from .presets import PRESETS, RunSetup, build_preset, preset_names

__all__ = ["ConfigError", "RunConfig", "parse_config", "run_preset", "execute", "main"]

_SECTIONS = ("problem", "initial", "stepper", "diagnostics", "output")

# (section, key) -> python type; "dt" also accepts the string "adaptive"
_SCHEMA: Dict[Tuple[str, str], type] = {
    ("problem", "preset"): str,
    ("problem", "dimension"): int,
    ("problem", "drift"): str,
    ("problem", "gamma"): float,
    ("problem", "localization"): str,
    ("problem", "delta"): float,
    ("problem", "lambda"): float,
    ("problem", "a_star"): float,
    ("problem", "q"): float,
    ("problem", "x_half_width"): float,
    ("problem", "a_max"): float,
    ("problem", "nx"): int,
    ("problem", "ny"): int,
    ("problem", "na"): int,
    ("problem", "grading_ratio"): float,
    ("initial", "a_lo"): float,
    ("initial", "a_hi"): float,
    ("initial", "mass"): float,
    ("initial", "x_shape"): str,
    ("initial", "x_center"): float,
    ("initial", "x_width"): float,
    ("initial", "a_shape"): str,
    ("initial", "a_center"): float,
    ("initial", "a_width"): float,
    ("stepper", "dt"): str,
    ("stepper", "dt_initial"): float,
    ("stepper", "dt_min"): float,
    ("stepper", "cfl_fraction"): float,
    ("stepper", "diffusion_scheme"): str,
    ("stepper", "advection_scheme"): str,
    ("stepper", "positivity_clip"): bool,
    ("diagnostics", "p"): float,
    ("diagnostics", "virial_m"): float,
    ("diagnostics", "moment_exponent"): float,
    ("diagnostics", "virial_factor"): float,
    ("diagnostics", "lp_factor"): float,
    ("diagnostics", "detector_norm"): str,
    ("diagnostics", "support_threshold"): float,
    ("output", "dir"): str,
    ("output", "t_end"): float,
    ("output", "interval"): float,
    ("output", "seed"): int,
    ("output", "threads"): int,
    ("output", "field_dumps"): str,
    ("output", "particles_n"): int,
    ("output", "particles_dt"): float,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    setup: RunSetup
    out_dir: str = "out"
    seed: int = 20240613
    threads: int = 0  # 0: all cores; advisory in this implementation
    field_dumps: str = "final"  # none | final | all
    particles_n: int = 0
    particles_dt: float = 1e-3


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _parse_sections(text: str):
    sections: Dict[str, Dict[str, Tuple[str, int]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header {line!r}")
            name = line[1:-1].strip()
            if name not in _SECTIONS:
                raise ConfigError(
                    f"line {lineno}: unknown section [{name}]; expected one of {_SECTIONS}"
                )
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0].strip().strip("\"'")
        if key in current:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        current[key] = (value, lineno)
    return sections


def _typed(section: str, key: str, raw: str, lineno: int):
    try:
        want = _SCHEMA[(section, key)]
    except KeyError:
        raise ConfigError(f"[{section}] {key} (line {lineno}): unknown key") from None
    try:
        if want is bool:
            lowered = raw.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError("not a boolean")
        if (section, key) == ("stepper", "dt"):
            return raw if raw == "adaptive" else float(raw)
        return want(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} (line {lineno}): {exc}") from None


def _fail(section: str, key: str, lineno: int, message: str):
    raise ConfigError(f"[{section}] {key} (line {lineno}): {message}")


_DEFAULT_BUMP_WIDTH = 0.5


def _build_initial(params: dict, where) -> InitialDataSpec:
    a_lo = params.get("a_lo")
    a_hi = params.get("a_hi")
    if a_lo is None or a_hi is None:
        raise ConfigError("[initial]: a_lo and a_hi are required without a preset")
    x_shape = params.get("x_shape", "bump")
    x_center = params.get("x_center", 0.0)
    x_width = params.get("x_width", _DEFAULT_BUMP_WIDTH)
    if x_shape == "bump":
        x_profile = Profile.bump(x_center, x_width)
    elif x_shape == "uniform":
        x_profile = Profile.uniform(x_center - x_width, x_center + x_width)
    else:
        raise ConfigError(f"[initial] x_shape: unknown shape {x_shape!r}")
    a_shape = params.get("a_shape", "uniform")
    if a_shape == "uniform":
        a_profile = Profile.uniform(a_lo, a_hi)
    elif a_shape == "bump":
        a_center = params.get("a_center", 0.5 * (a_lo + a_hi))
        a_width = params.get("a_width", 0.5 * (a_hi - a_lo))
        a_profile = Profile.bump(a_center, a_width)
    else:
        raise ConfigError(f"[initial] a_shape: unknown shape {a_shape!r}")
    return InitialDataSpec(
        a_lo=a_lo,
        a_hi=a_hi,
        x_profile=x_profile,
        a_profile=a_profile,
        total_mass=params.get("mass", 1.0),
    )


def parse_config(text: str) -> RunConfig:
    """Parse and validate the documented key = value format into a RunConfig.

    A ``preset`` key pulls in a complete scenario; every other key overrides
    it.  Without a preset, [problem] gamma and localization plus [initial]
    a_lo/a_hi and [output] t_end are required.
    """
    raw = _parse_sections(text)
    vals: Dict[str, Dict[str, object]] = {}
    lines: Dict[Tuple[str, str], int] = {}
    for section, entries in raw.items():
        vals[section] = {}
        for key, (rv, lineno) in entries.items():
            vals[section][key] = _typed(section, key, rv, lineno)
            lines[(section, key)] = lineno

    problem_kv = vals.get("problem", {})
    initial_kv = vals.get("initial", {})
    stepper_kv = vals.get("stepper", {})
    diag_kv = vals.get("diagnostics", {})
    output_kv = vals.get("output", {})

    def line_of(section, key):
        return lines.get((section, key), 0)

    preset = problem_kv.pop("preset", None)
    if preset is not None:
        try:
            setup = build_preset(str(preset))
        except KeyError as exc:
            _fail("problem", "preset", line_of("problem", "preset"), str(exc))
    else:
        for req in ("gamma", "localization"):
            if req not in problem_kv:
                raise ConfigError(f"[problem]: required key {req!r} missing (no preset given)")
        if "t_end" not in output_kv:
            raise ConfigError("[output]: required key 't_end' missing (no preset given)")
        setup = None

    try:
        setup = _apply_overrides(setup, problem_kv, initial_kv, stepper_kv, diag_kv, output_kv)
    except (DomainError, ConfigError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc

    return RunConfig(
        setup=setup,
        out_dir=str(output_kv.get("dir", "out")),
        seed=int(output_kv.get("seed", setup.seed)),
        threads=int(output_kv.get("threads", 0)),
        field_dumps=str(output_kv.get("field_dumps", "final")),
        particles_n=int(output_kv.get("particles_n", 0)),
        particles_dt=float(output_kv.get("particles_dt", 1e-3)),
    )


def _apply_overrides(setup, problem_kv, initial_kv, stepper_kv, diag_kv, output_kv) -> RunSetup:
    if setup is None:
        problem = _problem_from_scratch(problem_kv)
        initial = _build_initial(initial_kv, None)
        stepper = StepperConfig()
        setup = RunSetup(
            problem=problem,
            initial=initial,
            nx=int(problem_kv.get("nx", 128)),
            na=int(problem_kv.get("na", 128)),
            ny=problem_kv.get("ny"),
            grading_ratio=float(problem_kv.get("grading_ratio", 1.0)),
            stepper=stepper,
            diagnostics=DiagnosticsConfig.for_problem(problem),
            t_end=float(output_kv["t_end"]),
            output_interval=float(output_kv.get("interval", output_kv["t_end"] / 50.0)),
        )
    else:
        setup = _override_problem(setup, problem_kv)
        if initial_kv:
            setup = replace(setup, initial=_merge_initial(setup.initial, initial_kv))
        if "t_end" in output_kv:
            setup = replace(setup, t_end=float(output_kv["t_end"]))
        if "interval" in output_kv:
            setup = replace(setup, output_interval=float(output_kv["interval"]))
    if stepper_kv:
        mapped = {("dt" if k == "dt" else k): v for k, v in stepper_kv.items()}
        setup = replace(setup, stepper=replace(setup.stepper, **mapped))
    # re-derive the diagnostics defaults when the exponent changed, then apply
    # explicit diagnostic keys on top
    if setup.diagnostics.gamma != setup.problem.drift.gamma:
        setup = replace(setup, diagnostics=DiagnosticsConfig.for_problem(setup.problem))
    if diag_kv:
        remap = {
            "p": "p_extra",
            "virial_m": "virial_m",
            "moment_exponent": "moment_exponent",
            "virial_factor": "virial_factor",
            "lp_factor": "lp_factor",
            "detector_norm": "detector_norm",
            "support_threshold": "support_threshold_rel",
        }
        setup = replace(
            setup,
            diagnostics=replace(
                setup.diagnostics, **{remap[k]: v for k, v in diag_kv.items()}
            ),
        )
    if "particles_n" in output_kv:
        setup = replace(setup, particles_n=int(output_kv["particles_n"]))
    if "particles_dt" in output_kv:
        setup = replace(setup, particles_dt=float(output_kv["particles_dt"]))
    if "seed" in output_kv:
        setup = replace(setup, seed=int(output_kv["seed"]))
    return setup


def _problem_from_scratch(problem_kv) -> ProblemSpec:
    loc_kind = str(problem_kv.get("localization"))
    if loc_kind == "interval":
        if "delta" not in problem_kv:
            raise ConfigError("[problem]: interval localization requires 'delta'")
        localization = LocalizationSpec.interval(float(problem_kv["delta"]))
    elif loc_kind == "whole_line":
        localization = LocalizationSpec.whole_line()
    elif loc_kind == "smooth_bump":
        localization = LocalizationSpec.smooth_bump()
    elif loc_kind == "ball_2d":
        localization = LocalizationSpec.ball_2d()
    else:
        raise ConfigError(f"[problem] localization: unknown kind {loc_kind!r}")
    return ProblemSpec(
        dimension=int(problem_kv.get("dimension", 2 if loc_kind == "ball_2d" else 1)),
        drift=DriftSpec(
            DriftSign(problem_kv.get("drift", "deceleration")),
            float(problem_kv["gamma"]),
        ),
        localization=localization,
        logistic=LogisticSpec(
            lam=float(problem_kv.get("lambda", 0.0)),
            a_star=float(problem_kv.get("a_star", 1.0)),
        ),
        diffusion_exponent=float(problem_kv.get("q", 1.0)),
        x_half_width=float(problem_kv.get("x_half_width", 4.0)),
        a_max=float(problem_kv.get("a_max", 1.0)),
    )


def _override_problem(setup: RunSetup, problem_kv) -> RunSetup:
    problem = setup.problem
    if not problem_kv:
        return setup
    drift = problem.drift
    if "drift" in problem_kv or "gamma" in problem_kv:
        drift = DriftSpec(
            DriftSign(problem_kv.get("drift", drift.sign.value)),
            float(problem_kv.get("gamma", drift.gamma)),
        )
    localization = problem.localization
    if "localization" in problem_kv or "delta" in problem_kv:
        kind = problem_kv.get("localization", localization.kind.value)
        if kind == "interval":
            localization = LocalizationSpec.interval(
                float(problem_kv.get("delta", localization.delta or 0.5))
            )
        elif kind == "whole_line":
            localization = LocalizationSpec.whole_line()
        elif kind == "smooth_bump":
            localization = LocalizationSpec.smooth_bump()
        elif kind == "ball_2d":
            localization = LocalizationSpec.ball_2d()
        else:
            raise ConfigError(f"[problem] localization: unknown kind {kind!r}")
    logistic = problem.logistic
    if "lambda" in problem_kv or "a_star" in problem_kv:
        logistic = LogisticSpec(
            lam=float(problem_kv.get("lambda", logistic.lam)),
            a_star=float(problem_kv.get("a_star", logistic.a_star)),
        )
    problem = ProblemSpec(
        dimension=int(problem_kv.get("dimension", problem.dimension)),
        drift=drift,
        localization=localization,
        logistic=logistic,
        diffusion_exponent=float(problem_kv.get("q", problem.diffusion_exponent)),
        x_half_width=float(problem_kv.get("x_half_width", problem.x_half_width)),
        a_max=float(problem_kv.get("a_max", problem.a_max)),
    )
    out = replace(setup, problem=problem)
    for key, attr in (("nx", "nx"), ("na", "na"), ("ny", "ny"), ("grading_ratio", "grading_ratio")):
        if key in problem_kv:
            out = replace(out, **{attr: problem_kv[key]})
    return out


def _merge_initial(initial: InitialDataSpec, kv: dict) -> InitialDataSpec:
    params = {
        "a_lo": kv.get("a_lo", initial.a_lo),
        "a_hi": kv.get("a_hi", initial.a_hi),
        "mass": kv.get("mass", initial.total_mass),
    }
    # only rebuild the profiles that were actually touched
    x_keys = {"x_shape", "x_center", "x_width"} & kv.keys()
    a_keys = {"a_shape", "a_center", "a_width", "a_lo", "a_hi"} & kv.keys()
    if x_keys:
        params.update({k: kv[k] for k in ("x_shape", "x_center", "x_width") if k in kv})
        x_profile = _build_initial(params, None).x_profile
    else:
        x_profile = initial.x_profile
    if a_keys:
        params.setdefault("a_shape", kv.get("a_shape", "uniform"))
        params.update({k: kv[k] for k in ("a_shape", "a_center", "a_width") if k in kv})
        a_profile = _build_initial(params, None).a_profile
    else:
        a_profile = initial.a_profile
    return InitialDataSpec(
        a_lo=params["a_lo"],
        a_hi=params["a_hi"],
        x_profile=x_profile,
        a_profile=a_profile,
        total_mass=params["mass"],
        y_profile=initial.y_profile,
    )


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


def execute(config: RunConfig) -> int:
    """Run one configuration, write artifacts, return the exit status."""
    setup = config.setup
    os.makedirs(config.out_dir, exist_ok=True)
    try:
        grid = make_grid(setup.problem, setup.nx, setup.na, setup.grading_ratio, ny=setup.ny)
        observers = []
        if config.field_dumps == "all":
            observers.append(
                lambda fld: pde.write_field_csv(
                    fld, grid, os.path.join(config.out_dir, f"field_t{fld.time:.6f}.csv")
                )
            )
        result = pde.run(
            setup.problem,
            setup.initial,
            grid,
            setup.t_end,
            setup.stepper,
            observers=observers,
            diag=setup.diagnostics,
            output_times=setup.output_times(),
        )
        diag_mod.write_diagnostics_csv(result.series, os.path.join(config.out_dir, "diagnostics.csv"))
        diag_mod.write_report(result.report, os.path.join(config.out_dir, "report.json"))
        if config.field_dumps == "final":
            initial_field = pde.build_initial_field(grid, setup.initial)
            pde.write_field_csv(
                initial_field, grid, os.path.join(config.out_dir, "field_t0.000000.csv")
            )
            pde.write_field_csv(
                result.final,
                grid,
                os.path.join(config.out_dir, f"field_t{result.final.time:.6f}.csv"),
            )
        if config.particles_n > 0:
            initial_field = pde.build_initial_field(grid, setup.initial)
            sampler = particles_mod.FieldSampler(initial_field, grid)
            ens = particles_mod.simulate_ensemble(
                config.particles_n,
                sampler,
                setup.problem,
                config.particles_dt,
                setup.t_end,
                config.seed,
            )
            particles_mod.write_trajectory_csv(ens, os.path.join(config.out_dir, "trajectory.csv"))
        return 3 if result.report.verdict == "blow_up" else 0
    except (pde.NumericalFailure, pde.StabilityError, pde.CFLError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def run_preset(name: str, overrides: Optional[dict] = None, out_dir: str = "out",
               seed: Optional[int] = None) -> int:
    """Run a named preset with optional section.key overrides; artifacts on disk."""
    pieces = [f"[problem]\npreset = \"{name}\"\n"]
    lines = {s: [] for s in _SECTIONS}
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must be section.key")
        section, key = dotted.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"override {dotted!r}: unknown section")
        lines[section].append(f"{key} = {value}")
    text = f'[problem]\npreset = "{name}"\n' + "\n".join(lines["problem"]) + "\n"
    for section in _SECTIONS[1:]:
        if lines[section]:
            text += f"[{section}]\n" + "\n".join(lines[section]) + "\n"
    config = parse_config(text)
    config.out_dir = out_dir
    if seed is not None:
        config.seed = seed
        config.setup = replace(config.setup, seed=seed)
    if name == "sde-crosscheck" and config.particles_n == 0:
        config.particles_n = config.setup.particles_n
        config.particles_dt = config.setup.particles_dt
    return execute(config)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="64-bit run seed")
    p.add_argument("--threads", type=int, default=0,
                   help="worker cap (advisory; outputs are deterministic regardless)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config key")


def _overrides_from_args(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, _, value = item.partition("=")
        out[dotted.strip()] = value.strip()
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lipidtrap",
        description="Structured drift-diffusion laboratory: PDE runs, particle runs, sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one configuration or preset")
    group = p_run.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", help="path to a key = value config file")
    group.add_argument("--preset", choices=preset_names(), help="named scenario")
    _add_common(p_run)

    p_sweep = sub.add_parser("sweep", help="serial parameter sweep, one subdirectory per value")
    p_sweep.add_argument("--param", required=True, help="parameter to sweep (e.g. gamma or problem.gamma)")
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep_group = p_sweep.add_mutually_exclusive_group(required=True)
    sweep_group.add_argument("--config", help="path to a config file")
    sweep_group.add_argument("--preset", choices=preset_names(), help="named scenario")
    _add_common(p_sweep)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_sweep(args)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


def _load_config(args, extra_overrides: Optional[dict] = None) -> RunConfig:
    overrides = _overrides_from_args(args)
    overrides.update(extra_overrides or {})
    if args.config:
        with open(args.config) as fh:
            text = fh.read()
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if not key:
                raise ConfigError(f"--set {dotted!r}: expected section.key")
            text += f"\n[{section}]\n{key} = {value}\n"
        config = parse_config(text)
    else:
        pieces = {}
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if not key:
                raise ConfigError(f"--set {dotted!r}: expected section.key")
            pieces.setdefault(section, []).append(f"{key} = {value}")
        text = f'[problem]\npreset = "{args.preset}"\n'
        for section in _SECTIONS:
            if section in pieces:
                if section != "problem":
                    text += f"[{section}]\n"
                text += "\n".join(pieces[section]) + "\n"
        config = parse_config(text)
        if args.preset == "sde-crosscheck" and config.particles_n == 0:
            config.particles_n = config.setup.particles_n
            config.particles_dt = config.setup.particles_dt
    config.out_dir = args.out
    if args.seed is not None:
        config.seed = args.seed
        config.setup = replace(config.setup, seed=args.seed)
    config.threads = args.threads
    return config


def _cmd_run(args) -> int:
    config = _load_config(args)
    code = execute(config)
    print(f"run finished with exit status {code} (artifacts in {config.out_dir})")
    return code


def _cmd_sweep(args) -> int:
    param = args.param if "." in args.param else f"problem.{args.param}"
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values produced an empty list")
    worst = 0
    for value in values:
        subdir = os.path.join(args.out, f"{param.split('.', 1)[1]}={value}")
        config = _load_config(args, extra_overrides={param: value})
        config.out_dir = subdir
        code = execute(config)
        print(f"sweep point {param}={value}: exit status {code}")
        if code in (1, 2):
            return code
        worst = max(worst, 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
