"""Command-line front end: JSON scenario in, CSV/JSON results out.

    belavkin-lab {simulate,integrate,experiment,constants,validate} CONFIG [flags]

Exit codes: 0 success, 2 validation, 3 degeneracy/divergence,
4 inconclusive experiment, 5 failed experiment or internal error.
Errors are also written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import convergence_harness as harness
from .asymptotic_calculus import derive_constants
from .continuous_limits import em_integrate, solve_ode
from .discrete_models import (
    KINDS,
    KRAUS_PRESETS,
    OBSERVABLE_PRESETS,
    SCHEMA_VERSION,
    STATE_PRESETS,
    ModelConfig,
    build_model,
    format_header,
    simulate,
    state_columns,
)
from .errors import BelavkinLabError, ValidationError
from .linalg_core import hermitian_spectral

COMMANDS = ("simulate", "integrate", "experiment", "constants", "validate")
EXPERIMENTS = ("mean_convergence", "weak_marginal_compare", "martingale_diagnostics", "residual_order",
               "robustness_scan", "deviation_scan")

# key -> (type tag, required)
SCHEMA = {
    "schema_version": ("int", True),
    "kind": ("str", True),
    "n": ("int", False),
    "dt": ("float", False),
    "T": ("float", False),
    "h0": ("matrix", False),
    "c": ("matrix", False),
    "c_plus": ("matrix", False),
    "c_minus": ("matrix", False),
    "kraus": ("kraus", False),
    "eps": ("float", False),
    "gamma_mem": ("float", False),
    "hamiltonian": ("matrix", False),
    "observable": ("observable", False),
    "rho0": ("state", False),
    "convention": ("str", False),
    "allow_diagonal": ("bool", False),
    "noise_drift": ("str", False),
    "seed": ("int", False),
    "replications": ("int", False),
    "stream_index": ("int", False),
    "experiment": ("object", False),
    "output": ("object", False),
}

EXPERIMENT_SCHEMA = {
    "name": "str", "ns": "list", "n": "int", "dt": "float", "M": "int", "times": "list",
    "functionals": "list", "sweep": "list", "eps": "list", "alpha": "float", "t": "float",
    "type": "str", "ratio": "float", "floor_multiplier": "float", "ks_reps": "int", "stride": "int",
}
OUTPUT_SCHEMA = {"prefix": "str", "formats": "list"}


@dataclass
class ScenarioConfig:
    raw: dict
    model: ModelConfig
    seed: int
    dt: float | None
    T: float
    replications: int
    stream_index: int
    noise_drift: str
    experiment: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)


# ------------------------------------------------------------ parsing


def _type_ok(tag: str, value) -> bool:
    if tag == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if tag == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if tag == "str":
        return isinstance(value, str)
    if tag == "bool":
        return isinstance(value, bool)
    if tag == "list":
        return isinstance(value, list)
    if tag in ("kraus", "observable", "state"):
        return isinstance(value, (list, str))
    if tag == "object":
        return isinstance(value, dict)
    return True


def parse_matrix(value, name: str) -> np.ndarray:
    """Rows of entries; an entry is a real number or a [re, im] pair."""
    if not isinstance(value, list) or not value or not all(isinstance(r, list) for r in value):
        raise ValidationError(f"{name}: expected a list of rows")
    width = len(value[0])
    out = np.zeros((len(value), width), dtype=complex)
    for i, row in enumerate(value):
        if len(row) != width:
            raise ValidationError(f"{name}: ragged rows")
        for j, entry in enumerate(row):
            if isinstance(entry, (int, float)) and not isinstance(entry, bool):
                out[i, j] = entry
            elif (isinstance(entry, list) and len(entry) == 2
                  and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in entry)):
                out[i, j] = complex(entry[0], entry[1])
            else:
                raise ValidationError(f"{name}[{i}][{j}]: expected a number or [re, im]")
    return out


def _preset(value, presets: dict, name: str):
    if isinstance(value, str):
        if value not in presets:
            raise ValidationError(f"{name}: unknown preset {value!r}; choose from {sorted(presets)}")
        return presets[value]
    return parse_matrix(value, name)


def _check_keys(obj: dict, schema: dict, where: str):
    for key, value in obj.items():
        if key not in schema:
            raise ValidationError(f"{where}: unknown key {key!r}")
        tag = schema[key][0] if isinstance(schema[key], tuple) else schema[key]
        if not _type_ok(tag, value):
            raise ValidationError(f"{where}: key {key!r} has the wrong type (expected {tag})")


def parse_config(raw: dict, seed_override: int | None = None) -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    _check_keys(raw, SCHEMA, "config")
    for key, (_, required) in SCHEMA.items():
        if required and key not in raw:
            raise ValidationError(f"config: missing required key {key!r}")
    if raw["schema_version"] != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {raw['schema_version']} (expected {SCHEMA_VERSION})")
    kind = raw["kind"]
    if kind not in KINDS:
        raise ValidationError(f"unknown kind {kind!r}; choose from {list(KINDS)}")
    experiment = raw.get("experiment", {})
    _check_keys(experiment, EXPERIMENT_SCHEMA, "experiment")
    output = raw.get("output", {})
    _check_keys(output, OUTPUT_SCHEMA, "output")
    convention = raw.get("convention", "standard")
    if convention not in ("standard", "adjoint"):
        raise ValidationError("convention must be 'standard' or 'adjoint'")
    noise_drift = raw.get("noise_drift", "unitarized")
    if noise_drift not in ("unitarized", "raw"):
        raise ValidationError("noise_drift must be 'unitarized' or 'raw'")

    kraus = None
    if "kraus" in raw:
        if isinstance(raw["kraus"], str):
            kraus = tuple(_preset(raw["kraus"], KRAUS_PRESETS, "kraus"))
        else:
            kraus = tuple(parse_matrix(k, f"kraus[{i}]") for i, k in enumerate(raw["kraus"]))
    model = ModelConfig(
        kind=kind,
        n=int(raw.get("n", 1)),
        h0=parse_matrix(raw["h0"], "h0") if "h0" in raw else None,
        c=parse_matrix(raw["c"], "c") if "c" in raw else None,
        c_plus=parse_matrix(raw["c_plus"], "c_plus") if "c_plus" in raw else None,
        c_minus=parse_matrix(raw["c_minus"], "c_minus") if "c_minus" in raw else None,
        kraus=kraus,
        eps=float(raw.get("eps", 0.0)),
        gamma_mem=float(raw.get("gamma_mem", 0.0)),
        hamiltonian=parse_matrix(raw["hamiltonian"], "hamiltonian") if "hamiltonian" in raw else None,
        observable=_preset(raw["observable"], OBSERVABLE_PRESETS, "observable") if "observable" in raw else None,
        rho0=_preset(raw.get("rho0", "ket0"), STATE_PRESETS, "rho0"),
        convention=convention,
        allow_diagonal=bool(raw.get("allow_diagonal", False)),
    )
    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    return ScenarioConfig(
        raw=raw, model=model, seed=seed, dt=raw.get("dt"), T=float(raw.get("T", 1.0)),
        replications=int(raw.get("replications", 1)), stream_index=int(raw.get("stream_index", 0)),
        noise_drift=noise_drift, experiment=experiment, output=output,
    )


def load_config(path: str | os.PathLike, seed_override: int | None = None) -> ScenarioConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from None
    return parse_config(raw, seed_override)


# ------------------------------------------------------------ commands


@dataclass
class RunContext:
    out_dir: Path
    deterministic: bool
    threads: int | None
    quiet: bool
    prefix: str

    def header(self, scenario: ScenarioConfig, **extra) -> dict:
        meta = {"schema_version": SCHEMA_VERSION, "model_digest": scenario.model.digest(),
                "kind": scenario.model.kind, "seed": scenario.seed}
        meta.update(extra)
        if not self.deterministic:
            meta["timestamp"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
        return meta

    def write(self, name: str, text: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"{self.prefix}{name}"
        path.write_bytes(text.encode())
        if not self.quiet:
            print(f"wrote {path}")
        return path


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=harness._json_default) + "\n"


def cmd_validate(sc: ScenarioConfig, ctx: RunContext) -> int:
    model = build_model(sc.model)
    if not ctx.quiet:
        print(json.dumps({"status": "ok", "kind": model.kind, "model_digest": model.model_digest}))
    return 0


def cmd_constants(sc: ScenarioConfig, ctx: RunContext) -> int:
    if sc.model.observable is None:
        raise ValidationError("constants needs an observable")
    obs = hermitian_spectral(sc.model.observable)
    which = "noise" if sc.model.kind == "noise" else "single"
    const = derive_constants(obs, which, check=not sc.model.allow_diagonal)
    body = dict(ctx.header(sc), model=which, constants=const.to_dict())
    text = _dump(body)
    ctx.write("constants.json", text)
    if not ctx.quiet:
        sys.stdout.write(text)
    return 0


def cmd_simulate(sc: ScenarioConfig, ctx: RunContext) -> int:
    model = build_model(sc.model)
    for r in range(sc.replications):
        stream = sc.stream_index + r
        rec = simulate(model, sc.seed, stream)
        meta = ctx.header(sc, n=model.n, stream_index=stream)
        ctx.write(f"trajectory_{stream}.csv", rec.to_csv(meta))
    return 0


def cmd_integrate(sc: ScenarioConfig, ctx: RunContext) -> int:
    dt = sc.dt if sc.dt is not None else 1e-3
    cfg = sc.model
    if cfg.kind == "memory_swap":
        path = solve_ode("volterra_det", dict(hamiltonian=cfg.hamiltonian, gamma_mem=cfg.gamma_mem),
                         cfg.rho0, dt, sc.T)
        meta = ctx.header(sc, dt=dt, T=sc.T, scheme="volterra_det")
        lines = [format_header(meta), ",".join(["k", "t", "scheme"] + state_columns()) + "\n"]
        for k, (t, rho) in enumerate(zip(path.times, path.states)):
            cols = [repr(float(c)) for z in rho.reshape(-1) for c in (z.real, z.imag)]
            lines.append(",".join([str(k), repr(float(t)), "volterra_det"] + cols) + "\n")
        ctx.write("path.csv", "".join(lines))
        return 0
    spec = harness.sde_spec_for(cfg, sc.noise_drift)
    for r in range(sc.replications):
        stream = sc.stream_index + r
        p = em_integrate(spec, cfg.rho0, dt, sc.T, sc.seed, stream_index=stream)
        meta = ctx.header(sc, dt=dt, T=sc.T, stream_index=stream)
        ctx.write(f"sde_path_{stream}.csv", p.to_csv(meta))
    return 0


def _run_experiment(sc: ScenarioConfig, threads) -> harness.ExperimentReport:
    e = sc.experiment
    name = e.get("name")
    if name not in EXPERIMENTS:
        raise ValidationError(f"experiment.name must be one of {list(EXPERIMENTS)}")
    cfg, seed = sc.model, sc.seed
    if name == "mean_convergence":
        return harness.mean_convergence(cfg, e.get("ns", [200, 800, 3200]), int(e.get("M", 20000)), seed, threads,
                                        float(e.get("ratio", 4.0)), float(e.get("floor_multiplier", 3.0)))
    if name == "weak_marginal_compare":
        return harness.weak_marginal_compare(
            cfg, int(e.get("n", cfg.n)), float(e.get("dt", 1e-4)), int(e.get("M", 20000)), seed,
            tuple(e.get("times", (0.25, 0.5, 1.0))), tuple(e.get("functionals", ("tr_sx", "tr_sz", "purity"))),
            threads, sc.noise_drift, int(e.get("ks_reps", 20)))
    if name == "martingale_diagnostics":
        return harness.martingale_diagnostics(cfg, int(e.get("n", cfg.n)), int(e.get("M", 20000)), seed,
                                              float(e.get("t", 1.0)), threads)
    if name == "residual_order":
        return harness.residual_order(e.get("type", "increment_single"), e.get("sweep", [1e2, 1e3, 1e4, 1e5]),
                                      seed, cfg)
    kw = dict(kraus=list(cfg.kraus) if cfg.kraus else None, observable=cfg.observable, rho0=cfg.rho0,
              T=sc.T, threads=threads, stride=int(e.get("stride", 10)))
    eps = e.get("eps", [0.02, 0.05, 0.1, 0.2])
    if name == "robustness_scan":
        return harness.robustness_scan(eps, int(e.get("M", 10000)), float(e.get("dt", 1e-3)), seed, **kw)
    return harness.deviation_scan(float(e.get("alpha", 0.25)), eps, int(e.get("M", 10000)),
                                  float(e.get("dt", 1e-3)), seed, **kw)


def cmd_experiment(sc: ScenarioConfig, ctx: RunContext) -> int:
    report = _run_experiment(sc, ctx.threads)
    meta = ctx.header(sc)
    body = dict(meta, report=report.to_dict(ctx.deterministic))
    ctx.write("report.json", _dump(body))
    ctx.write("report.csv", format_header(meta) + report.to_csv())
    ctx.write("report.txt", format_header(meta) + report.to_text())
    if not ctx.quiet:
        sys.stdout.write(report.to_text())
    return {"pass": 0, "inconclusive": 4, "fail": 5}[report.status]


HANDLERS = {
    "simulate": cmd_simulate,
    "integrate": cmd_integrate,
    "experiment": cmd_experiment,
    "constants": cmd_constants,
    "validate": cmd_validate,
}


# ------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="belavkin-lab", description="Quantum trajectory simulations and their limits.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("config", help="scenario JSON file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out-dir", default=".", help="directory for output files")
    p.add_argument("--deterministic", action="store_true", help="omit timestamps and wall-clock fields")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default $BELAVKIN_LAB_THREADS or 1)")
    p.add_argument("--quiet", action="store_true")
    return p


def _emit_error(exc: BaseException, code: int):
    payload = {"error": type(exc).__name__, "exit_code": code, "message": str(exc)}
    sys.stderr.write(json.dumps(payload) + "\n")


def run(command: str, config_path, seed=None, out_dir=".", deterministic=False, threads=None, quiet=False) -> int:
    try:
        if command not in HANDLERS:
            raise ValidationError(f"unknown command {command!r}")
        if threads is not None and threads < 1:
            raise ValidationError("--threads must be >= 1")
        sc = load_config(config_path, seed)
        prefix = sc.output.get("prefix", "")
        ctx = RunContext(Path(out_dir), deterministic, threads, quiet, prefix)
        return HANDLERS[command](sc, ctx)
    except BelavkinLabError as exc:
        _emit_error(exc, exc.exit_code)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        _emit_error(exc, 5)
        return 5


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.command, args.config, args.seed, args.out_dir, args.deterministic, args.threads, args.quiet)


if __name__ == "__main__":
    sys.exit(main())
