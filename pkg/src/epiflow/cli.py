"""Command-line front end: run, check, energy, sweep.

Exit codes: 0 all certificates pass, 1 a certificate failed, 2 invalid config or input,
3 the run aborted (partial outputs are written and flagged).
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .energy import ModelParams, energy
from .flow import (
    InadmissibleProfileError,
    StepSchedule,
    cosine_profile,
    evolve,
    load_checkpoint,
    random_profile,
    save_checkpoint,
)
from .spectral import Profile, derivative, make_grid, norm, perturbed_kernel
from .subgradient import DegenerateProfileError

EXIT_OK, EXIT_CERT, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "EPIFLOW_OUTPUT_ROOT"
TRAJECTORY_CERTS = ("EVI", "SlopeDecay", "ExpDecay", "Positivity", "Identity", "DiffQuotient")

log = logging.getLogger("epiflow")

_TOP_KEYS = {"n", "a", "initial", "stepper", "checkpoint_times", "output_dir", "certificates",
             "evi_dictionary", "check", "_test_hooks"}
_STEPPER_KEYS = {"t_final", "tau0", "tau_max", "growth", "n_grow", "adaptive", "stop_slope", "max_halvings"}


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass(frozen=True)
class RunConfig:
    n: int
    a: float
    initial: dict
    schedule: StepSchedule
    output_dir: str
    certificates: tuple
    evi_size: int = 20
    evi_seed: int = 0
    check: dict = field(default_factory=dict)
    test_hooks: dict = field(default_factory=dict)
    config_hash: str = ""
    raw: dict = field(default_factory=dict)

    @property
    def params(self) -> ModelParams:
        return ModelParams(self.a)

    def initial_profile(self) -> Profile:
        return build_initial(self.initial, make_grid(self.n), self.a)

    def resolve_output(self, base: Path | None = None) -> Path:
        out = Path(self.output_dir)
        if not out.is_absolute():
            root = os.environ.get(OUTPUT_ROOT_ENV)
            out = Path(root) / out if root else (base or Path.cwd()) / out
        return out


def config_hash(raw: dict) -> str:
    """sha256 of the canonical JSON of the config, output location excluded."""
    body = {k: v for k, v in raw.items() if k != "output_dir"}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _num(d: dict, key: str, default, kind=float):
    val = d.get(key, default)
    if kind is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{key} must be an integer, got {val!r}")
        return val
    if kind is bool:
        if not isinstance(val, bool):
            raise ConfigError(f"{key} must be true or false, got {val!r}")
        return val
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        raise ConfigError(f"{key} must be a finite number, got {val!r}")
    return float(val)


def build_initial(spec: dict, grid, a: float) -> Profile:
    family = spec.get("family", "cosine")
    if family == "zero":
        return Profile.zeros(grid)
    if family == "cosine":
        return cosine_profile(grid, a, _num(spec, "rho", 0.3), _num(spec, "k", 1, int))
    if family == "random":
        return random_profile(grid, a, _num(spec, "amplitude", 0.3), _num(spec, "n_modes", 4, int),
                              _num(spec, "seed", 0, int))
    raise ConfigError(f"unknown initial-profile family {family!r}")


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    n = _num(raw, "n", 128, int)
    a = _num(raw, "a", 1.0)
    try:
        grid = make_grid(n)
        params = ModelParams(a)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    st = raw.get("stepper", {})
    if not isinstance(st, dict) or set(st) - _STEPPER_KEYS:
        raise ConfigError(f"stepper must be an object with keys from {sorted(_STEPPER_KEYS)}")
    cps = raw.get("checkpoint_times", [])
    if not isinstance(cps, list) or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in cps):
        raise ConfigError("checkpoint_times must be a list of numbers")
    try:
        schedule = StepSchedule(
            t_final=_num(st, "t_final", 2.0),
            tau0=_num(st, "tau0", 1e-4),
            tau_max=_num(st, "tau_max", 1e-2),
            growth=_num(st, "growth", 1.2),
            n_grow=_num(st, "n_grow", 5, int),
            adaptive=_num(st, "adaptive", True, bool),
            stop_slope=_num(st, "stop_slope", 0.0),
            max_halvings=_num(st, "max_halvings", 40, int),
            checkpoint_times=tuple(float(c) for c in cps),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    certs = raw.get("certificates", list(TRAJECTORY_CERTS))
    if not isinstance(certs, list) or set(certs) - set(TRAJECTORY_CERTS):
        raise ConfigError(f"certificates must be a list drawn from {list(TRAJECTORY_CERTS)}")
    out = raw.get("output_dir", "epiflow-out")
    if not isinstance(out, str) or not out:
        raise ConfigError("output_dir must be a nonempty string")
    evi = raw.get("evi_dictionary", {})
    check = raw.get("check", {})
    hooks = raw.get("_test_hooks", {})
    for name, d in (("initial", raw.get("initial", {})), ("evi_dictionary", evi), ("check", check), ("_test_hooks", hooks)):
        if not isinstance(d, dict):
            raise ConfigError(f"{name} must be an object")
    initial = dict(raw.get("initial", {"family": "cosine", "rho": 0.3, "k": 1}))
    try:
        build_initial(initial, grid, params.a)
    except InadmissibleProfileError as exc:
        raise ConfigError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(f"initial profile: {exc}") from exc
    return RunConfig(
        n=n, a=a, initial=initial, schedule=schedule, output_dir=out, certificates=tuple(certs),
        evi_size=_num(evi, "size", 20, int), evi_seed=_num(evi, "seed", 0, int),
        check=dict(check), test_hooks=dict(hooks), config_hash=config_hash(raw), raw=raw,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw)


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _checkpoint_name(t: float) -> str:
    return f"t_{t:.6e}.json"


def _write_regularity(path: Path, traj, a: float) -> None:
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t", "u_xxx_norm", "ln_v_x_norm"])
        for t, u in zip(traj.samples["t"], traj.states):
            wr.writerow([format(t, ".17g"), format(norm(derivative(u, 3)), ".17g"),
                         format(dg.log_gradient_norm(u, a), ".17g")])


def trajectory_certificates(traj, cfg: RunConfig) -> list:
    p = cfg.params
    out = []
    for name in cfg.certificates:
        if name == "EVI":
            tests = dg.evi_dictionary(traj.grid, p.a, cfg.evi_size, cfg.evi_seed)
            out.append(dg.evi_check(traj, tests, p))
        elif name == "SlopeDecay":
            out.append(dg.slope_decay_check(traj, p))
        elif name == "ExpDecay":
            out.append(dg.exp_decay_check(traj, p))
        elif name == "Positivity":
            out.append(dg.positivity_certificate(traj, p))
        elif name == "Identity":
            certs = [dg.identity_check(u, p) for u in traj.states[:: max(1, len(traj) // 10)]]
            out.append(max(certs, key=lambda c: c.worst_margin))
        elif name == "DiffQuotient":
            out.append(dg.diff_quotient_check(traj, p))
    return out


def run_config(cfg: RunConfig, out: Path) -> int:
    """Evolve, write all artifacts into ``out`` and return the exit code."""
    out.mkdir(parents=True, exist_ok=True)
    p = cfg.params
    u0 = cfg.initial_profile()
    try:
        traj = evolve(u0, cfg.schedule, p)
    except (DegenerateProfileError, FloatingPointError) as exc:
        log.error("run aborted: %s", exc)
        (out / "report.json").write_text(json.dumps(
            {"config_hash": cfg.config_hash, "aborted": True, "abort_reason": str(exc), "generated_at": _timestamp()}))
        return EXIT_RUNTIME
    traj.write_csv(out / "trajectory.csv")
    traj.save(out / "trajectory.json")
    _write_regularity(out / "regularity.csv", traj, p.a)
    cdir = out / "checkpoints"
    cdir.mkdir(exist_ok=True)
    stored = {0.0: traj.states[0], traj.samples["t"][-1]: traj.states[-1], **traj.checkpoints()}
    for t, u in sorted(stored.items()):
        save_checkpoint(cdir / _checkpoint_name(t), u, p.a, t)
    certs = trajectory_certificates(traj, cfg)
    extra = {
        "config": cfg.raw,
        "aborted": traj.aborted,
        "abort_reason": traj.abort_reason,
        "n_steps": len(traj) - 1,
        "final_time": traj.samples["t"][-1],
        "dissipation": dg.dissipation_report(traj),
    }
    rec = dg.write_report(out / "report.json", certs, config_hash=cfg.config_hash, extra=extra, timestamp=_timestamp())
    for c in certs:
        log.info("%-12s %s  worst_margin=%.3e", c.kind.value, "PASS" if c.passed else "FAIL", c.worst_margin)
    if traj.aborted:
        log.error("run aborted: %s", traj.abort_reason)
        return EXIT_RUNTIME
    return EXIT_OK if rec["all_pass"] else EXIT_CERT


def cmd_run(config_path) -> int:
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run_config(cfg, cfg.resolve_output())


def check_certificates(cfg: RunConfig) -> list:
    grid, p = make_grid(cfg.n), cfg.params
    chk = cfg.check
    seed = int(chk.get("seed", 0))
    rng = np.random.default_rng(seed)
    kc = grid.dealias_cutoff
    profiles = [random_profile(grid, p.a, float(rng.uniform(0.05, 0.5)), int(rng.integers(1, kc + 1)), int(rng.integers(2**31)))
                for _ in range(int(chk.get("identity_samples", 5)))]
    ident = max((dg.identity_check(u, p) for u in profiles), key=lambda c: c.worst_margin)
    probe = dg.convexity_probe(grid, p, int(chk.get("convexity_triples", 200)), seed)
    oracle_profiles = profiles[: int(chk.get("oracle_profiles", 2))] + [cosine_profile(grid, p.a, 0.5, 1)]
    agree = dg.oracle_agreement(oracle_profiles, p)
    return [ident, probe, agree]


def cmd_check(config_path) -> int:
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    offset = float(cfg.test_hooks.get("kernel_offset", 0.0))
    with perturbed_kernel(offset):
        certs = check_certificates(cfg)
    out = cfg.resolve_output()
    out.mkdir(parents=True, exist_ok=True)
    rec = dg.write_report(out / "check.json", certs, config_hash=cfg.config_hash, timestamp=_timestamp())
    for c in certs:
        print(f"{c.kind.value:16s} {'PASS' if c.passed else 'FAIL'}  worst_margin={c.worst_margin:.3e}")
    return EXIT_OK if rec["all_pass"] else EXIT_CERT


def cmd_energy(checkpoint_path) -> int:
    try:
        u, a, t = load_checkpoint(checkpoint_path)
        p = ModelParams(a)
    except FileNotFoundError:
        print(f"error: checkpoint not found: {checkpoint_path}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: cannot read checkpoint {checkpoint_path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rec = {"n": u.grid.n, "a": a, "t": t, **energy(u, p).to_dict()}
    print(json.dumps(rec, indent=1))
    return EXIT_OK


def cmd_sweep(config_dir, workers: int | None = None) -> int:
    cdir = Path(config_dir)
    if not cdir.is_dir():
        print(f"error: not a directory: {cdir}", file=sys.stderr)
        return EXIT_CONFIG
    paths = sorted(cdir.glob("*.json"))
    if not paths:
        print(f"error: no *.json configs in {cdir}", file=sys.stderr)
        return EXIT_CONFIG

    def one(path):
        try:
            cfg = load_config(path)
        except ConfigError as exc:
            return path, EXIT_CONFIG, str(exc)
        # One directory per config so concurrent runs never share files.
        return path, run_config(cfg, cfg.resolve_output() / path.stem), ""

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, paths))
    for path, code, msg in results:
        print(f"{path.name}: exit {code}{'  ' + msg if msg else ''}")
    return max(code for _, code, _ in results)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="epiflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)
    sub.add_parser("run", help="evolve one configuration and certify it").add_argument("config")
    sub.add_parser("check", help="stateless identity, convexity and oracle suites").add_argument("config")
    sub.add_parser("energy", help="print the energy report of a checkpoint").add_argument("checkpoint")
    sw = sub.add_parser("sweep", help="run every config in a directory concurrently")
    sw.add_argument("config_dir")
    sw.add_argument("--workers", type=int, default=None)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.cmd == "run":
        return cmd_run(args.config)
    if args.cmd == "check":
        return cmd_check(args.config)
    if args.cmd == "energy":
        return cmd_energy(args.checkpoint)
    return cmd_sweep(args.config_dir, args.workers)


if __name__ == "__main__":
    sys.exit(main())
