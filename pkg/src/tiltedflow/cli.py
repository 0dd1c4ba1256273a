"""Command-line entry point: run, verify, free-energy and table1.

Exit codes: 0 success, 1 failed verification, 2 config error, 3 training
divergence, 4 free-energy estimate with effective sample size below 10.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DIVERGED, EXIT_LOW_ESS = 0, 1, 2, 3, 4
SEED_ENV = "TILTEDFLOW_SEED"
DEFAULT_SWEEP = [1.0, 10.0, 10**1.5, 100.0]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BaseConfig(_Strict):
    sigma1: PositiveFloat = 1.0
    dim: PositiveInt = 1


class RewardConfig(_Strict):
    kind: Literal["linear", "quadratic", "zero"] = "linear"
    params: dict[str, list] = Field(default_factory=dict)
    lambda_: float = Field(1.0, alias="lambda")

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ScheduleConfig(_Strict):
    family: Literal["follmer", "ddim", "rectified_flow"] = "follmer"
    sigma0: PositiveFloat = 1.0
    t_min: PositiveFloat = 1e-3
    t_max: PositiveFloat = 1.0 - 1e-3


class RewardPathConfig(_Strict):
    lambda_fn: Literal["linear", "quadratic"] = "linear"


class ProblemConfig(_Strict):
    base: BaseConfig = Field(default_factory=BaseConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    reward_path: RewardPathConfig = Field(default_factory=RewardPathConfig)


class OutputConfig(_Strict):
    dir: str = "runs/default"
    formats: list[Literal["jsonl", "csv", "bin"]] = ["jsonl", "csv", "bin"]


class SweepConfig(_Strict):
    lambda_: list[float] = Field(default_factory=lambda: list(DEFAULT_SWEEP), alias="lambda")

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ThermoConfig(_Strict):
    n_paths: PositiveInt = 10_000
    steps: PositiveInt = 200
    rule: Literal["trapezoid", "left"] = "trapezoid"
    seed: int = 0
    train: bool = True


def _train_config():
    from .train import TrainConfig
    return TrainConfig


class ExperimentConfig(_Strict):
    problem: ProblemConfig = Field(default_factory=ProblemConfig)
    run: dict = Field(default_factory=dict)
    output: OutputConfig = Field(default_factory=OutputConfig)
    sweep: SweepConfig | None = None
    thermo: ThermoConfig | None = None

    def train_config(self):
        return _train_config().model_validate(self.run)


DEFAULTS_HELP = """\
config keys (JSON or TOML; defaults in brackets):
  problem.base         sigma1 [1.0], dim [1]
  problem.reward       kind linear|quadratic|zero [linear], lambda [1.0],
                       params.c [ones(dim)], params.A [identity] (quadratic only)
  problem.schedule     family follmer|ddim|rectified_flow [follmer], sigma0 [1.0],
                       t_min [1e-3], t_max [1-1e-3]
  problem.reward_path  lambda_fn linear|quadratic [linear]
  run                  method AM|AS|TSM|CSM|NSM|iDEM|CMCD-KL|CMCD-LV|NETS [AM],
                       iters [500], batch [256], lr [1e-2], seed [0], steps [100],
                       n_noisings [8], replay [64], eval_every [50], eval_samples [2000],
                       field affine|mlp [affine], knots [11], nets_solver adam|lstsq [adam]
  output               dir [runs/default], formats [jsonl, csv, bin]
  sweep                lambda [1, 10, 10^1.5, 100]; one run per value
  thermo               n_paths [10000], steps [200], rule trapezoid|left [trapezoid],
                       seed [0], train [true]
environment: TILTEDFLOW_SEED overrides run.seed.
"""


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config loading


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    """Apply dotted ``key=value`` overrides; values are parsed as JSON when possible."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = tree
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table value")
        node[parts[-1]] = _parse_value(value)
    return tree


def read_tree(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        if path.suffix == ".toml":
            try:
                import tomllib
            except ImportError as exc:  # Python 3.10
                raise ConfigError("TOML configs need Python 3.11 or newer") from exc
            return tomllib.loads(text)
        tree = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a table")
    return tree


def _describe(exc: ValidationError, prefix: str = "") -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        lines.append(f"{prefix}{loc}: {err['msg']}")
    return "; ".join(lines)


def load_config(path, overrides=(), seed_env: str | None = None) -> ExperimentConfig:
    tree = apply_overrides(read_tree(path), list(overrides))
    if seed_env is not None:
        try:
            seed = int(seed_env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {seed_env!r}") from exc
        tree.setdefault("run", {})["seed"] = seed
    try:
        cfg = ExperimentConfig.model_validate(tree)
        cfg.train_config()
    except ValidationError as exc:
        prefix = "run." if exc.title == "TrainConfig" else ""
        raise ConfigError(_describe(exc, prefix)) from exc
    return cfg


def build_problem(cfg: ExperimentConfig, lam: float | None = None):
    import numpy as np

    from .oracle import GaussianBase, RewardSpec
    from .schedule import ScheduleSpec
    from .train import Problem

    p = cfg.problem
    d = p.base.dim
    lam = p.reward.lambda_ if lam is None else lam
    params = p.reward.params
    allowed = {"linear": {"c"}, "quadratic": {"A", "c"}, "zero": set()}[p.reward.kind]
    extra = set(params) - allowed
    if extra:
        raise ConfigError(f"problem.reward.params: unknown key(s) {sorted(extra)} "
                          f"for kind {p.reward.kind}")
    try:
        if p.reward.kind == "zero":
            reward = RewardSpec.zero(d)
        elif p.reward.kind == "linear":
            reward = RewardSpec.linear(params.get("c", np.ones(d)), lam)
        else:
            reward = RewardSpec.quadratic(params.get("A", np.eye(d)), params.get("c"), lam)
        s = p.schedule
        sched = ScheduleSpec(s.family, s.sigma0, t_min=s.t_min, t_max=s.t_max)
    except ValueError as exc:
        raise ConfigError(f"problem: {exc}") from exc
    if reward.c is not None and reward.c.size != d:
        raise ConfigError(f"problem.reward.params.c: expected {d} entries")
    return Problem(sched, GaussianBase(p.base.sigma1, d), reward, p.reward_path.lambda_fn)


# ---------------------------------------------------------------------------
# subcommands


def _write_outputs(out: Path, formats, records, samples, field_, extra) -> None:
    import numpy as np

    from .model import save_params

    out.mkdir(parents=True, exist_ok=True)
    if "jsonl" in formats:
        (out / "metrics.jsonl").write_text("".join(r.to_json() + "\n" for r in records))
    if "csv" in formats:
        header = ",".join(f"x{i}" for i in range(samples.shape[1]))
        np.savetxt(out / "samples.csv", samples, delimiter=",", header=header, comments="",
                   fmt="%.17g")
    if "bin" in formats:
        save_params(field_, out / "params.bin", extra)


def _run_one(cfg: ExperimentConfig, out: Path, lam: float | None = None) -> dict:
    from .train import evaluate_sampler, train

    tc = cfg.train_config()
    problem = build_problem(cfg, lam)
    field_, records, extras = train(tc, problem)
    _, samples = evaluate_sampler(field_, problem, tc.eval_samples, tc, tc.seed, tc.iters)
    F = extras.get("free_energy")
    meta = {"method": tc.method.value, "lambda": problem.reward.lam}
    if F is not None:
        meta["free_energy_coef"] = F.coef.tolist()
    _write_outputs(out, cfg.output.formats, records, samples, field_, meta)
    return {"dir": str(out), **meta, **(json.loads(records[-1].to_json()) if records else {})}


def cmd_run(args, cfg: ExperimentConfig) -> int:
    from .train import TrainingDiverged

    out = Path(args.out or cfg.output.dir)
    runs = ([(lam, out / f"lambda_{lam:g}") for lam in cfg.sweep.lambda_] if cfg.sweep
            else [(None, out)])
    for lam, where in runs:
        try:
            summary = _run_one(cfg, where, lam)
        except TrainingDiverged as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        print(json.dumps(summary))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .suites import run_suite

    checks = run_suite(args.suite)
    for c in checks:
        print(json.dumps(c.record()) if args.json else c.line())
    failed = sum(not c.passed for c in checks)
    if not args.json:
        print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def free_energy_records(cfg: ExperimentConfig) -> list:
    """Estimates for v ≡ 0, the exact escort (Gaussian cases), a trained field and the direct value."""
    from .model import zero_field
    from .thermo import (direct_free_energy, forward_paths, jarzynski_free_energy,
                         oracle_transport)
    from .train import train

    th = cfg.thermo or ThermoConfig()
    problem = build_problem(cfg)
    tp = problem.thermo()
    fields = [("zero", zero_field(tp.dim))]
    if tp.closed_form():
        fields.append(("oracle", oracle_transport(tp)))
    tc = cfg.train_config()
    if th.train and tc.method.thermodynamic:
        fields.append((f"trained:{tc.method.value}", train(tc, problem)[0]))
    out = []
    for tag, v in fields:
        bundle = forward_paths(tp, v, th.n_paths, th.steps, th.seed)
        out.append(jarzynski_free_energy(tp, v, bundle, tag, th.rule))
    out.append(direct_free_energy(tp))
    return out


def cmd_free_energy(args, cfg: ExperimentConfig) -> int:
    from .train import TrainingDiverged

    try:
        records = free_energy_records(cfg)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    out = Path(args.out or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [r.to_json() for r in records]
    low = [r for r in records if r.n_paths and r.low_ess]
    for r in low:
        lines.append(json.dumps({"warning": "low_ess", "v_tag": r.v_tag, "ess": r.ess}))
    (out / "free_energy.jsonl").write_text("".join(line + "\n" for line in lines))
    print("\n".join(lines))
    if low:
        print(f"warning: effective sample size below 10 for {[r.v_tag for r in low]}",
              file=sys.stderr)
        return EXIT_LOW_ESS
    return EXIT_OK


def cmd_table1(args) -> int:
    from .suites import table1_rows

    rows = table1_rows(args.sigma0, args.sigma1)
    if args.json:
        print(json.dumps(rows))
        return EXIT_OK
    print(f"variance-term coefficients, sigma0={args.sigma0:g}, sigma1={args.sigma1:g}")
    print(f"{'method':<6} {'family':<15} {'analytic':>12} {'quadrature':>12}  moment")
    for r in rows:
        a = "+inf" if r["infinite"] else f"{r['analytic']:.6f}"
        q = (f"({r['partial_from_1e-3']:.1f})" if r["infinite"] else f"{r['quadrature']:.6f}")
        print(f"{r['method']:<6} {r['family']:<15} {a:>12} {q:>12}  {r['moment']}")
    print("infinite cells show the partial integral from 1e-3 in parentheses")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _threads(n: int | None) -> None:
    # must run before numpy is imported
    n = n or os.cpu_count() or 1
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tiltedflow", description=__doc__.splitlines()[0],
                                 epilog=DEFAULTS_HELP,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--threads", type=int, default=None,
                    help="BLAS worker threads [available parallelism]")
    sub = ap.add_subparsers(dest="command", required=True)

    def configured(name, help_):
        p = sub.add_parser(name, help=help_, epilog=DEFAULTS_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("config", help="experiment config (JSON, or TOML by extension)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. run.iters=100")
        p.add_argument("--out", default=None, help="output directory [output.dir]")
        return p

    configured("run", "train and evaluate; writes metrics.jsonl, samples.csv, params.bin")
    configured("free-energy", "escorted Jarzynski estimates as JSON lines")
    v = sub.add_parser("verify", help="run a verification suite")
    v.add_argument("suite", choices=["identities", "bounds", "table1", "thermo", "all"])
    v.add_argument("--json", action="store_true", help="one JSON record per check")
    t = sub.add_parser("table1", help="variance-term coefficients for every method and schedule")
    t.add_argument("--sigma0", type=float, default=1.0)
    t.add_argument("--sigma1", type=float, default=1.0)
    t.add_argument("--json", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _threads(args.threads)
    try:
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "table1":
            return cmd_table1(args)
        cfg = load_config(args.config, args.set, os.environ.get(SEED_ENV))
        build_problem(cfg)
        if args.command == "run":
            return cmd_run(args, cfg)
        return cmd_free_energy(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
