"""Command-line interface: ``stfem {convergence,solve,profile}``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .driver import ProblemSpec, convergence_study, march, plan_description
from .exceptions import NumericFailure, SolverDivergence
from .timing import SECTION_NAMES, SectionTimer

log = logging.getLogger("stfem")

CSV_SCHEMAS = {"eoc": 1, "probes": 1, "sections": 1}
EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    """Invalid configuration file or override."""


@dataclass
class Config:
    """Resolved run configuration.

    ``problem`` holds every :class:`ProblemSpec` field; ``refinement_range``
    is used by the convergence study.
    """

    problem: dict = field(default_factory=dict)
    refinement_range: list = field(default_factory=lambda: [2, 3, 4])
    output: str = "stfem-output"
    seed: int = 0
    threads: int = 1

    def spec(self) -> ProblemSpec:
        return ProblemSpec(**self.problem)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_TOP_KEYS = {f.name for f in dataclasses.fields(Config)}


def _check_problem_keys(problem, where):
    names = set(ProblemSpec.field_names())
    for key in problem:
        if key not in names:
            raise ConfigError(f"{where}.{key}: unknown key")


def config_from_dict(raw, source="<config>") -> Config:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"{source}: {key}: unknown key (expected one of {sorted(_TOP_KEYS)})")
    problem = raw.get("problem") or {}
    if not isinstance(problem, dict):
        raise ConfigError(f"{source}: problem: must be a mapping")
    _check_problem_keys(problem, f"{source}: problem")
    cfg = Config(problem=dict(problem))
    for key in ("refinement_range", "output", "seed", "threads"):
        if key in raw:
            setattr(cfg, key, raw[key])
    if not isinstance(cfg.refinement_range, list) or not all(isinstance(r, int) for r in cfg.refinement_range):
        raise ConfigError(f"{source}: refinement_range: must be a list of integers")
    for key in ("seed", "threads"):
        if not isinstance(getattr(cfg, key), int) or getattr(cfg, key) < 0:
            raise ConfigError(f"{source}: {key}: must be a non-negative integer")
    return cfg


def load_config(path) -> Config:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, str(path))


def apply_override(cfg: Config, item: str) -> None:
    """Apply ``key=value``; ``key`` is a top-level key or a problem field,
    optionally written as ``problem.<field>``.
    """
    if "=" not in item:
        raise ConfigError(f"--set {item!r}: expected key=value")
    key, text = item.split("=", 1)
    key = key.strip()
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"--set {key}: {exc}") from exc
    if key.startswith("problem."):
        key = key[len("problem."):]
        target = "problem"
    elif key in _TOP_KEYS and key != "problem":
        target = "top"
    else:
        target = "problem"
    if target == "problem":
        _check_problem_keys({key: value}, "--set problem")
        cfg.problem[key] = value
    else:
        setattr(cfg, key, value)
        config_from_dict(cfg.to_dict(), "--set")


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.16e}"
    return str(x)


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _git_stamp():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def _stamp(cfg: Config) -> dict:
    return {"version": __version__, "git": _git_stamp(), "config": cfg.to_dict(),
            "csv_schemas": CSV_SCHEMAS}


def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, allow_nan=True), encoding="utf-8")


def write_probes(path: Path, probes: dict):
    header = ["t"] + [f"u(x{i + 1})" for i in range(len(probes["points"]))]
    vals = np.asarray(probes["values"])
    rows = [[t] + list(vals[:, j]) for j, t in enumerate(probes["times"])]
    _write_csv(path, header, rows)


def write_sections(path: Path, sections: dict, total: float):
    rows = [[name, sections[name], sections[name] / total if total > 0 else 0.0]
            for name in SECTION_NAMES.values()]
    _write_csv(path, ["section", "seconds", "fraction"], rows)


EOC_COLUMNS = ["r", "dofs", "u_L2L2", "eoc_u_L2L2", "u_LinfL2", "eoc_u_LinfL2", "u_LinfLinf",
               "eoc_u_LinfLinf", "v_L2L2", "eoc_v_L2L2", "v_LinfL2", "eoc_v_LinfL2", "v_LinfLinf",
               "eoc_v_LinfLinf", "mean_iterations", "work"]


def write_eoc(path: Path, table):
    rows = [[row.get(c, float("nan")) for c in EOC_COLUMNS] for row in table]
    _write_csv(path, EOC_COLUMNS, rows)


# --------------------------------------------------------------- commands

def cmd_convergence(cfg: Config, out: Path) -> int:
    spec = cfg.spec()
    try:
        study = convergence_study(spec, cfg.refinement_range)
    except (SolverDivergence, NumericFailure) as exc:
        log.error("solver failure: %s", exc)
        report = getattr(exc, "report", None)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "report.json", {**_stamp(cfg), "error": str(exc),
                                         "report": report.to_dict() if report else None})
        return EXIT_SOLVER
    out.mkdir(parents=True, exist_ok=True)
    write_eoc(out / "eoc.csv", study["table"])
    write_json(out / "report.json", {**_stamp(cfg), "runs": [r.to_dict() for r in study["reports"]],
                                     "eoc_table": study["table"]})
    return EXIT_OK


def _run_single(cfg: Config, timer=None):
    spec = cfg.spec()
    return march(spec, timer=timer)


def cmd_solve(cfg: Config, out: Path) -> int:
    try:
        report = _run_single(cfg)
    except (SolverDivergence, NumericFailure) as exc:
        log.error("solver failure: %s", exc)
        report = getattr(exc, "report", None)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "report.json", {**_stamp(cfg), "error": str(exc),
                                         "report": report.to_dict() if report else None})
        return EXIT_SOLVER
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", {**_stamp(cfg), "report": report.to_dict()})
    if report.probes:
        write_probes(out / "probes.csv", report.probes)
    return EXIT_OK


def cmd_profile(cfg: Config, out: Path) -> int:
    timer = SectionTimer()
    try:
        report = _run_single(cfg, timer)
    except (SolverDivergence, NumericFailure) as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    total = timer.total
    out.mkdir(parents=True, exist_ok=True)
    write_sections(out / "sections.csv", report.sections, total)
    profile = {
        "total_seconds": total,
        "sections": report.sections,
        "fractions": {k: v / total for k, v in report.sections.items()} if total > 0 else {},
        "dofs_per_second": report.n_dofs / total if total > 0 else float("nan"),
    }
    write_json(out / "report.json", {**_stamp(cfg), "report": report.to_dict(), "profile": profile})
    print(json.dumps(profile, indent=2))
    return EXIT_OK


COMMANDS = {"convergence": cmd_convergence, "solve": cmd_solve, "profile": cmd_profile}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stfem", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration entry (repeatable)")
        p.add_argument("--output", type=Path, help="output directory")
        p.add_argument("--threads", type=int, help="BLAS worker threads")
        p.add_argument("--seed", type=int, help="seed for randomized components")
        p.add_argument("--dry-run", action="store_true", help="print the level plan and exit")
        p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def resolve_config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    for item in args.overrides:
        apply_override(cfg, item)
    if args.output is not None:
        cfg.output = str(args.output)
    if args.threads is not None:
        cfg.threads = args.threads
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.problem.setdefault("seed", cfg.seed)
    try:
        cfg.spec()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"problem: {exc}") from exc
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dry_run:
        specs = [cfg.spec()]
        if args.command == "convergence":
            specs = [cfg.spec().replace(refinements=r) for r in cfg.refinement_range]
        plan = [{"refinements": s.refinements, "levels": plan_description(s)} for s in specs]
        print(json.dumps(plan, indent=2))
        return EXIT_OK
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=cfg.threads or None):
        return COMMANDS[args.command](cfg, Path(cfg.output))


if __name__ == "__main__":
    sys.exit(main())
