"""Command-line front end.

    cmimpute analyze --data trial.csv --config analysis.toml --out results/
    cmimpute simulate --hypothesis null --n-sims 1000 --jobs 4 --out sim/
    cmimpute bootstrap-plan --p-inf 0.025 --B 999 --method normal

Every command that writes files also writes ``manifest.json`` next to them,
and each output refers back to it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

from .analysis import AncovaSpec
from .dataset import DataSchema, DatasetError, Strategy, load_csv
from .inference import (
    BootstrapError,
    JackknifeError,
    Pipeline,
    PipelineError,
    bootstrap_strategies,
    jackknife_strategies,
    pB_accuracy,
)
from .mmrm import CovarianceSpec, FitOptions, MeanModelSpec
from .simgen import ConfigError, SimConfig, run_study

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("cmimpute")

MANIFEST = "manifest.json"
ALL_STRATEGIES = ("MAR", "J2R", "CR", "CIR")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int | None
    arguments: dict
    software_version: str = field(default_factory=_version)
    started: str = field(default_factory=_now)
    finished: str | None = None
    outputs: list[str] = field(default_factory=list)
    status: str = "running"

    def write(self, out: Path) -> None:
        self.finished = _now()
        (out / MANIFEST).write_text(json.dumps(self.__dict__, indent=2) + "\n", encoding="utf-8")


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def read_config(path: str | None) -> dict:
    """JSON or TOML by extension (TOML for anything not ending in .json)."""
    if not path:
        return {}
    p = Path(path)
    if p.suffix.lower() == ".json":
        return json.loads(p.read_text(encoding="utf-8"))
    with open(p, "rb") as fh:
        return tomllib.load(fh)


def _strategies(text: str | None) -> list[Strategy]:
    names = ALL_STRATEGIES if not text or text.lower() == "all" else [s for s in text.split(",") if s]
    return [Strategy.parse(s.strip()) for s in names]


def _fail(msg: str, code: int = 2) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# -- analyze -------------------------------------------------------------------


def _analysis_setup(cfg: dict) -> tuple[DataSchema, Pipeline, float]:
    data = cfg.get("data", {})
    model = cfg.get("model", {})
    ana = cfg.get("analysis", {})
    if "visits" not in data:
        raise ConfigError(["[data] visits is required"])
    schema = DataSchema(
        visits=tuple(data["visits"]),
        covariates=data.get("covariates", {"baseline": "baseline"}),
        reference_group=data.get("reference_group", "control"),
        baseline_label=data.get("baseline_label"),
    )
    mean_spec = MeanModelSpec(
        covariates=tuple(model.get("covariates", ("baseline",))),
        covariate_by_visit=tuple(model.get("covariate_by_visit", ("baseline",))),
        covariate_by_group=tuple(model.get("covariate_by_group", ())),
        covariate_by_group_by_visit=tuple(model.get("covariate_by_group_by_visit", ())),
    )
    cov_spec = CovarianceSpec(grouping=model.get("covariance_grouping", "shared"))
    ancova = AncovaSpec(
        target_visit=ana.get("target_visit"),
        dependent=ana.get("dependent", "change"),
        covariates=tuple(ana.get("covariates", ("baseline",))),
        baseline=ana.get("baseline", "baseline"),
    )
    pipeline = Pipeline(
        mean_spec=mean_spec,
        ancova=ancova,
        cov_spec=cov_spec,
        mask_mar_ice=bool(ana.get("mask_mar_ice", False)),
        fit_options=FitOptions(**model.get("fit_options", {})),
    )
    return schema, pipeline, float(ana.get("alpha", 0.05))


def _infer(d, pipeline, strategies, args, alpha) -> dict:
    """Per-strategy rows; tries all strategies jointly, then one by one on failure."""
    def run(group):
        if args.method == "jackknife":
            res = jackknife_strategies(d, pipeline, group, jobs=args.jobs)
            return {s: (r.estimate, r.inference(alpha)) for s, r in res.items()}
        res = bootstrap_strategies(d, pipeline, group, args.B, args.seed, args.stratified, jobs=args.jobs)
        inf = (lambda r: r.percentile_inference(alpha)) if args.percentile else (lambda r: r.inference(alpha))
        return {s: (r.estimate, inf(r)) for s, r in res.items()}

    try:
        groups = {"ok": run(strategies)}
    except (PipelineError, BootstrapError):
        groups = {}
    rows = {}
    for s in strategies:
        try:
            est, inf = groups["ok"][s] if groups else run([s])[s]
        except (PipelineError, BootstrapError) as exc:
            stage = getattr(exc, "stage", "bootstrap")
            msg = str(exc) if isinstance(exc, (BootstrapError, JackknifeError)) else str(exc.cause)
            rows[s.value] = {"strategy": s.value, "status": "error", "stage": stage, "message": msg}
            continue
        rows[s.value] = {
            "strategy": s.value,
            "status": "ok",
            "lsmean_control": est.lsmean_control,
            "lsmean_intervention": est.lsmean_intervention,
            "difference": est.theta,
            **{k: v for k, v in inf.to_dict().items() if k != "estimate"},
        }
    return rows


def _analysis_table(rows: dict, labels: tuple[str, str]) -> str:
    head = f"{'Strategy':<9}{labels[0]:>12}{labels[1]:>14}{'Difference':>12}{'SE':>8}{'p':>9}  Status"
    lines = [head, "-" * len(head)]
    for r in rows.values():
        if r["status"] != "ok":
            lines.append(f"{r['strategy']:<9}{'':>55}  error [{r['stage']}]: {r['message']}")
            continue
        lines.append(
            f"{r['strategy']:<9}{r['lsmean_control']:>12.2f}{r['lsmean_intervention']:>14.2f}"
            f"{r['difference']:>12.2f}{r['se']:>8.2f}{r['p']:>9.4f}  ok"
        )
    return "\n".join(lines) + "\n"


def cmd_analyze(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = read_config(args.config)
        schema, pipeline, alpha = _analysis_setup(cfg)
        strategies = _strategies(args.strategy)
    except (ConfigError, DatasetError, OSError, ValueError, TypeError) as exc:
        return _fail(f"[config] {exc}")
    manifest = RunManifest(
        command="analyze",
        config_hash=config_hash({"config": cfg, "method": args.method, "B": args.B,
                                 "strategies": [s.value for s in strategies]}),
        seed=args.seed if args.method == "bootstrap" else None,
        arguments={k: v for k, v in vars(args).items() if k != "func"},
    )
    try:
        d = load_csv(args.data, schema)
    except (DatasetError, OSError) as exc:
        manifest.status = "error"
        manifest.write(out)
        return _fail(f"[data] {exc}")

    rows = _infer(d, pipeline, strategies, args, alpha)
    ok = all(r["status"] == "ok" for r in rows.values())
    for r in rows.values():
        if r["status"] != "ok":
            print(f"error [{r['stage']}] {r['strategy']}: {r['message']}", file=sys.stderr)

    text = f"# manifest: {MANIFEST}\n" + _analysis_table(rows, d.group_labels)
    payload = {
        "manifest": MANIFEST,
        "method": args.method,
        "alpha": alpha,
        "n_subjects": d.n,
        "groups": list(d.group_labels),
        "results": list(rows.values()),
    }
    (out / "analysis.txt").write_text(text, encoding="utf-8")
    (out / "analysis.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    manifest.outputs = ["analysis.txt", "analysis.json"]
    manifest.status = "ok" if ok else "partial"
    manifest.write(out)
    sys.stdout.write(text)
    return 0 if ok else 1


# -- simulate ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    try:
        raw = read_config(args.config)
        c = SimConfig.from_dict(raw.get("simulation", raw))
        strategies = _strategies(args.strategies)
        methods = tuple(m for m in args.methods.split(",") if m and m != "none")
        bad = [m for m in methods if m not in ("jackknife", "bootstrap")]
        if bad:
            raise ConfigError([f"unknown method: {m}" for m in bad])
        if args.n_sims < 1:
            raise ConfigError(["--n-sims must be at least 1"])
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        return _fail(f"[config] {exc}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    settings = {
        "config": c.to_dict(),
        "hypothesis": args.hypothesis,
        "n_sims": args.n_sims,
        "methods": list(methods),
        "strategies": [s.value for s in strategies],
        "B": args.B,
        "alpha": args.alpha,
    }
    manifest = RunManifest(
        command="simulate",
        config_hash=config_hash(settings),
        seed=args.seed,
        arguments={k: v for k, v in vars(args).items() if k != "func"},
    )

    def progress(k, n):
        if k == n or k % max(1, n // 20) == 0:
            log.info("simulated %d/%d", k, n)

    table = run_study(c, args.hypothesis, strategies, methods, args.n_sims, args.seed, args.jobs,
                      args.B, args.alpha, progress=progress)
    text = table.to_text()
    (out / "summary.csv").write_text(table.to_csv(manifest=MANIFEST), encoding="utf-8")
    (out / "summary.txt").write_text(f"# manifest: {MANIFEST}\n" + text, encoding="utf-8")
    (out / "summary.json").write_text(
        json.dumps({"manifest": MANIFEST, **settings, "seed": args.seed, **table.to_json()}, indent=2) + "\n",
        encoding="utf-8",
    )
    manifest.outputs = ["summary.csv", "summary.txt", "summary.json"]
    manifest.status = "ok"
    manifest.write(out)
    sys.stdout.write(text)
    return 0


# -- bootstrap-plan ----------------------------------------------------------


def format_plan(method: str, p_inf: float, B: int, threshold: float = 0.025, level: float = 0.95) -> str:
    a = pB_accuracy(method, p_inf, B, threshold, level)
    return (
        f"method={method} p_inf={100 * p_inf:g}% B={B}\n"
        f"  {100 * level:g}% range of p_B: {100 * a.low:.2f}% to {100 * a.high:.2f}%\n"
        f"  P(p_B <= {100 * threshold:g}%) = {100 * a.prob_at_or_below:.2f}%\n"
        f"  P(p_B > {100 * threshold:g}%) = {100 * a.prob_above:.2f}%\n"
    )


def cmd_bootstrap_plan(args) -> int:
    if not 0 < args.p_inf < 1:
        return _fail("--p-inf must lie strictly between 0 and 1")
    methods = ("normal", "percentile") if args.method == "both" else (args.method,)
    try:
        for B in args.B:
            for m in methods:
                sys.stdout.write(format_plan(m, args.p_inf, B, args.threshold, args.level))
    except ValueError as exc:
        return _fail(str(exc))
    return 0


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cmimpute", description="Conditional mean imputation for clinical trials")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="analyse a trial dataset")
    a.add_argument("--data", required=True, help="long-format CSV")
    a.add_argument("--config", help="JSON or TOML analysis configuration")
    a.add_argument("--strategy", default="all", help="comma-separated list of MAR,J2R,CR,CIR or 'all'")
    a.add_argument("--method", choices=("jackknife", "bootstrap"), default="jackknife")
    a.add_argument("--B", type=int, default=10_000, help="bootstrap resamples")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--stratified", action="store_true", help="resample within treatment groups")
    a.add_argument("--percentile", action="store_true", help="percentile CI and p-value for the bootstrap")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out", default="results")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run the simulation study")
    s.add_argument("--config", help="JSON or TOML simulation configuration")
    s.add_argument("--hypothesis", choices=("null", "alternative"), default="null")
    s.add_argument("--n-sims", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--methods", default="jackknife", help="comma-separated: jackknife,bootstrap or none")
    s.add_argument("--strategies", default="all")
    s.add_argument("--B", type=int, default=10_000)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", default="simulation")
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bootstrap-plan", help="accuracy of bootstrap p-values for a given B")
    b.add_argument("--p-inf", type=float, required=True, help="p-value with infinitely many resamples")
    b.add_argument("--B", type=int, nargs="+", default=[999, 9999, 99999])
    b.add_argument("--method", choices=("normal", "percentile", "both"), default="both")
    b.add_argument("--threshold", type=float, default=0.025)
    b.add_argument("--level", type=float, default=0.95)
    b.set_defaults(func=cmd_bootstrap_plan)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
