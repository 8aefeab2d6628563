"""Command-line driver.

Subcommands::

    gen         synthetic PORT-shaped database + ground truth
    fit-metric  fit a metric on a database and write its transform
    score       leave-one-out anomaly scores for chosen cases
    eval        cohort selection, leave-one-out grid, report and ROC files
    report      re-render a report from stored per-case scores

Every run writes a JSON manifest next to its outputs; ``--from-manifest``
replays one.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (DataError, SchemaSpec, SyntheticConfig, generate_synthetic, load_csv,
                   load_truth_csv, read_schema_spec, write_csv, write_truth_csv)
from .detector import METRIC_KINDS, MODEL_KINDS, DetectorConfig, fit_metric, score_case, write_scores
from .evaluation import (EvaluationError, LooOptions, read_loo_scores, run_loo, select_cohort, summarize,
                         table1_grid, write_outputs)
from .metrics import NcaOptions, load_metric, save_metric

log = logging.getLogger("condanom")


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(path: Path, argv: list[str], args: argparse.Namespace,
                    inputs: list[Path], outputs: list[Path]) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "verbose")}
    manifest = {
        "tool": "condanom",
        "version": __version__,
        "subcommand": args.command,
        "argv": argv,
        "resolved": resolved,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _schema_spec(args) -> SchemaSpec:
    if args.schema:
        return read_schema_spec(args.schema)
    return SchemaSpec(args.target)


def _nca_options(args) -> NcaOptions:
    return NcaOptions(max_iterations=args.nca_max_iter, tolerance=args.nca_tol, ridge=args.nca_ridge)


def _detector_config(args, metric_kind=None) -> DetectorConfig:
    return DetectorConfig(metric_kind=metric_kind or args.metric_kind, scope=args.scope, k=args.k,
                          model_kind=args.model, threshold=args.threshold, ridge=args.ridge,
                          rca_weighting=args.rca_weighting, nca=_nca_options(args))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args, argv):
    out = Path(args.out)
    cfg = SyntheticConfig(n_cases=args.n, anomaly_rate=args.anomaly_rate, seed=args.seed)
    dataset, truth = generate_synthetic(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    truth_path = out.with_name(out.stem + ".truth.csv")
    write_csv(dataset, out)
    write_truth_csv(truth, truth_path)
    _write_manifest(out.with_name(out.stem + ".manifest.json"), argv, args, [], [out, truth_path])
    print(f"wrote {len(dataset)} cases ({int(truth.anomaly_flags.sum())} planted anomalies) to {out}")


def cmd_fit_metric(args, argv):
    db = load_csv(args.db, _schema_spec(args))
    exclude = [c for c in (args.exclude or "").split(",") if c]
    train = db.without(exclude)
    cfg = _detector_config(args, metric_kind=args.metric)
    metric = fit_metric(cfg, train.contexts, train.targets)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_metric(metric, out)
    _write_manifest(out.with_name(out.stem + ".manifest.json"), argv, args, [Path(args.db)], [out])
    print(f"wrote {args.metric} transform ({metric.dim}x{metric.dim}) to {out}")


def cmd_score(args, argv):
    db = load_csv(args.db, _schema_spec(args))
    cfg = _detector_config(args)
    case_ids = [c for c in args.cases.split(",") if c] if args.cases else list(db.case_ids)
    fixed = load_metric(args.metric_file, kind=cfg.metric_kind) if args.metric_file else None
    scores = []
    for cid in case_ids:
        case = db.instance(cid)
        rest = db.without([cid])
        metric = fixed
        if metric is None and cfg.uses_metric():
            metric = fit_metric(cfg, rest.contexts, rest.targets)
        scores.append(score_case(case, rest, cfg, metric))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores(scores, out)
    inputs = [Path(args.db)] + ([Path(args.metric_file)] if args.metric_file else [])
    _write_manifest(out.with_name(out.stem + ".manifest.json"), argv, args, inputs, [out])
    print(f"scored {len(scores)} cases, {sum(s.is_anomaly for s in scores)} flagged -> {out}")


def cmd_eval(args, argv):
    db = load_csv(args.db, _schema_spec(args))
    truth = load_truth_csv(args.truth)
    cohort = select_cohort(db, truth, args.n_flagged, args.n_random, args.threshold, args.seed)
    if args.grid == "table1":
        grid = table1_grid(k=args.k, threshold=args.threshold, ridge=args.ridge,
                           rca_weighting=args.rca_weighting, nca=_nca_options(args))
    else:
        grid = [_detector_config(args)]
    options = LooOptions(fit_mode=args.fit_mode, metric_source=args.metric_source,
                         nca_refine_iterations=args.nca_refine_iter,
                         nca_warm_start=not args.no_warm_start, jobs=args.jobs)
    results = run_loo(db, cohort, grid, options)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scored = summarize(results, len(db))
    report = write_outputs(scored, out, args.threshold, args.min_specificity)
    cohort_path = out / "cohort.csv"
    flagged = set(cohort.detector_flagged)
    lines = ["id,label,detector_flagged"]
    lines += [f"{c},{int(l)},{int(c in flagged)}" for c, l in zip(cohort.case_ids, cohort.labels)]
    cohort_path.write_text("\n".join(lines) + "\n")
    outputs = sorted(p for p in out.rglob("*.csv")) + [out / "report.txt"]
    _write_manifest(out / "manifest.json", argv, args, [Path(args.db), Path(args.truth)], outputs)
    for w in cohort.warnings:
        print(f"warning: {w}", file=sys.stderr)
    sys.stdout.write(report.to_text())


def cmd_report(args, argv):
    scored = read_loo_scores(args.scores)
    out = Path(args.out)
    report = write_outputs(scored, out, args.threshold, args.min_specificity, write_scores=False)
    outputs = sorted((out / "roc").glob("*.csv")) + [out / "report.csv", out / "report.txt"]
    _write_manifest(out / "manifest.json", argv, args, [Path(args.scores)], outputs)
    sys.stdout.write(report.to_text())


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_schema(p):
    p.add_argument("--target", default="hospitalization", help="target column (default: %(default)s)")
    p.add_argument("--schema", help="key = value file naming target and optional context columns")


def _add_metric_opts(p):
    p.add_argument("--ridge", type=float, default=None,
                   help="covariance ridge for mahalanobis/rca (default: 1e-6 * trace / d)")
    p.add_argument("--rca-weighting", choices=("size", "sum"), default="size")
    p.add_argument("--nca-max-iter", type=int, default=200)
    p.add_argument("--nca-tol", type=float, default=1e-6)
    p.add_argument("--nca-ridge", type=float, default=0.0)


def _add_detector_opts(p):
    p.add_argument("--metric-kind", choices=METRIC_KINDS, default="euclidean")
    p.add_argument("--scope", choices=("global", "local"), default="global")
    p.add_argument("--k", type=int, default=40)
    p.add_argument("--model", choices=MODEL_KINDS, default="softmax")
    p.add_argument("--threshold", type=float, default=0.05)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condanom", description="Conditional anomaly detection")
    parser.add_argument("--from-manifest", metavar="PATH", help="replay the run recorded in a manifest")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen", help="generate a synthetic database")
    p.add_argument("--n", type=int, default=2300)
    p.add_argument("--anomaly-rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fit-metric", help="fit a metric and write its transform")
    p.add_argument("--db", required=True)
    _add_schema(p)
    p.add_argument("--metric", choices=METRIC_KINDS, required=True)
    p.add_argument("--exclude", help="comma-separated case ids left out of training")
    _add_metric_opts(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_metric, metric_kind=None, scope="global", k=40, model="softmax",
                   threshold=0.05)

    p = sub.add_parser("score", help="leave-one-out scores for cases of a database")
    p.add_argument("--db", required=True)
    _add_schema(p)
    _add_detector_opts(p)
    _add_metric_opts(p)
    p.add_argument("--metric-file", help="use this fitted transform instead of refitting per case")
    p.add_argument("--cases", help="comma-separated case ids (default: every case)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="run the leave-one-out evaluation grid")
    p.add_argument("--db", required=True)
    p.add_argument("--truth", required=True)
    _add_schema(p)
    p.add_argument("--grid", choices=("table1", "single"), default="table1")
    _add_detector_opts(p)
    _add_metric_opts(p)
    p.add_argument("--n-flagged", type=int, default=21)
    p.add_argument("--n-random", type=int, default=79)
    p.add_argument("--min-specificity", type=float, default=0.95)
    p.add_argument("--fit-mode", choices=("per-case", "once"), default="per-case")
    p.add_argument("--metric-source", choices=("database", "cohort"), default="database")
    p.add_argument("--nca-refine-iter", type=int, default=10)
    p.add_argument("--no-warm-start", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="re-render a report from stored scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--min-specificity", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    for name, sp in sub.choices.items():
        sp.add_argument("--config", help="key = value file; its values override flags")
    return parser


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    sp = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sp._actions}
    cp = configparser.ConfigParser()
    try:
        cp.read_string("[run]\n" + Path(args.config).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    for key, raw in cp["run"].items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("help", "config"):
            raise UsageError(f"config key {key!r} is not an option of '{args.command}'")
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.strip().lower() in ("1", "true", "yes", "on")
        else:
            try:
                value = action.type(raw) if action.type else raw
            except ValueError:
                raise UsageError(f"config key {key!r}: invalid value {raw!r}") from None
            if action.choices and value not in action.choices:
                raise UsageError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
        setattr(args, dest, value)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.from_manifest:
        try:
            recorded = json.loads(Path(args.from_manifest).read_text())["argv"]
        except (OSError, KeyError, ValueError) as exc:
            print(f"condanom: error: cannot read manifest {args.from_manifest}: {exc}", file=sys.stderr)
            return 1
        return main(recorded)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("condanom: error: a subcommand is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            _apply_config(parser, args)
        args.func(args, argv)
    except (UsageError, EvaluationError, DataError, ValueError, KeyError, OSError, np.linalg.LinAlgError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"condanom: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
