"""Command-line experiment harness.

Commands: gen-workload, train, eval-predictor, simulate, compare.

A JSON ``--config`` file may supply defaults for any flag; explicit flags win.
Its top level holds optional sections, each a mapping from flag name
(underscored, e.g. ``batch_limit``) to value:

    {"common": {"seed": 7},
     "workload": {...},     # gen-workload
     "training": {...},     # train
     "evaluation": {...},   # eval-predictor
     "simulation": {...},   # simulate and compare
     "comparison": {...}}   # compare

The fully resolved configuration is echoed to stderr and written as
``config.json`` next to the outputs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .metrics import DegenerateRankingError, MetricsError, nearest_rank
from .predictor import FeatureExtractor, TrainConfig, TrainedModel, evaluate_tau, oracle_scorer, train
from .scheduler import PolicyConfig
from .simulator import CostModel, SimConfig, compare_policies, estimate_capacity, run
from .workload import (
    WorkloadError,
    generate_arrivals,
    index_records,
    load_dataset,
    load_trace,
    parse_length_model,
    synthesize_dataset,
    write_dataset,
    write_trace,
)

log = logging.getLogger("parsched")

POLICY_ALIASES = {"oracle": "oracle_sjf", "pointwise": "pointwise_sjf", "listwise": "listwise_sjf"}
POLICY_OBJECTIVE = {"pars": "pairwise", "pointwise_sjf": "pointwise_l1", "listwise_sjf": "listwise_listmle"}
ALL_POLICIES = ("fcfs", "oracle_sjf", "pars", "pointwise_sjf", "listwise_sjf")
CONFIG_SECTIONS = {
    "common": ("gen-workload", "train", "eval-predictor", "simulate", "compare"),
    "workload": ("gen-workload",),
    "training": ("train",),
    "evaluation": ("eval-predictor",),
    "simulation": ("simulate", "compare"),
    "comparison": ("compare",),
}
PATH_OPTIONS = ("dataset", "trace", "model", "val_dataset", "model_pars", "model_pointwise", "model_listwise")


class CLIError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", help="JSON config file supplying flag defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=out_default, help="output directory")


def _sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=False, help="dataset .jsonl")
    p.add_argument("--trace", help="arrival trace .csv (default: generate one)")
    p.add_argument("--arrival", choices=("burst", "poisson"), default="burst")
    p.add_argument("--rate", type=float, help="poisson rate, requests/s")
    p.add_argument("--n-requests", "--burst-size", dest="n_requests", type=int, default=500,
                   help="use the first N dataset records when generating a trace (default 500)")
    p.add_argument("--batching", choices=("continuous", "static"), default="continuous")
    p.add_argument("--max-wait", type=float, default=0.0, help="static batching timeout, s")
    p.add_argument("--batch-limit", type=int, default=32)
    p.add_argument("--threshold", type=float, default=120.0, help="starvation threshold, s")
    p.add_argument("--t-base", type=float, default=CostModel.t_base)
    p.add_argument("--t-decode", type=float, default=CostModel.t_decode)
    p.add_argument("--t-prefill", type=float, default=CostModel.t_prefill_token)
    p.add_argument("--no-events", action="store_true", help="skip writing events.jsonl")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parsched", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-workload", help="synthesize a dataset and arrival trace")
    _common(p, "workload")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--dist", default="lognormal:5,1.2",
                   help="lognormal:MU,SIGMA or mixture:W,MU,SIGMA;W,MU,SIGMA;...")
    p.add_argument("--min-len", type=int, default=1)
    p.add_argument("--max-len", type=int, default=8192)
    p.add_argument("--noise", type=float, default=0.0, help="multiplicative length noise half-width")
    p.add_argument("--samples", type=int, default=1, help="repeated-run samples per prompt")
    p.add_argument("--filler", type=int, default=4, help="filler words per prompt")
    p.add_argument("--embedding-dim", type=int, default=0)
    p.add_argument("--id-prefix", default="p")
    p.add_argument("--arrival", choices=("burst", "poisson"), default="burst")
    p.add_argument("--rate", type=float)

    p = sub.add_parser("train", help="train a ranking predictor")
    _common(p, "model")
    p.add_argument("--dataset", help="training dataset .jsonl")
    p.add_argument("--val-dataset", help="validation dataset (default: hold out --val-fraction)")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--objective", choices=("pairwise", "pointwise_l1", "listwise_listmle"), default="pairwise")
    p.add_argument("--delta", type=float, default=0.2)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=None, help="learning rate (default: per objective)")
    p.add_argument("--samples-per-epoch", type=int)
    p.add_argument("--list-size", type=int, default=10)
    p.add_argument("--features", choices=("hashed_text", "precomputed_embedding"), default="hashed_text")
    p.add_argument("--dim", type=int, help="feature dimension (default 4096 hashed, else the embedding size)")
    p.add_argument("--normalization", choices=("l2", "none"), default="l2")
    p.add_argument("--seeds", type=_ints, help="train one model per seed into seed<K>/ subdirectories")

    p = sub.add_parser("eval-predictor", help="Kendall tau-b of predictors on a dataset")
    _common(p, "eval")
    p.add_argument("--dataset")
    p.add_argument("--model", action="append", default=[], help="model file (repeatable)")
    p.add_argument("--oracle", action="store_true", help="include the ground-truth oracle scorer")

    p = sub.add_parser("simulate", help="simulate one policy")
    _common(p, "sim")
    _sim_flags(p)
    p.add_argument("--policy", default="fcfs", help="|".join(ALL_POLICIES))
    p.add_argument("--model", help="model file for pars / pointwise_sjf / listwise_sjf")

    p = sub.add_parser("compare", help="compare policies, optionally sweeping arrival rates")
    _common(p, "compare")
    _sim_flags(p)
    p.add_argument("--policies", type=_names, default=list(ALL_POLICIES))
    p.add_argument("--model-pars")
    p.add_argument("--model-pointwise")
    p.add_argument("--model-listwise")
    p.add_argument("--rates", type=_floats, help="poisson rate sweep, requests/s")
    p.add_argument("--load-factors", type=_floats, help="rate sweep as multiples of estimated capacity")
    p.add_argument("--seeds", type=_ints, help="arrival seeds (default: --seed)")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CLIError(f"--config: cannot read {args.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise CLIError("--config: top level must be an object")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    dests = {name: {a.dest for a in sp._actions} for name, sp in subparsers.choices.items()}
    defaults: dict = {}
    for section, values in cfg.items():
        if section not in CONFIG_SECTIONS:
            raise CLIError(f"--config: unknown section {section!r}")
        if not isinstance(values, dict):
            raise CLIError(f"--config: section {section!r} must be an object")
        applies = CONFIG_SECTIONS[section]
        for key, value in values.items():
            if not any(key in dests[c] for c in applies):
                raise CLIError(f"--config: unknown key {section}.{key}")
            if args.command in applies and key in dests[args.command]:
                defaults[key] = value
    subparsers.choices[args.command].set_defaults(**defaults)
    return parser.parse_args(argv)


def _resolved(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "verbose")}


def _echo_config(args: argparse.Namespace, out: Path) -> None:
    text = json.dumps(_resolved(args), indent=2, sort_keys=True)
    print(f"resolved config:\n{text}", file=sys.stderr)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(text + "\n", encoding="utf-8")


def _check_paths(args: argparse.Namespace) -> None:
    for name in PATH_OPTIONS:
        value = getattr(args, name, None)
        for path in value if isinstance(value, list) else [value]:
            if path and not Path(path).exists():
                raise CLIError(f"--{name.replace('_', '-')}: no such file {path}")


def _require(args: argparse.Namespace, name: str) -> str:
    value = getattr(args, name)
    if not value:
        raise CLIError(f"--{name.replace('_', '-')} is required")
    return value


def _json_dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_workload(args: argparse.Namespace) -> int:
    try:
        model = parse_length_model(args.dist, args.min_len, args.max_len)
    except WorkloadError as exc:
        raise CLIError(f"--dist: {exc}") from None
    out = Path(args.out)
    _echo_config(args, out)
    records = synthesize_dataset(
        args.n, model, args.seed, noise=args.noise, n_samples=args.samples,
        n_filler=args.filler, embedding_dim=args.embedding_dim, id_prefix=args.id_prefix,
    )
    trace = generate_arrivals(records, args.arrival, args.rate, args.seed)
    write_dataset(records, out / "dataset.jsonl")
    write_trace(trace, out / "trace.csv")
    lengths = [r.output_len for r in records]
    print(f"wrote {len(records)} records to {out / 'dataset.jsonl'}")
    print(f"wrote {len(trace)} arrivals ({trace.mode}) to {out / 'trace.csv'}")
    print(f"output_len mean={np.mean(lengths):.1f} p50={nearest_rank(lengths, 50)} "
          f"p99={nearest_rank(lengths, 99)} max={max(lengths)}")
    return 0


def _train_config(args: argparse.Namespace, seed: int, dim: int) -> TrainConfig:
    extractor = FeatureExtractor(kind=args.features, dim=dim, normalization=args.normalization)
    return TrainConfig(
        objective=args.objective, delta=args.delta, margin=args.margin, epochs=args.epochs,
        batch_size=args.batch_size, learning_rate=args.lr, seed=seed,
        samples_per_epoch=args.samples_per_epoch, list_size=args.list_size, extractor=extractor,
    )


def cmd_train(args: argparse.Namespace) -> int:
    records = load_dataset(_require(args, "dataset"))
    if args.val_dataset:
        train_set, val_set = records, load_dataset(args.val_dataset)
    else:
        if not 0 < args.val_fraction < 1:
            raise CLIError("--val-fraction must be in (0, 1)")
        n_val = max(2, int(round(len(records) * args.val_fraction)))
        if n_val >= len(records):
            raise CLIError("--val-fraction leaves no training records")
        train_set, val_set = records[:-n_val], records[-n_val:]
    dim = args.dim
    if dim is None:
        dim = len(records[0].embedding) if args.features == "precomputed_embedding" and records[0].embedding else 4096
    out = Path(args.out)
    _echo_config(args, out)
    seeds = args.seeds or [args.seed]
    taus = []
    for seed in seeds:
        model = train(train_set, _train_config(args, seed, dim))
        target = out / f"seed{seed}" if len(seeds) > 1 else out
        target.mkdir(parents=True, exist_ok=True)
        model.save(target / "model.json")
        try:
            tau = evaluate_tau(model, val_set).tau_b
        except DegenerateRankingError:
            tau = None
        taus.append(tau)
        report = {"objective": model.objective, "seed": seed, "n_train": len(train_set),
                  "n_val": len(val_set), "val_tau_b": tau, "loss_trace": model.loss_trace}
        (target / "train_report.json").write_text(_json_dump(report), encoding="utf-8")
        shown = "degenerate ranking" if tau is None else f"{tau:.4f}"
        print(f"{model.objective} seed={seed}: model -> {target / 'model.json'}  validation tau_b={shown}")
    valid = [t for t in taus if t is not None]
    if len(seeds) > 1 and valid:
        print(f"mean validation tau_b over {len(valid)} seeds: {float(np.mean(valid)):.4f}")
    return 0


def cmd_eval_predictor(args: argparse.Namespace) -> int:
    records = load_dataset(_require(args, "dataset"))
    scorers = [(path, TrainedModel.load(path)) for path in args.model]
    if args.oracle:
        scorers.insert(0, ("oracle", oracle_scorer(records)))
    if not scorers:
        raise CLIError("give at least one --model or --oracle")
    rows = []
    for name, scorer in scorers:
        row = {"predictor": name, "objective": getattr(scorer, "objective", "oracle"), "n": len(records)}
        try:
            res = evaluate_tau(scorer, records)
            row.update(tau_b=res.tau_b, n_c=res.n_c, n_d=res.n_d, n_1=res.n_1, n_2=res.n_2, warning=None)
        except DegenerateRankingError as exc:
            row.update(tau_b=None, n_c=None, n_d=None, n_1=None, n_2=None, warning=str(exc))
        rows.append(row)
    by_objective: dict[str, list[float]] = {}
    for row in rows:
        if row["tau_b"] is not None:
            by_objective.setdefault(row["objective"], []).append(row["tau_b"])
    means = {k: float(np.mean(v)) for k, v in sorted(by_objective.items())}
    out = Path(args.out)
    _echo_config(args, out)
    (out / "eval.json").write_text(_json_dump({"rows": rows, "mean_tau_b_by_objective": means}), encoding="utf-8")
    print(f"{'predictor':40s} {'objective':18s} {'tau_b':>8s}")
    for row in rows:
        shown = f"{row['tau_b']:8.4f}" if row["tau_b"] is not None else f"WARNING: {row['warning']}"
        print(f"{row['predictor'][-40:]:40s} {row['objective']:18s} {shown}")
    if any(len(v) > 1 for v in by_objective.values()):
        for objective, mean in means.items():
            print(f"mean tau_b [{objective}] = {mean:.4f} over {len(by_objective[objective])} models")
    return 0


def _policy(name: str, records, models: dict[str, Optional[str]], args) -> PolicyConfig:
    name = POLICY_ALIASES.get(name, name)
    if name not in ALL_POLICIES:
        raise CLIError(f"unknown policy {name!r}; choose from {', '.join(ALL_POLICIES)}")
    scorer = None
    if name == "oracle_sjf":
        scorer = oracle_scorer(records)
    elif name in POLICY_OBJECTIVE:
        path = models.get(name)
        if not path:
            raise CLIError(f"policy {name} needs a model file")
        scorer = TrainedModel.load(path)
        if scorer.objective != POLICY_OBJECTIVE[name]:
            log.warning("policy %s is driven by a %s model (%s)", name, scorer.objective, path)
    return PolicyConfig(name, scorer, args.threshold, args.batch_limit)


def _sim_inputs(args, seed: int, rate: Optional[float] = None):
    records = load_dataset(_require(args, "dataset"))
    if args.trace:
        trace = load_trace(args.trace, index_records(records))
        wanted = set(trace.prompt_ids)
        return [r for r in records if r.id in wanted], trace
    subset = records[: args.n_requests] if args.n_requests else records
    if rate is not None:
        return subset, generate_arrivals(subset, "poisson", rate, seed)
    if args.arrival == "poisson" and args.rate is None:
        raise CLIError("--rate is required with --arrival poisson")
    return subset, generate_arrivals(subset, args.arrival, args.rate, seed)


def _sim_config(args, policy: PolicyConfig, seed: int) -> SimConfig:
    cost = CostModel(args.t_base, args.t_decode, args.t_prefill)
    return SimConfig(cost, args.batching, args.max_wait, policy, seed, record_events=not args.no_events)


def _tau_of(policy: PolicyConfig, records) -> Optional[float]:
    if policy.scorer is None:
        return None
    try:
        return evaluate_tau(policy.scorer, records).tau_b
    except (DegenerateRankingError, MetricsError):
        return None


def _summary_row(policy: str, summary, tau: Optional[float], **extra) -> dict:
    row = {
        "policy": policy,
        "n_requests": summary.count,
        "mean_per_token_ms": summary.mean_per_token_ms,
        "p90_per_token_ms": summary.p90_per_token_ms,
        "speedup_vs_fcfs": summary.speedup_vs_fcfs,
        "tau_b": tau,
    }
    row.update(extra)
    return row


def _write_run(directory: Path, result, row: dict) -> None:
    result.write(directory)
    (directory / "summary.json").write_text(_json_dump(row), encoding="utf-8")


def cmd_simulate(args: argparse.Namespace) -> int:
    records, trace = _sim_inputs(args, args.seed)
    policy = _policy(args.policy, records, {POLICY_ALIASES.get(args.policy, args.policy): args.model}, args)
    out = Path(args.out)
    _echo_config(args, out)
    result = run(trace, records, _sim_config(args, policy, args.seed))
    row = _summary_row(policy.name, result.summary(), _tau_of(policy, records),
                       iterations=result.iterations, makespan_s=result.makespan, seed=args.seed)
    run_dir = out / policy.name / f"seed{args.seed}"
    _write_run(run_dir, result, row)
    print(f"policy={policy.name} n={row['n_requests']} mean={row['mean_per_token_ms']:.3f} ms/token "
          f"p90={row['p90_per_token_ms']:.3f} ms/token -> {run_dir}")
    return 0


def _fmt(v, width=10, prec=3) -> str:
    if v is None:
        return f"{'-':>{width}s}"
    if isinstance(v, float):
        return f"{v:{width}.{prec}f}"
    return f"{v!s:>{width}s}"


def _aggregate(runs: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in runs:
        groups.setdefault((r["scenario"], r["policy"]), []).append(r)
    out = []
    for (scenario, policy), rows in groups.items():
        def mean(key):
            vals = [r[key] for r in rows if r[key] is not None]
            return math.fsum(vals) / len(vals) if vals else None
        out.append({
            "scenario": scenario, "policy": policy, "n_seeds": len(rows),
            "n_requests": rows[0]["n_requests"],
            "mean_per_token_ms": mean("mean_per_token_ms"),
            "p90_per_token_ms": mean("p90_per_token_ms"),
            "speedup_vs_fcfs": mean("speedup_vs_fcfs"),
            "tau_b": mean("tau_b"),
        })
    return out


def cmd_compare(args: argparse.Namespace) -> int:
    if args.rates and args.load_factors:
        raise CLIError("--rates and --load-factors are mutually exclusive")
    records_all = load_dataset(_require(args, "dataset"))
    subset = records_all[: args.n_requests] if args.n_requests else records_all
    scenarios: list[tuple[str, Optional[float]]]
    if args.load_factors:
        cap = estimate_capacity(subset, CostModel(args.t_base, args.t_decode, args.t_prefill), args.batch_limit)
        scenarios = [(f"load_{f!r}", f * cap) for f in args.load_factors]
    elif args.rates:
        scenarios = [(f"rate_{r!r}", r) for r in args.rates]
    else:
        scenarios = [(args.arrival if not args.trace else "trace", None)]
    seeds = args.seeds or [args.seed]
    models = {"pars": args.model_pars, "pointwise_sjf": args.model_pointwise, "listwise_sjf": args.model_listwise}
    out = Path(args.out)
    _echo_config(args, out)

    runs = []
    for label, rate in scenarios:
        for seed in seeds:
            records, trace = _sim_inputs(args, seed, rate)
            policies = [_policy(name, records, models, args) for name in args.policies]
            report = compare_policies(trace, records, _sim_config(args, policies[0], seed), policies)
            for policy, row in zip(policies, report.rows):
                summary = _summary_row(row.policy, row.summary, _tau_of(policy, records),
                                       scenario=label, rate=rate, seed=seed)
                base = out / label if len(scenarios) > 1 else out
                _write_run(base / row.policy / f"seed{seed}", row.result, summary)
                runs.append(summary)

    aggregate = _aggregate(runs)
    (out / "comparison.json").write_text(_json_dump({"runs": runs, "aggregate": aggregate}), encoding="utf-8")
    buf = io.StringIO()
    cols = ("scenario", "policy", "n_seeds", "n_requests", "mean_per_token_ms", "p90_per_token_ms",
            "speedup_vs_fcfs", "tau_b")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in aggregate:
        writer.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                         for c in cols])
    (out / "comparison.csv").write_text(buf.getvalue(), encoding="utf-8")

    for label, _ in scenarios:
        print(f"== {label} ({len(seeds)} seed{'s' if len(seeds) > 1 else ''}) ==")
        print(f"{'policy':16s}{'mean ms/tok':>12s}{'p90 ms/tok':>12s}{'speedup':>10s}{'tau_b':>10s}")
        for row in aggregate:
            if row["scenario"] == label:
                print(f"{row['policy']:16s}{_fmt(row['mean_per_token_ms'], 12)}{_fmt(row['p90_per_token_ms'], 12)}"
                      f"{_fmt(row['speedup_vs_fcfs'], 10, 2)}{_fmt(row['tau_b'], 10, 4)}")
    return 0


COMMANDS = {
    "gen-workload": cmd_gen_workload,
    "train": cmd_train,
    "eval-predictor": cmd_eval_predictor,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        _check_paths(args)
        return COMMANDS[args.command](args)
    except (CLIError, ValueError, RuntimeError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
