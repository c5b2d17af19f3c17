"""Command-line entry point: ``repoctx <command> ...``.

Every flag can also come from an INI file passed with ``--config``; keys in
``[repoctx]`` apply to all commands and keys in ``[<command>]`` to one.
Failures print a JSON object to stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

from repoctx import __version__
from repoctx.baselines import preliminary_context, slice_similarity_context
from repoctx.composer import ABLATABLE, IrreduciblePromptError, compose, enrich_definitions, load_strategy
from repoctx.evaluation import (
    GradingError,
    aggregate,
    by_error_type,
    by_length_bins,
    crosstab_strategies,
    dump_json,
    format_table,
    metric_rows,
    read_records,
    reconcile,
    skeleton_rows,
)
from repoctx.gateway import BudgetExceededError, Gateway, get_profile, load_profiles, read_exchanges
from repoctx.injector import DisruptionRule, generate_dataset, read_manifest, validate_sample
from repoctx.pipeline import METHODS, ConfigError, RunConfig, run_experiment, token_counts
from repoctx.retriever import ContextBundle, ErrorLocation, ErrorLocationError, retrieve
from repoctx.tokenizer import get_tokenizer
from repoctx.tree import ContractError, NoSourceFilesError, ProjectStructureTree, TreeConfig, build_tree

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _tree(args) -> ProjectStructureTree:
    cfg = TreeConfig(builtins_file=args.builtins) if args.builtins else TreeConfig()
    return build_tree(args.repo, cfg)


def _bundle(args) -> ContextBundle:
    tree = _tree(args)
    el = ErrorLocation.parse(args.location)
    if args.method == "rlce":
        return retrieve(tree, el)
    if args.method == "preliminary":
        return preliminary_context(tree, el)
    return slice_similarity_context(tree, el)


def _gateway(args, profile) -> Gateway:
    return Gateway(profile, replay=args.replay, log_path=args.exchange_log)


def _profile(args):
    extra = load_profiles(args.profiles) if args.profiles else None
    return get_profile(args.backend, extra)


# -- commands --------------------------------------------------------------------
def cmd_tree(args) -> int:
    _emit(_tree(args).to_json(), args.out)
    return 0


def cmd_retrieve(args) -> int:
    _emit(_bundle(args).to_json(), args.out)
    return 0


def cmd_compose(args) -> int:
    profile = _profile(args)
    strategy = load_strategy(args.strategy, args.templates)
    if args.bundle:
        bundle = ContextBundle.from_dict(json.loads(Path(args.bundle).read_text(encoding="utf-8")))
    elif args.repo and args.location:
        bundle = _bundle(args)
    else:
        raise UsageError("compose needs --bundle FILE or REPO LOCATION")
    if args.enrich:
        bundle = enrich_definitions(bundle, _gateway(args, profile))
    budget = args.budget or profile.input_budget
    prompt = compose(bundle, strategy, budget, args.ablate or (), get_tokenizer(profile.tokenizer), args.window)
    if args.out:
        txt, meta = prompt.write(Path(args.out))
        sys.stdout.write(json.dumps({"prompt": str(txt), "sidecar": str(meta),
                                     "token_count": prompt.token_count}) + "\n")
    else:
        sys.stdout.write(prompt.text)
    return 0


def cmd_inject(args) -> int:
    if not args.out:
        raise UsageError("inject needs --out DIR")
    rules = [DisruptionRule(r.upper()) for r in (args.rules or [r.value for r in DisruptionRule])]
    tree = _tree(args)
    samples = generate_dataset(tree, args.out, rules, seed=args.seed, per_rule=args.per_rule)
    bad = {s.sample_id: v.diagnostics for s in samples if not (v := validate_sample(s, args.out)).ok}
    counts = {r.value: sum(1 for s in samples if s.rule == r) for r in rules}
    sys.stdout.write(json.dumps({"manifest": str(Path(args.out) / "manifest.jsonl"), "samples": len(samples),
                                 "by_rule": counts, "invalid": bad}, sort_keys=True) + "\n")
    return EXIT_FAILURE if bad else 0


def cmd_grade(args) -> int:
    if args.action == "init":
        if not args.exchanges:
            raise UsageError("grade init needs --exchanges FILE (or a run directory)")
        src = Path(args.exchanges)
        exchanges = read_exchanges(src / "exchanges" / "log.jsonl" if src.is_dir() else src)
        samples = {s.sample_id: s for s in read_manifest(args.manifest)} if args.manifest else None
        rows = skeleton_rows(exchanges, samples, args.grader or "")
        _emit("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), args.out)
        return 0
    if not args.records:
        raise UsageError(f"grade {args.action} needs --records FILE")
    records = read_records(args.records)
    final, disagreements = reconcile(records)
    if args.action == "check":
        _emit(dump_json({"records": len(records), "final": len(final),
                         "disagreements": [d.to_dict() for d in disagreements]}), None)
        return EXIT_FAILURE if disagreements else 0
    _emit("".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in final), args.out)
    return EXIT_FAILURE if disagreements else 0


def cmd_report(args) -> int:
    records = read_records(args.records)
    if args.reconcile:
        records, _ = reconcile(records)
    if args.by == "metrics":
        reports = aggregate(records, args.group_by or ("model", "strategy", "method"))
        data = [r.to_dict() for r in reports]
        rows = metric_rows(reports)
        cols = list(rows[0]) if rows else ["n"]
    elif args.by == "error-type":
        if not args.manifest:
            raise UsageError("report --by error-type needs --manifest")
        rules = {s.sample_id: s.rule.value for s in read_manifest(args.manifest)}
        data = by_error_type(records, rules)
        rows = data["rows"]
        cols = list(rows[0]) if rows else ["rule", "n"]
    elif args.by == "length":
        counts: dict[str, int] = {}
        for run in args.run or ():
            counts.update(token_counts(run))
        if args.tokens:
            counts.update(json.loads(Path(args.tokens).read_text(encoding="utf-8")))
        data = by_length_bins(records, counts, args.bins)
        rows = data
        cols = ["bin", "n", "min_tokens", "max_tokens", "mean_tokens", "correct_repair", "accuracy"]
    else:
        if not (args.strategy_a and args.strategy_b):
            raise UsageError("report --by crosstab needs --strategy-a and --strategy-b")
        a = [r for r in records if r.strategy == load_strategy(args.strategy_a).name.value]
        b = [r for r in records if r.strategy == load_strategy(args.strategy_b).name.value]
        data = crosstab_strategies(a, b)
        rows = [{"cluster": k, **v} for k, v in data["clusters"].items()]
        cols = ["cluster", "total", "explanation_correct", "explanation_incorrect", "explanation_missing"]
    if args.format == "json":
        _emit(dump_json({"by": args.by, "data": data}), args.out)
    else:
        _emit(format_table(rows, cols), args.out)
    return 0


def cmd_run(args) -> int:
    if not args.manifest:
        raise UsageError("run needs --manifest FILE")
    config = RunConfig(
        dataset=args.manifest, method=args.method, strategy=args.strategy, backend=args.backend,
        budget=args.budget, ablation=args.ablate or [], out=args.out or "runs", seed=args.seed,
        replay=args.replay, enrich=args.enrich, window=args.window, workers=args.workers,
        profiles_file=args.profiles,
    )
    config.validate()
    run_dir = run_experiment(config)
    summary = json.loads((run_dir / "report" / "summary.json").read_text(encoding="utf-8"))
    sys.stdout.write(json.dumps({"run_dir": str(run_dir), **summary}, sort_keys=True) + "\n")
    return 0


# -- parser ------------------------------------------------------------------------
def _common(p: argparse.ArgumentParser, *names: str) -> None:
    if "out" in names:
        p.add_argument("--out", help="output file or directory (default: stdout)")
    if "builtins" in names:
        p.add_argument("--builtins", help="file of extra names treated as builtins")
    if "method" in names:
        p.add_argument("--method", default="rlce", choices=METHODS)
    if "backend" in names:
        p.add_argument("--strategy", default="OneShot", help="simple, detail, one-shot or cot")
        p.add_argument("--backend", default="gpt-3.5-turbo")
        p.add_argument("--profiles", help="INI file with extra [backend:<name>] sections")
        p.add_argument("--budget", type=int, help="prompt token budget (default: backend input budget)")
        p.add_argument("--ablate", type=_csv, help=f"comma list from: {', '.join(ABLATABLE)}")
        p.add_argument("--replay", help="JSONL of recorded exchanges; no network is used")
        p.add_argument("--enrich", action="store_true", help="ask the backend for definition summaries")
        p.add_argument("--window", type=int, default=5, help="lines kept around each call in caller slices")
        p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="repoctx", description="Repository-level context for LLM program repair.")
    parser.add_argument("--version", action="version", version=f"repoctx {__version__}")
    parser.add_argument("--config", help="INI file supplying defaults for any flag")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("tree", help="print the project structure tree as JSON")
    p.add_argument("repo")
    _common(p, "out", "builtins")
    p.set_defaults(func=cmd_tree)

    p = sub.add_parser("retrieve", help="context bundle for an error location")
    p.add_argument("repo")
    p.add_argument("location", help="PATH:START[-END] relative to the repository")
    _common(p, "out", "builtins", "method")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("compose", help="render a prompt from a bundle or a repository location")
    p.add_argument("repo", nargs="?")
    p.add_argument("location", nargs="?")
    p.add_argument("--bundle", help="bundle JSON written by `retrieve`")
    p.add_argument("--templates", help="directory overriding the bundled templates")
    p.add_argument("--exchange-log", help="append summary exchanges here")
    _common(p, "out", "builtins", "method", "backend")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("inject", help="generate a benchmark dataset from a repository")
    p.add_argument("repo")
    p.add_argument("--rules", type=_csv, help="comma list of NRV,NP,ORV,OP,CRV,CP (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-rule", type=int, help="keep a seeded subset of this many samples per rule")
    _common(p, "out", "builtins")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("grade", help="grading skeletons and grader reconciliation")
    p.add_argument("action", choices=("init", "check", "resolve"))
    p.add_argument("--exchanges", help="exchange log or run directory (init)")
    p.add_argument("--manifest", help="dataset manifest, enables advisory exact-match hints")
    p.add_argument("--grader", help="grader id written into skeleton rows")
    p.add_argument("--records", help="grading JSONL (check, resolve)")
    _common(p, "out")
    p.set_defaults(func=cmd_grade)

    p = sub.add_parser("report", help="metric tables from grading records")
    p.add_argument("records")
    p.add_argument("--by", default="metrics", choices=("metrics", "error-type", "length", "crosstab"))
    p.add_argument("--group-by", type=_csv)
    p.add_argument("--bins", type=int, default=4)
    p.add_argument("--manifest")
    p.add_argument("--run", action="append", help="run directory supplying prompt lengths (repeatable)")
    p.add_argument("--tokens", help="JSON object mapping exchange ref or sample id to token count")
    p.add_argument("--strategy-a")
    p.add_argument("--strategy-b")
    p.add_argument("--reconcile", action="store_true", help="collapse per-grader records first")
    p.add_argument("--format", default="text", choices=("text", "json"))
    _common(p, "out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="run an experiment over a dataset manifest")
    p.add_argument("--manifest", help="dataset manifest.jsonl or its directory")
    p.add_argument("--workers", type=int, default=1)
    _common(p, "out", "method", "backend")
    p.set_defaults(func=cmd_run)
    return parser


def _apply_config(parser: argparse.ArgumentParser, path: str, command: str | None) -> None:
    ini = configparser.ConfigParser()
    if not ini.read(path, encoding="utf-8"):
        raise UsageError(f"cannot read config file {path}")
    values = {}
    for section in ("repoctx", command):
        if section and ini.has_section(section):
            values.update({k.replace("-", "_"): v for k, v in ini.items(section)})
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sub = subparsers.choices.get(command)
    if sub is None:
        return
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = ini.BOOLEAN_STATES.get(raw.lower(), False)
        elif action.type is not None:
            defaults[key] = action.type(raw)
        else:
            defaults[key] = raw
    sub.set_defaults(**defaults)


def _fail(exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, rest = pre.parse_known_args(argv)
        if known.config:
            command = next((a for a in rest if not a.startswith("-")), None)
            _apply_config(parser, known.config, command)
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(exc, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ErrorLocationError, ContractError) as exc:
        return _fail(exc, EXIT_USAGE)
    except (NoSourceFilesError, GradingError, IrreduciblePromptError, BudgetExceededError,
            ValueError, OSError) as exc:
        return _fail(exc, EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
