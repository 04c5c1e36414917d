"""Command-line entry point: ``radkit <subcommand> ...``.

Exit codes: 0 success, 1 runtime error, 2 too many failed requests during
``evaluate``, 3 configuration error, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from radkit.changes import parse_rendered_change_summary, score_change_summaries
from radkit.domain import NliLabel, TaskKind, parse_label_list
from radkit.errors import ConfigError, EmptyInput, RadkitError, TooManyFailures
from radkit.harness import DEFAULT_SEED, EndpointConfig, MetricConfig, emit_report, run_suite
from radkit.promptkit import (
    build_dataset,
    dataset_stats,
    load_manifest,
    load_records,
    load_template,
    read_dataset,
    write_dataset,
)
from radkit.segmenter import DEFAULT_RULES, load_rules, render_sections, segment_report
from radkit.textmetrics import (
    DEFAULT_RESAMPLES,
    MetricResult,
    bleu_4,
    bootstrap_ci,
    multilabel_macro_f1,
    nli_scores,
    rouge_l,
    token_f1,
)

logger = logging.getLogger("radkit")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_TOO_MANY_FAILURES = 2
EXIT_CONFIG = 3
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _read_text(path: str | None) -> str:
    if path is None or path == "-":
        return sys.stdin.read()
    return Path(path).read_text(encoding="utf-8")


def _read_jsonl(path: str) -> list[Any]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


_TEXT_KEYS = ("text", "prediction", "pred", "reference", "ref", "answer")


def _texts(rows: list[Any], path: str) -> tuple[list[str | None], list[str]]:
    """Pull (ids, texts) from JSONL rows: bare strings or objects with a text field."""
    ids: list[str | None] = []
    texts: list[str] = []
    for i, row in enumerate(rows):
        if isinstance(row, str):
            ids.append(None)
            texts.append(row)
            continue
        if not isinstance(row, dict):
            raise UsageError(f"{path}:{i + 1}: expected a string or an object")
        key = next((k for k in _TEXT_KEYS if isinstance(row.get(k), str)), None)
        if key is None:
            raise UsageError(f"{path}:{i + 1}: no text field (one of {', '.join(_TEXT_KEYS)})")
        ids.append(None if row.get("id") is None else str(row["id"]))
        texts.append(row[key])
    return ids, texts


def _aligned(pred_path: str, ref_path: str) -> list[tuple[str, str]]:
    pred_ids, preds = _texts(_read_jsonl(pred_path), pred_path)
    ref_ids, refs = _texts(_read_jsonl(ref_path), ref_path)
    if all(pred_ids) and all(ref_ids) and pred_ids and ref_ids:
        by_id = dict(zip(pred_ids, preds))
        missing = [i for i in ref_ids if i not in by_id]
        if missing:
            raise UsageError(f"{len(missing)} reference id(s) have no prediction, e.g. {missing[0]!r}")
        return [(by_id[i], r) for i, r in zip(ref_ids, refs)]
    if len(preds) != len(refs):
        raise UsageError(f"{len(preds)} predictions vs {len(refs)} references")
    return list(zip(preds, refs))


def _dump(data: Any) -> str:
    return json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_segment(args: argparse.Namespace) -> int:
    rules = load_rules(args.rules) if args.rules else DEFAULT_RULES
    report = segment_report(_read_text(args.input), rules)
    if args.json:
        body = {name.display: text for name, text in report.sections.items()}
        print(_dump({"sections": body, "residual": report.residual}))
    else:
        sys.stdout.write(render_sections(report))
    return EXIT_OK


def cmd_build_dataset(args: argparse.Namespace) -> int:
    task = TaskKind.parse(args.task)
    columns = json.loads(Path(args.columns).read_text(encoding="utf-8")) if args.columns else None
    records = load_records(args.records, columns)
    manifest = load_manifest(args.manifest)
    template = load_template(task, args.templates) if args.templates else None
    examples = build_dataset(task, records, manifest, workers=args.workers, template=template)
    n = write_dataset(examples, args.out)
    logger.info("wrote %d examples to %s", n, args.out)
    return EXIT_OK


def cmd_diff_score(args: argparse.Namespace) -> int:
    pairs = []
    for i, row in enumerate(_read_jsonl(args.input)):
        if not isinstance(row, dict) or not isinstance(row.get("pred"), str) or not isinstance(row.get("ref"), str):
            raise UsageError(f"{args.input}:{i + 1}: expected an object with 'pred' and 'ref' strings")
        pairs.append((parse_rendered_change_summary(row["pred"]), parse_rendered_change_summary(row["ref"])))
    rows = score_change_summaries(pairs)
    if args.format == "json":
        print(_dump([row.to_dict() for row in rows]))
        return EXIT_OK
    width = max(len(row.key) for row in rows)
    print(f"{'category':<{width}}  {'BLEU-4':>7}  {'RougeL':>7}  {'F1':>7}  {'support':>7}")
    for row in rows:
        cells = ["-" if v is None else f"{v:.2f}" for v in (row.bleu_4, row.rouge_l, row.f1)]
        print(f"{row.key:<{width}}  " + "  ".join(f"{c:>7}" for c in cells) + f"  {row.support:>7}")
    return EXIT_OK


def _lexical(index: int | None, fn):
    def score(pairs: list[tuple[str, str]], seed: int, resamples: int, name: str) -> MetricResult:
        values = [fn(p, r) if index is None else fn(p, r)[index] for p, r in pairs]
        point, low, high = bootstrap_ci(values, resamples=resamples, seed=seed)
        return MetricResult(name, point, low, high, len(values))

    return score


def _corpus(fn, parse, index: int):
    def score(pairs: list[tuple[str, str]], seed: int, resamples: int, name: str) -> MetricResult:
        parsed = [(parse(p), parse(r)) for p, r in pairs]

        def aggregate(items):
            return fn([p for p, _ in items], [r for _, r in items])[index]

        point, low, high = bootstrap_ci(parsed, aggregate, resamples=resamples, seed=seed)
        return MetricResult(name, point, low, high, len(parsed))

    return score


def _nli_ref(text: str):
    return NliLabel.from_text(text)


METRICS = {
    "rougeL": ("RougeL", _lexical(None, rouge_l)),
    "bleu4": ("BLEU-4", _lexical(None, bleu_4)),
    "f1": ("F1-Score", _lexical(2, token_f1)),
    "precision": ("Precision", _lexical(0, token_f1)),
    "recall": ("Recall", _lexical(1, token_f1)),
    "labelF1": ("F1-Score", _corpus(multilabel_macro_f1, parse_label_list, 0)),
    "nliF1": ("F1-Score", _corpus(nli_scores, _nli_ref, 0)),
}


def cmd_metrics(args: argparse.Namespace) -> int:
    pairs = _aligned(args.pred, args.ref)
    if not pairs:
        raise EmptyInput("no prediction/reference pairs")
    results = []
    for key in args.metric:
        name, score = METRICS[key]
        results.append(score(pairs, args.seed, args.resamples, name).to_dict())
    print(_dump(results[0] if len(results) == 1 else results))
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    endpoint = EndpointConfig.load(args.endpoint)
    metric_config = MetricConfig.load(args.metrics) if args.metrics else MetricConfig()
    dataset = read_dataset(args.dataset)
    if args.task:
        task = TaskKind.parse(args.task)
        dataset = [e for e in dataset if e.task is task]
        if not dataset:
            raise ConfigError(f"dataset has no {task.value} examples")
    if args.limit:
        dataset = dataset[: args.limit]

    def progress(done: int, total: int) -> None:
        if done == total or done % 50 == 0:
            logger.info("%d/%d examples done", done, total)

    reports = run_suite(
        dataset,
        endpoint,
        metric_config,
        seed=args.seed,
        dry_run=args.dry_run,
        cache_dir=args.cache,
        stratify_by=args.stratify or (),
        progress=progress,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    latencies = []
    for task, report in reports.items():
        for fmt, suffix in (("json", "json"), ("markdown", "md"), ("csv", "csv")):
            (out / f"{task.value}.{suffix}").write_text(emit_report(report, fmt), encoding="utf-8")
        latencies += [
            {"example_id": r.example_id, "latency_ms": r.latency_ms, "attempt_count": r.attempt_count}
            for r in report.records
        ]
        logger.info("%s: %d records, %d failed", task.value, len(report.records), report.failures)
    (out / "latency.jsonl").write_text("".join(json.dumps(x) + "\n" for x in latencies), encoding="utf-8")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    stats = dataset_stats(read_dataset(args.dataset))
    sys.stdout.write(_dump(stats.to_dict()) + "\n" if args.json else stats.to_text())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--config", default=None, help="JSON file supplying defaults for any option")

    parser = _Parser(prog="radkit", description="Radiology report toolkit.", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("segment", parents=[common], help="split a report into named sections")
    p.add_argument("--in", dest="input", default=None, help="report text file (default: stdin)")
    p.add_argument("--rules", default=None, help="JSON header-rule table")
    p.add_argument("--json", action="store_true", help="print sections as JSON")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("build-dataset", parents=[common], help="render annotation records into instructions")
    p.add_argument("--task", required=True)
    p.add_argument("--records", required=True, help="JSONL or CSV annotation records")
    p.add_argument("--manifest", required=True, help="CSV with id,split columns")
    p.add_argument("--out", required=True, help="output JSONL")
    p.add_argument("--columns", default=None, help="JSON map of field name to source column")
    p.add_argument("--templates", default=None, help="directory of <Task>.txt templates")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("diff-score", parents=[common], help="per-category change-summary scores")
    p.add_argument("--in", dest="input", required=True, help="JSONL of {pred, ref} rendered summaries")
    p.add_argument("--format", choices=["json", "text"], default="json")
    p.set_defaults(func=cmd_diff_score)

    p = sub.add_parser("metrics", parents=[common], help="score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--metric", action="append", choices=sorted(METRICS), required=True)
    p.add_argument("--resamples", type=int, default=DEFAULT_RESAMPLES)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("evaluate", parents=[common], help="query an endpoint and write reports")
    p.add_argument("--task", default=None, help="only this task (default: every task in the dataset)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--endpoint", required=True, help="endpoint config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--metrics", default=None, help="metric config JSON")
    p.add_argument("--cache", default=None, help="prediction cache directory")
    p.add_argument("--stratify", action="append", default=None, help="stratum key (repeatable)")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--dry-run", action="store_true", help="skip the network; predictions echo references")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", parents=[common], help="example counts per task and split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_stats)
    return parser


def _apply_config(args: argparse.Namespace) -> None:
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        for key, value in data.items():
            attr = key.replace("-", "_")
            if getattr(args, attr, None) is None:
                setattr(args, attr, value)
    if args.seed is None:
        args.seed = DEFAULT_SEED
    if args.log_level is None:
        args.log_level = "WARNING"


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _apply_config(args)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except UsageError as exc:
        print(f"radkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TooManyFailures as exc:
        print(f"radkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_TOO_MANY_FAILURES
    except ConfigError as exc:
        print(f"radkit {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RadkitError, OSError, ValueError, KeyError) as exc:
        print(f"radkit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
