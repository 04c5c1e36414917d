"""Evaluation harness: query an inference endpoint over a dataset and score the answers.

The client is endpoint-agnostic. A JSON request template carries a
``{PROMPT}`` placeholder, and a dotted ``response_path`` such as
``choices.0.message.content`` selects the generated text from the reply.
"""

from __future__ import annotations

import asyncio
import csv
import hashlib
import io
import json
import logging
import os
import random
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import fmean
from typing import Any, Callable, Iterable, Mapping, Sequence

import httpx

from radkit.changes import parse_rendered_change_summary, score_change_summaries
from radkit.domain import (
    LABEL_TASKS,
    ChangeSummary,
    InstructionExample,
    NliLabel,
    SectionedReport,
    SectionName,
    TaskKind,
    parse_label_list,
)
from radkit.errors import ConfigError, ParseFailure, TooManyFailures, UnknownStratum
from radkit.external import ExternalMetric, ExternalMetricRequest, external_metric
from radkit.segmenter import parse_rendered_sections
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

logger = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_SEED",
    "EndpointConfig",
    "MetricConfig",
    "EvalRecord",
    "EvalReport",
    "collect_predictions",
    "score_records",
    "run_eval",
    "run_suite",
    "stratify",
    "emit_report",
    "parse_report_json",
]

DEFAULT_SEED = 1234
PROMPT_PLACEHOLDER = "{PROMPT}"
FAILURE_THRESHOLD = 0.5

DEFAULT_REQUEST_TEMPLATE: dict[str, Any] = {
    "messages": [{"role": "user", "content": PROMPT_PLACEHOLDER}],
    "temperature": 0,
    "max_tokens": 1024,
}


def _contains_placeholder(value: Any) -> bool:
    if isinstance(value, str):
        return PROMPT_PLACEHOLDER in value
    if isinstance(value, Mapping):
        return any(_contains_placeholder(v) for v in value.values())
    if isinstance(value, list):
        return any(_contains_placeholder(v) for v in value)
    return False


def _fill(value: Any, prompt: str) -> Any:
    if isinstance(value, str):
        return value.replace(PROMPT_PLACEHOLDER, prompt)
    if isinstance(value, Mapping):
        return {k: _fill(v, prompt) for k, v in value.items()}
    if isinstance(value, list):
        return [_fill(v, prompt) for v in value]
    return value


def extract_path(data: Any, path: str) -> Any:
    """Follow a dotted path; integer segments index into lists."""
    node = data
    for part in path.split(".") if path else []:
        if isinstance(node, list):
            node = node[int(part)]
        elif isinstance(node, Mapping):
            node = node[part]
        else:
            raise KeyError(part)
    return node


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    request_template: Mapping[str, Any] = field(default_factory=lambda: dict(DEFAULT_REQUEST_TEMPLATE))
    response_path: str = "choices.0.message.content"
    auth_env_var: str | None = None
    timeout: float = 60.0
    max_retries: int = 3
    max_parallel: int = 4
    backoff_base: float = 1.0
    backoff_factor: float = 2.0

    def __post_init__(self) -> None:
        if self.max_parallel < 1:
            raise ConfigError("max_parallel must be >= 1")
        if self.timeout <= 0:
            raise ConfigError("timeout must be > 0")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if not _contains_placeholder(self.request_template):
            raise ConfigError(f"request_template has no {PROMPT_PLACEHOLDER} placeholder")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EndpointConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown endpoint settings: {sorted(unknown)}")
        if "base_url" not in data:
            raise ConfigError("endpoint config needs base_url")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "EndpointConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read endpoint config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("endpoint config must be a JSON object")
        return cls.from_dict(data)

    def fingerprint(self) -> str:
        key = json.dumps(
            [self.base_url, self.request_template, self.response_path], sort_keys=True
        )
        return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]

    def headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.auth_env_var:
            token = os.environ.get(self.auth_env_var)
            if not token:
                raise ConfigError(f"environment variable {self.auth_env_var} is not set")
            headers["Authorization"] = f"Bearer {token}"
        return headers


@dataclass(frozen=True)
class MetricConfig:
    """Which extra metrics to compute and how to bootstrap.

    JSON form::

        {"resamples": 10,
         "adapters": {"F1RadGraph": "tcp://127.0.0.1:9100"},
         "tasks": {"ImpressionPrediction": ["F1CheXbert", "F1RadGraph"]},
         "stratify": ["system"]}
    """

    resamples: int = DEFAULT_RESAMPLES
    external: Mapping[TaskKind, tuple[ExternalMetric, ...]] = field(default_factory=dict)
    adapters: Mapping[ExternalMetric, str] = field(default_factory=dict)
    stratify: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetricConfig":
        try:
            external = {
                TaskKind.parse(task): tuple(ExternalMetric(m) for m in metrics)
                for task, metrics in (data.get("tasks") or {}).items()
            }
            adapters = {ExternalMetric(m): str(a) for m, a in (data.get("adapters") or {}).items()}
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for metrics in external.values():
            for metric in metrics:
                if metric not in adapters:
                    raise ConfigError(f"no adapter configured for {metric.value}")
        return cls(
            resamples=int(data.get("resamples", DEFAULT_RESAMPLES)),
            external=external,
            adapters=adapters,
            stratify=tuple(data.get("stratify") or ()),
        )

    @classmethod
    def load(cls, path: str | Path) -> "MetricConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read metric config {path}: {exc}") from exc
        return cls.from_dict(data)


@dataclass(frozen=True)
class EvalRecord:
    example_id: str
    task: TaskKind
    prompt: str
    reference: str
    prediction: str | None = None
    latency_ms: float = field(default=0.0, compare=False)
    attempt_count: int = 0
    failure: str | None = None
    strata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if (self.prediction is None) == (self.failure is None):
            raise ValueError(f"record {self.example_id!r} needs exactly one of prediction/failure")
        object.__setattr__(self, "task", TaskKind(self.task))

    def to_dict(self, include_timing: bool = False) -> dict[str, Any]:
        out = {
            "example_id": self.example_id,
            "task": self.task.value,
            "prompt": self.prompt,
            "reference": self.reference,
            "prediction": self.prediction,
            "attempt_count": self.attempt_count,
            "failure": self.failure,
            "strata": dict(self.strata),
        }
        if include_timing:
            out["latency_ms"] = self.latency_ms
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EvalRecord":
        return cls(
            example_id=data["example_id"],
            task=TaskKind(data["task"]),
            prompt=data["prompt"],
            reference=data["reference"],
            prediction=data.get("prediction"),
            latency_ms=data.get("latency_ms", 0.0),
            attempt_count=data.get("attempt_count", 0),
            failure=data.get("failure"),
            strata=data.get("strata") or {},
        )


StrataTables = Mapping[str, Mapping[str, Sequence[MetricResult]]]


@dataclass(frozen=True)
class EvalReport:
    """Records, aggregate metrics and stratified tables for one task.

    ``strata_tables`` maps a stratum key (``system``, ``section``,
    ``category``, ...) to one row of metrics per stratum value.
    """

    task: TaskKind
    records: Sequence[EvalRecord]
    metrics: Sequence[MetricResult]
    strata_tables: StrataTables = field(default_factory=dict)
    seed: int = DEFAULT_SEED
    resamples: int = DEFAULT_RESAMPLES

    def __post_init__(self) -> None:
        object.__setattr__(self, "task", TaskKind(self.task))
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        object.__setattr__(
            self,
            "strata_tables",
            {k: {v: tuple(rows) for v, rows in table.items()} for k, table in self.strata_tables.items()},
        )

    @property
    def failures(self) -> int:
        return sum(r.failure is not None for r in self.records)

    def metric(self, name: str) -> MetricResult:
        for m in self.metrics:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_dict(self, include_timing: bool = False) -> dict[str, Any]:
        return {
            "task": self.task.value,
            "seed": self.seed,
            "resamples": self.resamples,
            "metrics": [m.to_dict() for m in self.metrics],
            "strata_tables": {
                key: {value: [m.to_dict() for m in rows] for value, rows in table.items()}
                for key, table in self.strata_tables.items()
            },
            "records": [r.to_dict(include_timing) for r in self.records],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EvalReport":
        return cls(
            task=TaskKind(data["task"]),
            records=[EvalRecord.from_dict(r) for r in data["records"]],
            metrics=[MetricResult.from_dict(m) for m in data["metrics"]],
            strata_tables={
                key: {value: [MetricResult.from_dict(m) for m in rows] for value, rows in table.items()}
                for key, table in data.get("strata_tables", {}).items()
            },
            seed=data.get("seed", DEFAULT_SEED),
            resamples=data.get("resamples", DEFAULT_RESAMPLES),
        )


# ---------------------------------------------------------------------------
# prediction collection
# ---------------------------------------------------------------------------


class _PermanentFailure(Exception):
    pass


class _TransientFailure(Exception):
    pass


def _cache_path(cache_dir: Path, endpoint: EndpointConfig, example: InstructionExample) -> Path:
    prompt_hash = hashlib.sha256(example.prompt.encode("utf-8")).hexdigest()
    key = f"{endpoint.fingerprint()}\0{example.id}\0{prompt_hash}"
    return cache_dir / f"{hashlib.sha256(key.encode('utf-8')).hexdigest()}.json"


def _read_cache(path: Path) -> dict[str, Any] | None:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return None
    return data if isinstance(data.get("prediction"), str) else None


def _write_cache(path: Path, payload: dict[str, Any]) -> None:
    tmp = path.with_suffix(f".{os.getpid()}.tmp")
    tmp.write_text(json.dumps(payload, ensure_ascii=False, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)


class _Progress:
    """Completed-count seen by observers; only ever increases."""

    def __init__(self, total: int, callback: Callable[[int, int], None] | None) -> None:
        self.total = total
        self.done = 0
        self._lock = asyncio.Lock()
        self._callback = callback

    async def tick(self) -> None:
        async with self._lock:
            self.done += 1
            if self._callback is not None:
                self._callback(self.done, self.total)


async def _request_once(client: httpx.AsyncClient, endpoint: EndpointConfig, headers: dict, prompt: str) -> str:
    body = _fill(endpoint.request_template, prompt)
    try:
        response = await client.post(endpoint.base_url, json=body, headers=headers)
    except httpx.TimeoutException as exc:
        raise _TransientFailure(f"timeout: {exc}") from exc
    except httpx.TransportError as exc:
        raise _TransientFailure(f"transport error: {exc!r}") from exc
    if response.status_code >= 500:
        raise _TransientFailure(f"HTTP {response.status_code}")
    if response.status_code >= 400:
        raise _PermanentFailure(f"HTTP {response.status_code}")
    try:
        text = extract_path(response.json(), endpoint.response_path)
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise _PermanentFailure(f"reply has no text at {endpoint.response_path!r}") from exc
    if not isinstance(text, str):
        raise _PermanentFailure(f"value at {endpoint.response_path!r} is not a string")
    return text


async def _predict(
    example: InstructionExample,
    client: httpx.AsyncClient,
    endpoint: EndpointConfig,
    headers: dict,
    gate: asyncio.Semaphore,
    seed: int,
) -> EvalRecord:
    jitter = random.Random(f"{seed}:{example.id}")
    started = time.perf_counter()
    attempts = 0
    failure = None
    while True:
        attempts += 1
        try:
            async with gate:
                text = await _request_once(client, endpoint, headers, example.prompt)
        except _PermanentFailure as exc:
            failure = str(exc)
            break
        except _TransientFailure as exc:
            failure = str(exc)
            if attempts > endpoint.max_retries:
                break
            delay = endpoint.backoff_base * endpoint.backoff_factor ** (attempts - 1)
            await asyncio.sleep(delay * (1 + jitter.random() / 2))
            continue
        return _record(example, prediction=text, attempts=attempts, started=started)
    logger.warning("example %s failed after %d attempt(s): %s", example.id, attempts, failure)
    return _record(example, failure=failure, attempts=attempts, started=started)


def _record(
    example: InstructionExample,
    *,
    prediction: str | None = None,
    failure: str | None = None,
    attempts: int = 0,
    started: float | None = None,
) -> EvalRecord:
    latency = (time.perf_counter() - started) * 1000 if started is not None else 0.0
    return EvalRecord(
        example_id=example.id,
        task=example.task,
        prompt=example.prompt,
        reference=example.reference,
        prediction=prediction,
        latency_ms=latency,
        attempt_count=attempts,
        failure=failure,
        strata=dict(example.strata),
    )


async def collect_predictions(
    dataset: Sequence[InstructionExample],
    endpoint: EndpointConfig,
    *,
    seed: int = DEFAULT_SEED,
    dry_run: bool = False,
    cache_dir: str | Path | None = None,
    transport: httpx.AsyncBaseTransport | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> list[EvalRecord]:
    """Send every example once (plus retries); return records sorted by example id.

    At most ``endpoint.max_parallel`` requests are in flight. A dry run skips
    the network and echoes each reference back as the prediction.
    """
    tracker = _Progress(len(dataset), progress)
    if dry_run:
        records = []
        for example in dataset:
            records.append(_record(example, prediction=example.reference))
            await tracker.tick()
        return sorted(records, key=lambda r: r.example_id)

    headers = endpoint.headers()
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    gate = asyncio.Semaphore(endpoint.max_parallel)
    cache_lock = asyncio.Lock()

    async with httpx.AsyncClient(transport=transport, timeout=endpoint.timeout) as client:

        async def one(example: InstructionExample) -> EvalRecord:
            path = _cache_path(cache, endpoint, example) if cache is not None else None
            hit = _read_cache(path) if path is not None else None
            if hit is not None:
                record = _record(example, prediction=hit["prediction"], attempts=hit.get("attempt_count", 1))
            else:
                record = await _predict(example, client, endpoint, headers, gate, seed)
                if path is not None and record.prediction is not None:
                    async with cache_lock:
                        _write_cache(
                            path,
                            {
                                "example_id": example.id,
                                "endpoint": endpoint.fingerprint(),
                                "prompt_sha256": hashlib.sha256(example.prompt.encode("utf-8")).hexdigest(),
                                "prediction": record.prediction,
                                "attempt_count": record.attempt_count,
                            },
                        )
            await tracker.tick()
            return record

        records = await asyncio.gather(*(one(example) for example in dataset))
    return sorted(records, key=lambda r: r.example_id)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def _bootstrapped(name: str, items: list, aggregate: Callable[[list], float], seed: int, resamples: int) -> MetricResult:
    point, low, high = bootstrap_ci(items, aggregate, resamples=resamples, seed=seed)
    return MetricResult(name, point, low, high, len(items))


def _lexical_rows(pairs: list[tuple[str, str]]) -> list[tuple[float, float, float, float, float]]:
    rows = []
    for pred, ref in pairs:
        p, r, f = token_f1(pred, ref)
        rows.append((f, p, r, bleu_4(pred, ref), rouge_l(pred, ref)))
    return rows


_LEXICAL_NAMES = ("F1-Score", "Precision", "Recall", "BLEU-4", "RougeL")


def _parse_sections(text: str) -> SectionedReport:
    try:
        return parse_rendered_sections(text)
    except ParseFailure:
        return SectionedReport()


def _parse_changes(text: str) -> ChangeSummary:
    try:
        return parse_rendered_change_summary(text)
    except (ParseFailure, ValueError):
        return ChangeSummary()


def _plain_mean_rows(rows: list[tuple[float, float, float]], n: int) -> list[MetricResult]:
    if not rows:
        return []
    return [
        MetricResult(name, fmean(r[i] for r in rows), n=n)
        for i, name in enumerate(("BLEU-4", "RougeL", "F1-Score"))
    ]


def _score_segmentation(scored: list[EvalRecord]) -> tuple[list[MetricResult], dict]:
    per_section: dict[SectionName, list[tuple[float, float, float]]] = defaultdict(list)
    for record in scored:
        ref = _parse_sections(record.reference)
        pred = _parse_sections(record.prediction or "")
        for name, ref_text in ref.sections.items():
            pred_text = pred.get(name) or ""
            per_section[name].append(
                (bleu_4(pred_text, ref_text), rouge_l(pred_text, ref_text), token_f1(pred_text, ref_text)[2])
            )
    table = {
        name.display: _plain_mean_rows(per_section[name], len(per_section[name]))
        for name in SectionName
        if per_section[name]
    }
    pooled = [row for name in SectionName for row in per_section[name]]
    return _plain_mean_rows(pooled, len(scored)), {"section": table}


def _score_changes(scored: list[EvalRecord]) -> tuple[list[MetricResult], dict]:
    if not scored:
        return [], {}
    pairs = [(_parse_changes(r.prediction or ""), _parse_changes(r.reference)) for r in scored]
    rows = score_change_summaries(pairs)
    table = {}
    supported = []
    for row in rows:
        if row.support == 0:
            table[row.key] = []
            continue
        supported.append((row.bleu_4, row.rouge_l, row.f1))
        table[row.key] = [
            MetricResult("BLEU-4", row.bleu_4, n=row.support),
            MetricResult("RougeL", row.rouge_l, n=row.support),
            MetricResult("F1-Score", row.f1, n=row.support),
        ]
    metrics = _plain_mean_rows(supported, len(scored))
    return metrics, {"category": table}


def score_records(
    task: TaskKind,
    records: Sequence[EvalRecord],
    config: MetricConfig | None = None,
    seed: int = DEFAULT_SEED,
) -> tuple[list[MetricResult], dict[str, dict[str, list[MetricResult]]]]:
    """Task-specific metrics over the records that carry a prediction.

    Segmentation and change-summary tasks get per-section / per-category
    tables and no bootstrap intervals; every other task is bootstrapped.
    """
    config = config or MetricConfig()
    task = TaskKind(task)
    scored = sorted((r for r in records if r.prediction is not None), key=lambda r: r.example_id)
    resamples = config.resamples

    if task is TaskKind.REPORT_SEGMENTATION:
        return _score_segmentation(scored)
    if task is TaskKind.TEMPORAL_CHANGE_SUMMARY:
        return _score_changes(scored)
    if not scored:
        return [], {}

    metrics: list[MetricResult] = []
    if task in LABEL_TASKS:
        pairs = [(parse_label_list(r.prediction), parse_label_list(r.reference)) for r in scored]
        for k, name in enumerate(("F1-Score", "Precision", "Recall")):
            agg = lambda ps, k=k: multilabel_macro_f1([p for p, _ in ps], [q for _, q in ps])[k]
            metrics.append(_bootstrapped(name, pairs, agg, seed, resamples))
    elif task is TaskKind.NLI:
        pairs = [(NliLabel.from_text(r.prediction), NliLabel(r.reference.strip().lower())) for r in scored]
        for k, name in enumerate(("F1-Score", "Precision", "Recall")):
            agg = lambda ps, k=k: nli_scores([p for p, _ in ps], [q for _, q in ps])[k]
            metrics.append(_bootstrapped(name, pairs, agg, seed, resamples))
    else:
        rows = _lexical_rows([(r.prediction, r.reference) for r in scored])
        for k, name in enumerate(_LEXICAL_NAMES):
            metrics.append(_bootstrapped(name, [row[k] for row in rows], fmean, seed, resamples))

    for metric in config.external.get(task, ()):
        context = [r.prompt for r in scored] if metric is ExternalMetric.ALIGN_SCORE else [r.reference for r in scored]
        request = ExternalMetricRequest(metric, [r.prediction for r in scored], context)
        scores = external_metric(request, config.adapters[metric])
        metrics.append(_bootstrapped(metric.value, scores, fmean, seed, resamples))
    return metrics, {}


def _check_failures(records: Sequence[EvalRecord]) -> None:
    failed = sum(r.failure is not None for r in records)
    if records and failed > FAILURE_THRESHOLD * len(records):
        raise TooManyFailures(failed, len(records))


def _build_report(
    task: TaskKind,
    records: Sequence[EvalRecord],
    config: MetricConfig,
    seed: int,
    stratify_by: Iterable[str],
) -> EvalReport:
    metrics, tables = score_records(task, records, config, seed)
    report = EvalReport(task, records, metrics, tables, seed, config.resamples)
    # configured keys (and "system" for QA) apply only where every record has them;
    # explicitly requested keys must exist
    optional = [*config.stratify, *(["system"] if task is TaskKind.RADIOLOGY_QA else [])]
    keys = [k for k in optional if records and all(k in r.strata for r in records)]
    keys += list(stratify_by)
    extra = {key: stratify(report, key, config) for key in dict.fromkeys(keys)}
    if extra:
        report = replace(report, strata_tables={**report.strata_tables, **extra})
    return report


def run_suite(
    dataset: Sequence[InstructionExample],
    endpoint: EndpointConfig,
    metric_config: MetricConfig | None = None,
    *,
    seed: int = DEFAULT_SEED,
    dry_run: bool = False,
    cache_dir: str | Path | None = None,
    transport: httpx.AsyncBaseTransport | None = None,
    stratify_by: Iterable[str] = (),
    progress: Callable[[int, int], None] | None = None,
) -> dict[TaskKind, EvalReport]:
    """Evaluate a dataset that may mix tasks; one report per task.

    Raises :class:`TooManyFailures` when more than half of all requests fail.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    config = metric_config or MetricConfig()
    records = asyncio.run(
        collect_predictions(
            dataset, endpoint, seed=seed, dry_run=dry_run, cache_dir=cache_dir, transport=transport, progress=progress
        )
    )
    _check_failures(records)
    by_task: dict[TaskKind, list[EvalRecord]] = defaultdict(list)
    for record in records:
        by_task[record.task].append(record)
    stratify_by = tuple(stratify_by)
    return {
        task: _build_report(task, by_task[task], config, seed, stratify_by)
        for task in TaskKind
        if task in by_task
    }


def run_eval(
    dataset: Sequence[InstructionExample],
    endpoint: EndpointConfig,
    metric_config: MetricConfig | None = None,
    **kwargs: Any,
) -> EvalReport:
    """Evaluate a single-task dataset. Keyword arguments as for :func:`run_suite`."""
    tasks = {example.task for example in dataset}
    if len(tasks) > 1:
        raise ValueError(f"run_eval needs a single-task dataset, got {sorted(t.value for t in tasks)}")
    reports = run_suite(dataset, endpoint, metric_config, **kwargs)
    return next(iter(reports.values()))


def stratify(
    report: EvalReport, key: str, config: MetricConfig | None = None
) -> dict[str, list[MetricResult]]:
    """Recompute the report's metrics separately for each value of stratum ``key``."""
    missing = [r.example_id for r in report.records if key not in r.strata]
    if missing or not report.records:
        raise UnknownStratum(f"stratum {key!r} missing on {len(missing)} record(s)")
    config = config or MetricConfig(resamples=report.resamples)
    groups: dict[str, list[EvalRecord]] = defaultdict(list)
    for record in report.records:
        groups[record.strata[key]].append(record)
    return {
        value: score_records(report.task, groups[value], config, report.seed)[0] for value in sorted(groups)
    }


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def parse_report_json(text: str) -> EvalReport:
    return EvalReport.from_dict(json.loads(text))


def _markdown(report: EvalReport) -> str:
    lines = [f"# {report.task.value}", "", "| Metric | Score | n |", "|---|---|---|"]
    lines += [f"| {m.name} | {m.format_cell()} | {m.n} |" for m in report.metrics]
    for key, table in report.strata_tables.items():
        names = list(dict.fromkeys(m.name for rows in table.values() for m in rows))
        lines += ["", f"## {key}", "", "| " + " | ".join([key, *names, "n"]) + " |"]
        lines.append("|" + "---|" * (len(names) + 2))
        for value, rows in table.items():
            cells = {m.name: m.format_cell() for m in rows}
            n = max((m.n for m in rows), default=0)
            lines.append("| " + " | ".join([value, *(cells.get(name, "") for name in names), str(n)]) + " |")
    return "\n".join(lines) + "\n"


def _csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["table", "stratum", "metric", "point", "ci_low", "ci_high", "n"])

    def row(table: str, stratum: str, m: MetricResult) -> list:
        return [table, stratum, m.name, repr(m.point), "" if m.ci_low is None else repr(m.ci_low),
                "" if m.ci_high is None else repr(m.ci_high), m.n]

    for m in report.metrics:
        writer.writerow(row("overall", "", m))
    for key, table in report.strata_tables.items():
        for value, rows in table.items():
            for m in rows:
                writer.writerow(row(key, value, m))
    return buf.getvalue()


def emit_report(report: EvalReport, fmt: str = "json", include_timing: bool = False) -> str:
    """Serialize deterministically as ``json``, ``csv`` or ``markdown``.

    Latencies are left out unless ``include_timing`` is set, so two runs
    with the same inputs emit identical bytes.
    """
    if fmt == "json":
        return json.dumps(report.to_dict(include_timing), ensure_ascii=False, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        return _csv(report)
    if fmt in ("markdown", "md"):
        return _markdown(report)
    raise ValueError(f"unknown report format {fmt!r}")
