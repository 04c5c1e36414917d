"""Instruction-dataset construction from annotation records."""

from __future__ import annotations

import csv
import json
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from radkit.changes import change_summary_from_obj, parse_change_summary_json, render_change_summary
from radkit.domain import (
    LABEL_TASKS,
    InstructionExample,
    NliLabel,
    SectionedReport,
    Split,
    TaskKind,
    split_label_list,
)
from radkit.errors import DocumentSyntaxError, DuplicateId, MissingField, SchemaError, UnknownSplit
from radkit.segmenter import parse_rendered_sections, render_sections, segment_report

__all__ = [
    "PromptTemplate",
    "load_template",
    "all_templates",
    "SplitManifest",
    "load_manifest",
    "manifest_from_articles",
    "build_instruction",
    "build_dataset",
    "load_records",
    "write_dataset",
    "read_dataset",
    "split_dataset",
    "DatasetStats",
    "dataset_stats",
    "parse_radiopaedia_qa",
]

_PLACEHOLDER = re.compile(r"\{([A-Z][A-Z_]*)\}")


@dataclass(frozen=True)
class PromptTemplate:
    task: TaskKind
    template: str

    @property
    def placeholders(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(_PLACEHOLDER.findall(self.template)))

    def render(self, values: Mapping[str, Any]) -> str:
        for name in self.placeholders:
            if values.get(name) is None:
                raise MissingField(name)
        # substitute in one pass so braces inside values are never re-expanded
        return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), self.template)


@lru_cache(maxsize=None)
def load_template(task: TaskKind, directory: str | None = None) -> PromptTemplate:
    """Template for ``task``; from the packaged files unless ``directory`` is given."""
    name = f"{TaskKind(task).value}.txt"
    if directory is None:
        text = resources.files("radkit").joinpath("templates", name).read_text(encoding="utf-8")
    else:
        text = Path(directory, name).read_text(encoding="utf-8")
    return PromptTemplate(TaskKind(task), text.rstrip("\n"))


def all_templates(directory: str | None = None) -> dict[TaskKind, PromptTemplate]:
    return {task: load_template(task, directory) for task in TaskKind}


class SplitManifest(Mapping[str, Split]):
    """Maps source ids to their split; each id appears once."""

    def __init__(self, entries: Iterable[tuple[str, str | Split]] = ()) -> None:
        self._splits: dict[str, Split] = {}
        for source_id, split in entries:
            if source_id in self._splits:
                raise DuplicateId(f"id {source_id!r} appears twice in the manifest")
            self._splits[source_id] = Split(split)

    def __getitem__(self, source_id: str) -> Split:
        try:
            return self._splits[source_id]
        except KeyError:
            raise UnknownSplit(source_id) from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._splits)

    def __len__(self) -> int:
        return len(self._splits)

    def merged(self, other: "SplitManifest") -> "SplitManifest":
        return SplitManifest([*self.items(), *other.items()])


def load_manifest(path: str | Path) -> SplitManifest:
    """Two-column CSV with header ``id,split``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "split"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: manifest needs 'id' and 'split' columns")
        return SplitManifest((row["id"], row["split"].strip().lower()) for row in reader)


def manifest_from_articles(articles: Iterable[Mapping[str, Any]]) -> SplitManifest:
    """Summary articles go to test, every other article to train."""
    return SplitManifest(
        (str(a["id"]), Split.TEST if a.get("is_summary") else Split.TRAIN) for a in articles
    )


def _label_reference(answer: Any) -> str:
    labels = split_label_list(answer) if isinstance(answer, str) else split_label_list(",".join(answer))
    return ", ".join(labels)


def _segmentation_reference(record: Mapping[str, Any]) -> tuple[str, SectionedReport]:
    answer = record.get("answer")
    if answer is None:
        report = segment_report(record["REPORT_TEXT"])
    elif isinstance(answer, Mapping):
        report = SectionedReport({k: v for k, v in answer.items() if v and v != "N/A"})
    else:
        report = parse_rendered_sections(answer)
    return render_sections(report), report


def _reference_and_strata(task: TaskKind, record: Mapping[str, Any]) -> tuple[str, dict[str, str]]:
    strata: dict[str, str] = {}
    if task is TaskKind.REPORT_SEGMENTATION:
        reference, report = _segmentation_reference(record)
        strata["sections"] = ",".join(name.display for name in report.sections)
        return reference, strata

    if "answer" not in record or record["answer"] in (None, ""):
        raise MissingField("answer")
    answer = record["answer"]
    if task in LABEL_TASKS:
        return _label_reference(answer), strata
    if task is TaskKind.NLI:
        return NliLabel(str(answer).strip().lower()).value, strata
    if task is TaskKind.TEMPORAL_CHANGE_SUMMARY:
        summary = (
            parse_change_summary_json(answer) if isinstance(answer, str) else change_summary_from_obj(answer)
        )
        strata["categories"] = ",".join(
            f"{group}.{cat.value}" for group, cat, items in summary.categories() if items
        )
        return render_change_summary(summary), strata
    if task is TaskKind.RADIOLOGY_QA and record.get("system"):
        strata["system"] = str(record["system"])
    return str(answer), strata


def build_instruction(
    task: TaskKind,
    record: Mapping[str, Any],
    manifest: Mapping[str, Split],
    template: PromptTemplate | None = None,
) -> InstructionExample:
    """Turn one annotation record into a prompt/reference pair.

    ``record`` carries ``source_id``, one value per template placeholder and an
    ``answer``. Keys of the form ``strata.<name>`` are copied into the strata.
    """
    task = TaskKind(task)
    template = template or load_template(task)
    if not record.get("source_id"):
        raise MissingField("source_id")
    source_id = str(record["source_id"])
    split = manifest[source_id]
    prompt = template.render(record)
    reference, strata = _reference_and_strata(task, record)
    for key, value in record.items():
        if key.startswith("strata.") and value not in (None, ""):
            strata[key[len("strata."):]] = str(value)
    example_id = str(record.get("id") or f"{task.value}-{source_id}")
    return InstructionExample(example_id, task, prompt, reference, split, strata)


def build_dataset(
    task: TaskKind,
    records: Sequence[Mapping[str, Any]],
    manifest: Mapping[str, Split],
    workers: int = 1,
    template: PromptTemplate | None = None,
) -> list[InstructionExample]:
    """Build every record; output order matches input order for any ``workers``."""
    template = template or load_template(TaskKind(task))
    if workers <= 1:
        return [build_instruction(task, r, manifest, template) for r in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda r: build_instruction(task, r, manifest, template), records))


def load_records(path: str | Path, columns: Mapping[str, str] | None = None) -> list[dict[str, Any]]:
    """Read annotation records from JSONL or CSV.

    ``columns`` maps record fields (``FINDINGS``, ``answer``, ...) to source
    column names; unmapped columns pass through unchanged.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, newline="", encoding="utf-8") as fh:
            rows: list[dict[str, Any]] = [dict(row) for row in csv.DictReader(fh)]
    else:
        with open(path, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
    if not columns:
        return rows
    out = []
    for row in rows:
        mapped = dict(row)
        for target, source in columns.items():
            if source in row:
                mapped[target] = row[source]
        out.append(mapped)
    return out


def write_dataset(examples: Iterable[InstructionExample], path: str | Path) -> int:
    seen: set[str] = set()
    lines = []
    for example in examples:
        if example.id in seen:
            raise DuplicateId(f"example id {example.id!r} is not unique")
        seen.add(example.id)
        lines.append(json.dumps(example.to_dict(), ensure_ascii=False))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return len(lines)


def read_dataset(path: str | Path) -> list[InstructionExample]:
    with open(path, encoding="utf-8") as fh:
        examples = [InstructionExample.from_dict(json.loads(line)) for line in fh if line.strip()]
    ids = Counter(e.id for e in examples)
    dupes = [i for i, c in ids.items() if c > 1]
    if dupes:
        raise DuplicateId(f"{path}: duplicate example ids {dupes[:5]}")
    return examples


def split_dataset(
    examples: Iterable[InstructionExample],
) -> tuple[list[InstructionExample], list[InstructionExample], list[InstructionExample]]:
    parts: dict[Split, list[InstructionExample]] = {s: [] for s in Split}
    for example in examples:
        parts[example.split].append(example)
    return parts[Split.TRAIN], parts[Split.VALIDATION], parts[Split.TEST]


@dataclass(frozen=True)
class DatasetStats:
    counts: Mapping[tuple[TaskKind, Split], int] = field(default_factory=dict)

    def count(self, task: TaskKind, split: Split) -> int:
        return self.counts.get((TaskKind(task), Split(split)), 0)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def split_totals(self) -> dict[Split, int]:
        return {s: sum(self.count(t, s) for t in TaskKind) for s in Split}

    def to_dict(self) -> dict[str, Any]:
        rows = {t.value: {s.value: self.count(t, s) for s in Split} for t in TaskKind}
        return {"tasks": rows, "totals": {s.value: n for s, n in self.split_totals().items()}, "total": self.total}

    def to_text(self) -> str:
        width = max(len(t.value) for t in TaskKind)
        header = f"{'Task':<{width}}  " + "  ".join(f"{s.value:>10}" for s in Split)
        lines = [header]
        for task in TaskKind:
            lines.append(f"{task.value:<{width}}  " + "  ".join(f"{self.count(task, s):>10,}" for s in Split))
        totals = self.split_totals()
        lines.append(f"{'Total':<{width}}  " + "  ".join(f"{totals[s]:>10,}" for s in Split))
        return "\n".join(lines) + "\n"


def dataset_stats(examples: Iterable[InstructionExample]) -> DatasetStats:
    return DatasetStats(dict(Counter((e.task, e.split) for e in examples)))


def parse_radiopaedia_qa(doc: str) -> list[tuple[str, str]]:
    """Decode ``[{"question": ..., "answer": ...}, ...]`` into (question, answer) pairs."""
    try:
        data = json.loads(doc)
    except json.JSONDecodeError as exc:
        raise DocumentSyntaxError(f"malformed JSON: {exc}") from exc
    if not isinstance(data, list):
        raise SchemaError("", "expected a JSON array")
    pairs = []
    for i, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise SchemaError(f"[{i}]", "expected an object")
        for key in ("question", "answer"):
            value = entry.get(key)
            if not isinstance(value, str):
                raise SchemaError(f"[{i}].{key}", "missing or not a string")
            if not value.strip():
                raise SchemaError(f"[{i}].{key}", "empty")
        extra = set(entry) - {"question", "answer"}
        if extra:
            raise SchemaError(f"[{i}].{sorted(extra)[0]}", "unexpected key")
        pairs.append((entry["question"], entry["answer"]))
    return pairs

