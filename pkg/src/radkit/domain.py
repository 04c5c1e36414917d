"""Shared domain types, the task taxonomy and label canonicalization."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from radkit.errors import EmptyLabel

__all__ = [
    "SectionName",
    "SectionedReport",
    "ConditionChangeCategory",
    "DeviceChangeCategory",
    "ChangeSummary",
    "LabelSet",
    "TaskKind",
    "Split",
    "InstructionExample",
    "NliLabel",
    "canonicalize_label",
    "parse_label_list",
    "LABEL_TASKS",
    "TEXT_TASKS",
]


class SectionName(str, Enum):
    """The eight report sections, in rendering order; values are display strings."""

    CLINICAL_HISTORY = "Clinical History"
    COMPARISON = "Comparison"
    TECHNIQUE = "Technique"
    PROCEDURE_COMMENTS = "Procedure Comments"
    FINDINGS = "Findings"
    IMPRESSION = "Impression"
    END_OF_IMPRESSION = "End Of Impression"
    SUMMARY = "Summary"

    @property
    def display(self) -> str:
        return self.value

    @classmethod
    def lookup(cls, name: str) -> "SectionName":
        """Resolve an enum name, display string or known alias, case-insensitively."""
        key = " ".join(name.replace("_", " ").split()).lower()
        for member in cls:
            if key in (member.value.lower(), member.name.replace("_", " ").lower()):
                return member
        alias = _SECTION_ALIASES.get(key)
        if alias is None:
            raise KeyError(name)
        return alias


_SECTION_ALIASES = {
    "finding": SectionName.FINDINGS,
    "comparisons": SectionName.COMPARISON,
    "clinicalhistory": SectionName.CLINICAL_HISTORY,
    "procedurecomments": SectionName.PROCEDURE_COMMENTS,
    "endofimpression": SectionName.END_OF_IMPRESSION,
}


@dataclass(frozen=True)
class SectionedReport:
    """A report split into named sections; a missing key means the section is absent."""

    sections: Mapping[SectionName, str] = field(default_factory=dict)
    residual: str | None = None
    source_id: str = ""

    def __post_init__(self) -> None:
        cleaned: dict[SectionName, str] = {}
        for name, text in self.sections.items():
            name = name if isinstance(name, SectionName) else SectionName.lookup(name)
            if text is None:
                continue
            text = text.strip()
            if not text:
                raise ValueError(f"section {name.display!r} is empty")
            cleaned[name] = text
        ordered = {name: cleaned[name] for name in SectionName if name in cleaned}
        object.__setattr__(self, "sections", ordered)
        if self.residual is not None:
            residual = self.residual.strip()
            object.__setattr__(self, "residual", residual or None)

    def get(self, name: SectionName) -> str | None:
        return self.sections.get(name)

    def __getitem__(self, name: SectionName) -> str | None:
        return self.sections.get(name)


class ConditionChangeCategory(str, Enum):
    NEW = "New"
    RESOLVED = "Resolved"
    STABLE = "Stable"
    IMPROVED = "Improved"
    WORSENED = "Worsened"
    NEGATIVES = "Negatives"


class DeviceChangeCategory(str, Enum):
    NEW = "New"
    REMOVED = "Removed"
    UNCHANGED = "Unchanged"
    CHANGED = "Changed"
    RECOMMENDATIONS = "Recommendations"


def _clean_items(items: Iterable[str], where: str) -> tuple[str, ...]:
    if isinstance(items, str):
        raise TypeError(f"{where}: expected a list of strings, got a string")
    out = []
    for item in items:
        if not isinstance(item, str):
            raise TypeError(f"{where}: items must be strings")
        item = item.strip()
        if not item:
            raise ValueError(f"{where}: empty item")
        if "\n" in item or "\r" in item:
            raise ValueError(f"{where}: items must be single-line")
        out.append(item)
    return tuple(out)


@dataclass(frozen=True)
class ChangeSummary:
    """Categorized changes of a report relative to its prior.

    Every category is always present; missing ones are filled with an empty
    tuple. Items are stripped and must be single-line.
    """

    conditions: Mapping[ConditionChangeCategory, tuple[str, ...]] = field(default_factory=dict)
    devices: Mapping[DeviceChangeCategory, tuple[str, ...]] = field(default_factory=dict)
    source_id: str = ""

    def __post_init__(self) -> None:
        conditions = {
            cat: _clean_items(self.conditions.get(cat, ()), f"conditions.{cat.value}")
            for cat in ConditionChangeCategory
        }
        devices = {
            cat: _clean_items(self.devices.get(cat, ()), f"devices.{cat.value}")
            for cat in DeviceChangeCategory
        }
        extra = set(self.conditions) - set(ConditionChangeCategory)
        extra |= set(self.devices) - set(DeviceChangeCategory)
        if extra:
            raise ValueError(f"unknown categories: {sorted(map(str, extra))}")
        object.__setattr__(self, "conditions", conditions)
        object.__setattr__(self, "devices", devices)

    def overlapping_conditions(self) -> list[tuple[str, list[ConditionChangeCategory]]]:
        """Items listed under more than one condition category."""
        seen: dict[str, list[ConditionChangeCategory]] = {}
        for cat, items in self.conditions.items():
            for item in dict.fromkeys(items):
                seen.setdefault(item, []).append(cat)
        return [(item, cats) for item, cats in seen.items() if len(cats) > 1]

    def categories(self) -> list[tuple[str, Enum, tuple[str, ...]]]:
        """All eleven ``(group, category, items)`` triples in canonical order."""
        rows: list[tuple[str, Enum, tuple[str, ...]]] = []
        rows += [("conditions", c, self.conditions[c]) for c in ConditionChangeCategory]
        rows += [("devices", c, self.devices[c]) for c in DeviceChangeCategory]
        return rows

    def is_empty(self) -> bool:
        return not any(items for _, _, items in self.categories())


_WS = re.compile(r"\s+")


def canonicalize_label(raw: str) -> str:
    """Lowercase, collapse internal whitespace and strip. Punctuation is kept."""
    label = _WS.sub(" ", raw).strip().lower()
    if not label:
        raise EmptyLabel(f"label {raw!r} is empty after normalization")
    return label


@dataclass(frozen=True)
class LabelSet:
    labels: frozenset[str] = frozenset()
    vocabulary_id: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "labels", frozenset(canonicalize_label(x) for x in self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(sorted(self.labels))

    def __contains__(self, label: object) -> bool:
        return label in self.labels


def split_label_list(raw: str) -> list[str]:
    """Comma-separated labels, canonicalized, deduplicated, first-seen order kept."""
    out = [canonicalize_label(part) for part in raw.split(",") if part.strip()]
    return list(dict.fromkeys(out))


def parse_label_list(raw: str, vocabulary_id: str = "") -> LabelSet:
    """Parse a comma-separated label string; blank input is the empty set."""
    return LabelSet(frozenset(split_label_list(raw)), vocabulary_id)


class TaskKind(str, Enum):
    IMPRESSION_PREDICTION = "ImpressionPrediction"
    CLEANUP_TEXT = "CleanupText"
    ABNORMALITY_LABELS = "AbnormalityLabels"
    TUBES_LINES_LABELS = "TubesLinesLabels"
    QA_COMPREHENSION = "QaComprehension"
    EXTRACT_FINDINGS = "ExtractFindings"
    EXTRACT_IMPRESSION = "ExtractImpression"
    NLI = "Nli"
    REPORT_SEGMENTATION = "ReportSegmentation"
    TEMPORAL_CHANGE_SUMMARY = "TemporalChangeSummary"
    PADCHEST_LABELS = "PadchestLabels"
    RADIOLOGY_QA = "RadiologyQa"

    @classmethod
    def parse(cls, name: str) -> "TaskKind":
        key = name.replace("-", "").replace("_", "").lower()
        for member in cls:
            if key in (member.value.lower(), member.name.replace("_", "").lower()):
                return member
        raise ValueError(f"unknown task {name!r}; expected one of {[m.value for m in cls]}")


LABEL_TASKS = frozenset(
    {TaskKind.ABNORMALITY_LABELS, TaskKind.TUBES_LINES_LABELS, TaskKind.PADCHEST_LABELS}
)
TEXT_TASKS = frozenset(
    {
        TaskKind.IMPRESSION_PREDICTION,
        TaskKind.CLEANUP_TEXT,
        TaskKind.QA_COMPREHENSION,
        TaskKind.EXTRACT_FINDINGS,
        TaskKind.EXTRACT_IMPRESSION,
        TaskKind.RADIOLOGY_QA,
    }
)

VOCABULARIES = {
    TaskKind.ABNORMALITY_LABELS: "chestimagenome-abnormality",
    TaskKind.TUBES_LINES_LABELS: "chestimagenome-devices",
    TaskKind.PADCHEST_LABELS: "padchest",
}


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class NliLabel(str, Enum):
    POSITIVE = "positive"
    NEGATED = "negated"
    NEUTRAL = "neutral"

    @classmethod
    def from_text(cls, text: str) -> "NliLabel | None":
        """Read a model answer: the first word that names a class, else None."""
        for token in re.findall(r"[a-z]+", text.lower()):
            try:
                return cls(token)
            except ValueError:
                continue
        return None


@dataclass(frozen=True)
class InstructionExample:
    id: str
    task: TaskKind
    prompt: str
    reference: str
    split: Split
    strata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("example id is empty")
        if not self.prompt.strip() or not self.reference.strip():
            raise ValueError(f"example {self.id!r}: prompt and reference must be non-empty")
        object.__setattr__(self, "task", TaskKind(self.task))
        object.__setattr__(self, "split", Split(self.split))
        object.__setattr__(self, "strata", dict(self.strata))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "task": self.task.value,
            "prompt": self.prompt,
            "reference": self.reference,
            "split": self.split.value,
            "strata": dict(self.strata),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "InstructionExample":
        return cls(
            id=str(data["id"]),
            task=TaskKind.parse(data["task"]),
            prompt=data["prompt"],
            reference=data["reference"],
            split=Split(data["split"]),
            strata={str(k): str(v) for k, v in (data.get("strata") or {}).items()},
        )
