"""Temporal change summaries: JSON schema, textual rendering, parsing and scoring."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from statistics import fmean
from typing import Any, Iterable, Sequence

from radkit.domain import ChangeSummary, ConditionChangeCategory, DeviceChangeCategory
from radkit.errors import DocumentSyntaxError, EmptyInput, ParseFailure, SchemaError
from radkit.textmetrics import bleu_4, rouge_l, token_f1

__all__ = [
    "CONDITIONS_KEY",
    "DEVICES_KEY",
    "CHANGE_SUMMARY_JSON_SCHEMA",
    "Profile",
    "CategoryScore",
    "parse_change_summary_json",
    "change_summary_to_json",
    "render_change_summary",
    "parse_rendered_change_summary",
    "score_change_summaries",
]

CONDITIONS_KEY = "Diseases_Change_Summary"
DEVICES_KEY = "Tubes_Lines_Change_Summary"

_LIST_OF_STRINGS = {"type": "array", "items": {"type": "string"}}

CHANGE_SUMMARY_JSON_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "change summary",
    "type": "object",
    "properties": {
        CONDITIONS_KEY: {
            "type": "object",
            "properties": {c.value: _LIST_OF_STRINGS for c in ConditionChangeCategory},
            "required": [c.value for c in ConditionChangeCategory],
            "additionalProperties": False,
        },
        DEVICES_KEY: {
            "type": "object",
            "properties": {c.value: _LIST_OF_STRINGS for c in DeviceChangeCategory},
            "required": [c.value for c in DeviceChangeCategory],
            "additionalProperties": False,
        },
    },
    "required": [CONDITIONS_KEY, DEVICES_KEY],
    "additionalProperties": False,
}


def _check_group(doc: dict, key: str, categories: type[Enum]) -> dict:
    if key not in doc:
        raise SchemaError(key, "missing")
    group = doc[key]
    if not isinstance(group, dict):
        raise SchemaError(key, "must be an object")
    for cat in categories:
        if cat.value not in group:
            raise SchemaError(f"{key}.{cat.value}", "missing")
    allowed = {cat.value for cat in categories}
    for name in group:
        if name not in allowed:
            raise SchemaError(f"{key}.{name}", "unexpected key")
    out = {}
    for cat in categories:
        items = group[cat.value]
        path = f"{key}.{cat.value}"
        if not isinstance(items, list):
            raise SchemaError(path, "must be a list of strings")
        for i, item in enumerate(items):
            if not isinstance(item, str):
                raise SchemaError(f"{path}[{i}]", "must be a string")
            if not item.strip():
                raise SchemaError(f"{path}[{i}]", "must be non-empty")
            if "\n" in item.strip() or "\r" in item.strip():
                raise SchemaError(f"{path}[{i}]", "must be a single line")
        out[cat] = items
    return out


def parse_change_summary_json(doc: str, source_id: str = "") -> ChangeSummary:
    """Validate and decode the two-object JSON schema.

    Missing or extra keys, non-list values and non-string items raise
    :class:`SchemaError` with a dotted path. Items repeated across two
    condition categories are rejected as well.
    """
    try:
        data = json.loads(doc)
    except json.JSONDecodeError as exc:
        raise DocumentSyntaxError(f"malformed JSON: {exc}") from exc
    return change_summary_from_obj(data, source_id)


def change_summary_from_obj(data: Any, source_id: str = "") -> ChangeSummary:
    if not isinstance(data, dict):
        raise SchemaError("", "top level must be an object")
    for name in data:
        if name not in (CONDITIONS_KEY, DEVICES_KEY):
            raise SchemaError(name, "unexpected key")
    conditions = _check_group(data, CONDITIONS_KEY, ConditionChangeCategory)
    devices = _check_group(data, DEVICES_KEY, DeviceChangeCategory)
    summary = ChangeSummary(conditions, devices, source_id)
    overlap = summary.overlapping_conditions()
    if overlap:
        item, cats = overlap[0]
        raise SchemaError(
            f"{CONDITIONS_KEY}.{cats[1].value}",
            f"item {item!r} also listed under {cats[0].value}",
        )
    return summary


def change_summary_to_obj(cs: ChangeSummary) -> dict[str, dict[str, list[str]]]:
    return {
        CONDITIONS_KEY: {c.value: list(cs.conditions[c]) for c in ConditionChangeCategory},
        DEVICES_KEY: {c.value: list(cs.devices[c]) for c in DeviceChangeCategory},
    }


def change_summary_to_json(cs: ChangeSummary) -> str:
    return json.dumps(change_summary_to_obj(cs), ensure_ascii=False)


class Profile(str, Enum):
    """Rendering layouts: the default appendix layout, or the RadGraph2 one."""

    DEFAULT = "default"
    RADGRAPH2 = "radgraph2"


INDENT = "    "

_RADGRAPH2_DEVICES = "Change summary of medical devices"
_RADGRAPH2_CONDITIONS = "Change summary of medical conditions"
_RADGRAPH2_NO_CHANGE = "No change summary"


def render_change_summary(cs: ChangeSummary, profile: Profile = Profile.DEFAULT) -> str:
    """Indented textual form: heading, categories indented once, items twice.

    The RadGraph2 profile lists devices first, changed conditions second and
    stable items under ``No change summary:``; it omits empty categories.
    """
    lines: list[str] = []
    if Profile(profile) is Profile.DEFAULT:
        for heading, group in ((CONDITIONS_KEY, cs.conditions), (DEVICES_KEY, cs.devices)):
            lines.append(f"{heading}:")
            for cat, items in group.items():
                lines.append(f"{INDENT}{cat.value}:")
                lines.extend(f"{INDENT * 2}{item}" for item in items)
        return "\n".join(lines) + "\n"

    def block(heading: str, pairs: Iterable[tuple[Enum, tuple[str, ...]]]) -> None:
        lines.append(f"{heading}:")
        for cat, items in pairs:
            if items:
                lines.append(f"{INDENT}{cat.value}:")
                lines.extend(f"{INDENT * 2}{item}" for item in items)

    block(_RADGRAPH2_DEVICES, cs.devices.items())
    block(
        _RADGRAPH2_CONDITIONS,
        ((c, i) for c, i in cs.conditions.items() if c is not ConditionChangeCategory.STABLE),
    )
    block(_RADGRAPH2_NO_CHANGE, [(ConditionChangeCategory.STABLE, cs.conditions[ConditionChangeCategory.STABLE])])
    return "\n".join(lines) + "\n"


def _norm(text: str) -> str:
    return re.sub(r"[\s_]+", " ", text).strip().lower()


_HEADINGS = {
    _norm(CONDITIONS_KEY): "conditions",
    "diseases change summary": "conditions",
    _norm(_RADGRAPH2_CONDITIONS): "conditions",
    _norm(DEVICES_KEY): "devices",
    "tubes and lines change summary": "devices",
    "tube lines change summary": "devices",
    _norm(_RADGRAPH2_DEVICES): "devices",
    _norm(_RADGRAPH2_NO_CHANGE): "no_change",
}

_DEVICE_ALIASES = {"advanced": DeviceChangeCategory.CHANGED, "stable": DeviceChangeCategory.UNCHANGED}
_CONDITION_ALIASES = {"negative": ConditionChangeCategory.NEGATIVES, "unchanged": ConditionChangeCategory.STABLE}

_LABEL_LINE = re.compile(r"^(?P<label>[A-Za-z][A-Za-z _]*?)\s*:\s*(?P<rest>.*)$")


def _category(group: str, label: str) -> Enum | None:
    key = _norm(label)
    if group == "devices":
        for cat in DeviceChangeCategory:
            if cat.value.lower() == key:
                return cat
        return _DEVICE_ALIASES.get(key)
    for cat in ConditionChangeCategory:
        if cat.value.lower() == key:
            return cat
    return _CONDITION_ALIASES.get(key)


def parse_rendered_change_summary(text: str, source_id: str = "") -> ChangeSummary:
    """Inverse of :func:`render_change_summary` for either profile.

    Headings and category names match case-insensitively at any indentation.
    Blocks under ``No change summary:`` land in the condition categories.
    A device category the schema lacks, ``Advanced``, maps to ``Changed``.
    Lines indented to item depth (eight columns) are always items. Lines
    outside any category are ignored.
    """
    conditions: dict[Enum, list[str]] = {c: [] for c in ConditionChangeCategory}
    devices: dict[Enum, list[str]] = {c: [] for c in DeviceChangeCategory}
    group: str | None = None
    current: list[str] | None = None
    seen_heading = False

    for line in text.split("\n"):
        stripped = line.strip()
        if not stripped:
            continue
        # anything at item depth is an item, even if it looks like "Stable:"
        depth = len(line.expandtabs(len(INDENT))) - len(line.expandtabs(len(INDENT)).lstrip())
        match = _LABEL_LINE.match(stripped) if depth < 2 * len(INDENT) else None
        if match:
            heading = _HEADINGS.get(_norm(match.group("label")))
            if heading is not None:
                group, current, seen_heading = heading, None, True
                continue
            if group is not None:
                target_group = "devices" if group == "devices" else "conditions"
                cat = _category(target_group, match.group("label"))
                if cat is not None:
                    current = (devices if target_group == "devices" else conditions)[cat]
                    if match.group("rest").strip():
                        current.append(match.group("rest").strip())
                    continue
        if current is not None:
            current.append(stripped)

    if not seen_heading:
        raise ParseFailure("no recognizable change summary heading", text)
    return ChangeSummary(conditions, devices, source_id)


@dataclass(frozen=True)
class CategoryScore:
    group: str
    category: str
    bleu_4: float | None
    rouge_l: float | None
    f1: float | None
    support: int
    n_examples: int

    @property
    def key(self) -> str:
        return f"{self.group}.{self.category}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "group": self.group,
            "category": self.category,
            "bleu_4": self.bleu_4,
            "rouge_l": self.rouge_l,
            "f1": self.f1,
            "support": self.support,
            "n_examples": self.n_examples,
        }


def score_change_summaries(pairs: Sequence[tuple[ChangeSummary, ChangeSummary]]) -> list[CategoryScore]:
    """Per-category BLEU-4 / ROUGE-L / token F1 over (predicted, reference) pairs.

    For each category only pairs with a non-empty reference list count; items
    are joined with newlines into one string per side and the scores are
    averaged over those pairs. Support is the number of reference items.
    """
    if not pairs:
        raise EmptyInput("no change-summary pairs to score")
    rows = []
    for index, (group, cat, _) in enumerate(pairs[0][1].categories()):
        bleus, rouges, f1s = [], [], []
        support = 0
        for pred, ref in pairs:
            ref_items = ref.categories()[index][2]
            if not ref_items:
                continue
            pred_items = pred.categories()[index][2]
            candidate, reference = "\n".join(pred_items), "\n".join(ref_items)
            support += len(ref_items)
            bleus.append(bleu_4(candidate, reference))
            rouges.append(rouge_l(candidate, reference))
            f1s.append(token_f1(candidate, reference)[2])
        if bleus:
            rows.append(CategoryScore(group, cat.value, fmean(bleus), fmean(rouges), fmean(f1s), support, len(bleus)))
        else:
            rows.append(CategoryScore(group, cat.value, None, None, None, 0, 0))
    return rows
