"""Split raw report text into sections, and render/parse the section-extraction format.

Raw reports are segmented with a table of :class:`HeaderRule` objects. A header
only counts when it starts a line (after optional indentation) and is followed
by a colon, so "impression" inside prose never opens a section.

The rendered format lists all eight sections in a fixed order::

    Clinical History:
        53 years of age, Female, postop.
    Technique:
        N/A
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from radkit.domain import SectionedReport, SectionName
from radkit.errors import ParseFailure

__all__ = [
    "HeaderRule",
    "DEFAULT_RULES",
    "RESIDUAL_HEADERS",
    "load_rules",
    "segment_report",
    "render_sections",
    "parse_rendered_sections",
]

INDENT = "    "
ABSENT = "N/A"


@dataclass(frozen=True)
class HeaderRule:
    section: SectionName
    header_patterns: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.header_patterns:
            raise ValueError(f"rule for {self.section.display} has no patterns")
        object.__setattr__(
            self, "header_patterns", tuple(p.strip().rstrip(":").strip() for p in self.header_patterns)
        )


DEFAULT_RULES: tuple[HeaderRule, ...] = (
    HeaderRule(SectionName.CLINICAL_HISTORY, ("CLINICAL HISTORY", "HISTORY", "INDICATION")),
    HeaderRule(SectionName.COMPARISON, ("COMPARISON",)),
    HeaderRule(SectionName.TECHNIQUE, ("TECHNIQUE",)),
    HeaderRule(SectionName.PROCEDURE_COMMENTS, ("PROCEDURE COMMENTS",)),
    HeaderRule(SectionName.FINDINGS, ("FINDINGS",)),
    HeaderRule(SectionName.IMPRESSION, ("IMPRESSION",)),
    HeaderRule(SectionName.END_OF_IMPRESSION, ("END OF IMPRESSION",)),
    HeaderRule(SectionName.SUMMARY, ("SUMMARY",)),
)

# Pseudo-headers close the running section; their text goes to the residual.
RESIDUAL_HEADERS: tuple[str, ...] = (
    "PREAMBLE",
    "NARRATIVE",
    "EXAMINATION",
    "LAST_PARAGRAPH",
    "ACCESSION NUMBER",
    "FINAL REPORT",
)


def load_rules(path: str | Path) -> tuple[HeaderRule, ...]:
    """Read a rule table from JSON: ``[{"section": ..., "patterns": [...]}, ...]``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ValueError("header rule file must hold a JSON array")
    rules = tuple(
        HeaderRule(SectionName.lookup(entry["section"]), tuple(entry["patterns"])) for entry in data
    )
    _check_rules(rules)
    return rules


def _check_rules(rules: Sequence[HeaderRule]) -> None:
    seen: dict[str, SectionName] = {}
    for rule in rules:
        for pattern in rule.header_patterns:
            key = pattern.lower()
            if key in seen and seen[key] is not rule.section:
                raise ValueError(f"header {pattern!r} is mapped to two sections")
            seen[key] = rule.section
    missing = set(SectionName) - {rule.section for rule in rules}
    if missing:
        raise ValueError(f"no header patterns for {sorted(m.display for m in missing)}")


def _header_regex(rules: Sequence[HeaderRule], residual_headers: Sequence[str]) -> re.Pattern[str]:
    names = [p for rule in rules for p in rule.header_patterns] + list(residual_headers)
    # longest first so "END OF IMPRESSION" wins over "IMPRESSION"
    names.sort(key=len, reverse=True)
    alternation = "|".join(re.escape(n).replace(r"\ ", r"[ \t]+") for n in names)
    return re.compile(rf"^[ \t]*(?P<name>{alternation})[ \t]*:", re.IGNORECASE | re.MULTILINE)


def segment_report(
    raw: str,
    rules: Sequence[HeaderRule] = DEFAULT_RULES,
    residual_headers: Sequence[str] = RESIDUAL_HEADERS,
    source_id: str = "",
) -> SectionedReport:
    """Assign every header-delimited span of ``raw`` to its section.

    Text before the first header and under pseudo-headers lands in ``residual``.
    A section whose header appears twice keeps both bodies, joined by a blank
    line. Empty bodies are dropped.
    """
    lookup = {p.lower(): rule.section for rule in rules for p in rule.header_patterns}
    pattern = _header_regex(rules, residual_headers)

    bodies: dict[SectionName, list[str]] = {}
    residual: list[str] = []
    matches = list(pattern.finditer(raw))
    start = matches[0].start() if matches else len(raw)
    if raw[:start].strip():
        residual.append(raw[:start].strip())

    for i, match in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(raw)
        name = " ".join(match.group("name").split()).lower()
        section = lookup.get(name)
        if section is None:
            chunk = raw[match.start():end].strip()
            if chunk:
                residual.append(chunk)
            continue
        body = raw[match.end():end].strip()
        if body:
            bodies.setdefault(section, []).append(body)

    sections = {name: "\n\n".join(parts) for name, parts in bodies.items()}
    return SectionedReport(sections, "\n\n".join(residual) or None, source_id)


def render_sections(report: SectionedReport) -> str:
    """Render all eight sections in canonical order; absent ones get ``N/A``."""
    lines: list[str] = []
    for name in SectionName:
        lines.append(f"{name.display}:")
        body = report.get(name)
        if body is None:
            lines.append(INDENT + ABSENT)
            continue
        lines.extend(INDENT + line if line else "" for line in body.split("\n"))
    return "\n".join(lines) + "\n"


_RENDERED_HEADER = re.compile(r"^(?P<name>[A-Za-z][A-Za-z _/()-]*?)[ \t]*:[ \t]*(?P<rest>.*)$")


def _rendered_section(name: str) -> SectionName | None:
    try:
        return SectionName.lookup(name)
    except KeyError:
        return None


def _dedent(line: str) -> str:
    return line[len(INDENT):] if line.startswith(INDENT) else line.lstrip(" \t")


def parse_rendered_sections(text: str, source_id: str = "") -> SectionedReport:
    """Inverse of :func:`render_sections`, tolerant of near-miss formatting.

    Section headers must start at column 0. Bodies of ``N/A`` mean absent.
    Column-0 lines that look like an unknown ``Header:`` open a block that
    goes to the residual. Other unindented lines continue the current body.
    """
    blocks: list[tuple[SectionName | None, list[str]]] = []
    recognized = False
    preamble: list[str] = []
    for line in text.split("\n"):
        match = _RENDERED_HEADER.match(line) if line[:1] not in (" ", "\t") else None
        if match:
            section = _rendered_section(match.group("name"))
            if section is not None:
                recognized = True
                blocks.append((section, [match.group("rest")] if match.group("rest") else []))
                continue
            if not match.group("rest") and blocks:
                blocks.append((None, [line]))
                continue
        target = blocks[-1][1] if blocks else preamble
        target.append(line if target is preamble or blocks[-1][0] is None else _dedent(line))
    if not recognized:
        raise ParseFailure("no recognizable section header", text)

    bodies: dict[SectionName, list[str]] = {}
    residual = ["\n".join(preamble).strip()]
    for section, lines in blocks:
        body = "\n".join(lines).strip()
        if section is None:
            residual.append(body)
        elif body and body.upper() != ABSENT:
            bodies.setdefault(section, []).append(body)
    sections = {name: "\n\n".join(parts) for name, parts in bodies.items()}
    residual_text = "\n\n".join(r for r in residual if r) or None
    return SectionedReport(sections, residual_text, source_id)

