"""Radiology report toolkit: section segmentation, change summaries,
instruction datasets, lexical metrics and an endpoint evaluation harness."""

from radkit.changes import (
    CategoryScore,
    Profile,
    parse_change_summary_json,
    parse_rendered_change_summary,
    render_change_summary,
    score_change_summaries,
)
from radkit.domain import (
    ChangeSummary,
    ConditionChangeCategory,
    DeviceChangeCategory,
    InstructionExample,
    LabelSet,
    NliLabel,
    SectionedReport,
    SectionName,
    Split,
    TaskKind,
    canonicalize_label,
    parse_label_list,
)
from radkit.harness import EndpointConfig, EvalRecord, EvalReport, emit_report, run_eval, run_suite, stratify
from radkit.promptkit import build_dataset, build_instruction, load_template
from radkit.segmenter import HeaderRule, parse_rendered_sections, render_sections, segment_report
from radkit.textmetrics import MetricResult, bleu_4, bootstrap_ci, multilabel_macro_f1, nli_scores, rouge_l, token_f1

__version__ = "0.1.0"
