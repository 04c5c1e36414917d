import asyncio
import json
import random
import sys

import httpx
import pytest
from hypothesis import given, settings

from mock_endpoint import MockEndpoint
from radkit.changes import render_change_summary
from radkit.domain import ChangeSummary, ConditionChangeCategory, InstructionExample, SectionedReport, SectionName, TaskKind
from radkit.errors import ConfigError, TooManyFailures, UnknownStratum
from radkit.harness import (
    EndpointConfig,
    EvalRecord,
    EvalReport,
    MetricConfig,
    collect_predictions,
    emit_report,
    extract_path,
    parse_report_json,
    run_eval,
    run_suite,
    stratify,
)
from radkit.segmenter import render_sections
from radkit.textmetrics import MetricResult, nli_scores
from radkit.domain import NliLabel
from strategies import eval_reports

FAST = dict(backoff_base=0.001, max_retries=2)


def _chat(text: str) -> httpx.Response:
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


def _transport(answer):
    """MockTransport answering from the prompt; ``answer`` may return a Response or raise."""

    def handler(request: httpx.Request) -> httpx.Response:
        prompt = json.loads(request.content)["messages"][0]["content"]
        out = answer(prompt)
        return out if isinstance(out, httpx.Response) else _chat(out)

    return httpx.MockTransport(handler)


def _dataset(task=TaskKind.IMPRESSION_PREDICTION, n=6, refs=None, strata=None):
    refs = refs or [f"no acute process number {i}" for i in range(n)]
    return [
        InstructionExample(f"ex{i:03d}", task, f"prompt {i}", refs[i], "test", (strata or (lambda i: {}))(i))
        for i in range(len(refs))
    ]


def _echo(dataset):
    by_prompt = {e.prompt: e.reference for e in dataset}
    return _transport(lambda p: by_prompt[p])


ENDPOINT = EndpointConfig("http://mock.invalid/v1/chat/completions", **FAST)


class TestEndpointConfig:
    def test_defaults(self):
        cfg = EndpointConfig("http://x")
        assert cfg.request_template["temperature"] == 0
        assert cfg.request_template["max_tokens"] == 1024
        assert cfg.response_path == "choices.0.message.content"

    @pytest.mark.parametrize(
        "kwargs",
        [dict(max_parallel=0), dict(timeout=0), dict(max_retries=-1), dict(request_template={"prompt": "fixed"})],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            EndpointConfig("http://x", **kwargs)

    def test_from_dict_unknown_key(self):
        with pytest.raises(ConfigError):
            EndpointConfig.from_dict({"base_url": "http://x", "temprature": 0})

    def test_load(self, tmp_path):
        path = tmp_path / "e.json"
        path.write_text(json.dumps({"base_url": "http://x", "max_parallel": 3}))
        assert EndpointConfig.load(path).max_parallel == 3
        path.write_text("{")
        with pytest.raises(ConfigError):
            EndpointConfig.load(path)

    def test_fingerprint_tracks_request_shape(self):
        a = EndpointConfig("http://x")
        assert a.fingerprint() == EndpointConfig("http://x", max_parallel=9).fingerprint()
        assert a.fingerprint() != EndpointConfig("http://y").fingerprint()

    def test_missing_credential(self, monkeypatch):
        monkeypatch.delenv("RADKIT_TEST_TOKEN", raising=False)
        with pytest.raises(ConfigError):
            EndpointConfig("http://x", auth_env_var="RADKIT_TEST_TOKEN").headers()


def test_extract_path():
    data = {"choices": [{"message": {"content": "hi"}}], "text": "t"}
    assert extract_path(data, "choices.0.message.content") == "hi"
    assert extract_path(data, "text") == "t"
    with pytest.raises(KeyError):
        extract_path(data, "choices.0.missing")


class TestRequests:
    def test_body_and_auth(self, monkeypatch):
        monkeypatch.setenv("RADKIT_TEST_TOKEN", "s3cret")
        ds = _dataset(n=2)
        by_prompt = {e.prompt: e.reference for e in ds}
        with MockEndpoint(lambda p: by_prompt[p]) as srv:
            cfg = EndpointConfig(srv.url, auth_env_var="RADKIT_TEST_TOKEN", **FAST)
            run_eval(ds, cfg)
        assert srv.auth_headers == ["Bearer s3cret"] * 2
        body = srv.bodies[0]
        assert body["temperature"] == 0 and body["max_tokens"] == 1024
        assert body["messages"][0]["role"] == "user"

    def test_plain_completion_template(self):
        ds = _dataset(n=3)
        by_prompt = {e.prompt: e.reference for e in ds}

        def handler(request):
            body = json.loads(request.content)
            return httpx.Response(200, json={"output": {"text": by_prompt[body["input"]["prompt"]]}})

        cfg = EndpointConfig(
            "http://x", request_template={"input": {"prompt": "{PROMPT}"}}, response_path="output.text", **FAST
        )
        report = run_eval(ds, cfg, transport=httpx.MockTransport(handler))
        assert report.metric("RougeL").point == 100.0


class TestRetries:
    def test_transient_5xx_then_success(self):
        calls = {}

        def answer(prompt):
            calls[prompt] = calls.get(prompt, 0) + 1
            return httpx.Response(503) if calls[prompt] < 3 else "ok"

        records = asyncio.run(collect_predictions(_dataset(n=2), ENDPOINT, transport=_transport(answer)))
        assert [r.attempt_count for r in records] == [3, 3]
        assert all(r.prediction == "ok" for r in records)

    def test_retries_exhausted(self):
        records = asyncio.run(
            collect_predictions(_dataset(n=1), ENDPOINT, transport=_transport(lambda p: httpx.Response(500)))
        )
        assert records[0].failure == "HTTP 500"
        assert records[0].attempt_count == 3

    def test_4xx_is_permanent(self):
        records = asyncio.run(
            collect_predictions(_dataset(n=1), ENDPOINT, transport=_transport(lambda p: httpx.Response(404)))
        )
        assert records[0].failure == "HTTP 404" and records[0].attempt_count == 1

    def test_timeout_is_retried(self):
        calls = []

        def answer(prompt):
            calls.append(prompt)
            if len(calls) == 1:
                raise httpx.ReadTimeout("slow")
            return "fine"

        records = asyncio.run(collect_predictions(_dataset(n=1), ENDPOINT, transport=_transport(answer)))
        assert records[0].prediction == "fine" and records[0].attempt_count == 2

    def test_bad_response_path(self):
        transport = httpx.MockTransport(lambda r: httpx.Response(200, json={"unexpected": 1}))
        records = asyncio.run(collect_predictions(_dataset(n=1), ENDPOINT, transport=transport))
        assert "choices.0.message.content" in records[0].failure

    def test_unreachable_endpoint(self):
        cfg = EndpointConfig("http://127.0.0.1:9/", timeout=1, **FAST)
        records = asyncio.run(collect_predictions(_dataset(n=1), cfg))
        assert records[0].failure and records[0].attempt_count == 3


class TestRunEval:
    def test_echo_is_perfect(self):
        ds = _dataset()
        report = run_eval(ds, ENDPOINT, transport=_echo(ds))
        assert {m.name for m in report.metrics} == {"F1-Score", "Precision", "Recall", "BLEU-4", "RougeL"}
        assert all(m.point == 100.0 and m.n == 6 for m in report.metrics)

    def test_echo_labels_perfect(self):
        ds = _dataset(TaskKind.ABNORMALITY_LABELS, refs=["atelectasis, lung opacity", "ij line", "lung opacity"])
        report = run_eval(ds, ENDPOINT, transport=_echo(ds))
        assert report.metric("F1-Score").point == 100.0

    def test_empty_answers_score_zero(self):
        text = run_eval(_dataset(), ENDPOINT, transport=_transport(lambda p: ""))
        assert all(m.point == 0.0 for m in text.metrics)
        labels = run_eval(
            _dataset(TaskKind.TUBES_LINES_LABELS, refs=["ij line", "enteric tube"]),
            ENDPOINT,
            transport=_transport(lambda p: ""),
        )
        assert labels.metric("F1-Score").point == 0.0

    def test_nli_hand_confusion(self):
        refs = ["negated", "positive", "neutral"]
        preds = {"prompt 0": "negated", "prompt 1": "Negated.", "prompt 2": "neutral"}
        report = run_eval(_dataset(TaskKind.NLI, refs=refs), ENDPOINT, transport=_transport(preds.__getitem__))
        expected = nli_scores(
            [NliLabel.NEGATED, NliLabel.NEGATED, NliLabel.NEUTRAL],
            [NliLabel.NEGATED, NliLabel.POSITIVE, NliLabel.NEUTRAL],
        )
        assert report.metric("F1-Score").point == pytest.approx(100 * (0 + 2 / 3 + 1) / 3)
        assert (report.metric("F1-Score").point, report.metric("Precision").point, report.metric("Recall").point) == expected

    def test_mixed_tasks_rejected(self):
        ds = _dataset(n=2) + _dataset(TaskKind.NLI, refs=["negated"])[:1]
        ds[-1] = InstructionExample("nli", TaskKind.NLI, "p", "negated", "test")
        with pytest.raises(ValueError):
            run_eval(ds, ENDPOINT, dry_run=True)

    def test_dry_run_needs_no_network(self):
        report = run_eval(_dataset(), EndpointConfig("http://127.0.0.1:9/"), dry_run=True)
        assert all(r.prediction == r.reference and r.attempt_count == 0 for r in report.records)
        assert report.metric("BLEU-4").point == 100.0

    def test_failure_isolation(self):
        ds = _dataset(n=10)
        by_prompt = {e.prompt: e.reference for e in ds}
        good = run_eval(ds, ENDPOINT, transport=_echo(ds))
        bad = run_eval(
            ds, ENDPOINT, transport=_transport(lambda p: httpx.Response(500) if p == "prompt 4" else by_prompt[p])
        )
        assert len(bad.records) == 10
        assert [r for r in bad.records if r.failure] == [bad.records[4]]
        assert [r for i, r in enumerate(bad.records) if i != 4] == [r for i, r in enumerate(good.records) if i != 4]
        assert all(m.n == 9 for m in bad.metrics)

    def test_too_many_failures(self):
        ds = _dataset(n=4)
        failing = {"prompt 0", "prompt 1", "prompt 2"}
        with pytest.raises(TooManyFailures) as info:
            run_eval(ds, ENDPOINT, transport=_transport(lambda p: httpx.Response(500) if p in failing else "x"))
        assert (info.value.failed, info.value.total) == (3, 4)

    def test_exactly_half_failing_is_tolerated(self):
        ds = _dataset(n=4)
        report = run_eval(
            ds, ENDPOINT, transport=_transport(lambda p: httpx.Response(400) if p in {"prompt 0", "prompt 1"} else "x")
        )
        assert report.failures == 2

    def test_order_independence_and_sorting(self):
        ds = _dataset(n=12)
        answers = {e.prompt: ("no acute" if i % 2 else e.reference) for i, e in enumerate(ds)}
        first = run_eval(ds, ENDPOINT, transport=_transport(answers.__getitem__))
        shuffled = ds[:]
        random.Random(3).shuffle(shuffled)
        second = run_eval(shuffled, ENDPOINT, transport=_transport(answers.__getitem__))
        assert first.metrics == second.metrics
        assert [r.example_id for r in second.records] == sorted(e.id for e in ds)

    def test_deterministic_json(self):
        ds = _dataset(n=8)
        answers = {e.prompt: e.reference.split()[0] for e in ds}
        a = emit_report(run_eval(ds, ENDPOINT, transport=_transport(answers.__getitem__)))
        b = emit_report(run_eval(ds, ENDPOINT, transport=_transport(answers.__getitem__)))
        assert a == b

    def test_bounded_concurrency(self):
        state = {"now": 0, "peak": 0}

        async def handler(request):
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
            await asyncio.sleep(0.005)
            state["now"] -= 1
            return _chat("x")

        cfg = EndpointConfig("http://x", max_parallel=3, **FAST)
        asyncio.run(collect_predictions(_dataset(n=30), cfg, transport=httpx.MockTransport(handler)))
        assert state["peak"] == 3

    def test_progress_is_monotonic(self):
        seen = []
        asyncio.run(collect_predictions(_dataset(n=7), ENDPOINT, dry_run=True, progress=lambda d, t: seen.append((d, t))))
        assert seen == [(i, 7) for i in range(1, 8)]


class TestCache:
    def test_second_run_uses_cache(self, tmp_path):
        ds = _dataset(n=4)
        first = run_eval(ds, ENDPOINT, cache_dir=tmp_path, transport=_echo(ds))
        assert len(list(tmp_path.glob("*.json"))) == 4

        def explode(request):
            raise AssertionError("network used despite cache")

        second = run_eval(ds, ENDPOINT, cache_dir=tmp_path, transport=httpx.MockTransport(explode))
        assert second == first

    def test_changed_prompt_misses_cache(self, tmp_path):
        ds = _dataset(n=1)
        run_eval(ds, ENDPOINT, cache_dir=tmp_path, transport=_echo(ds))
        changed = [InstructionExample(ds[0].id, ds[0].task, "a new prompt", ds[0].reference, "test")]
        report = run_eval(changed, ENDPOINT, cache_dir=tmp_path, transport=_transport(lambda p: "fresh"))
        assert report.records[0].prediction == "fresh"

    def test_failures_are_not_cached(self, tmp_path):
        ds = _dataset(n=2)
        run_eval(ds, ENDPOINT, cache_dir=tmp_path, transport=_transport(lambda p: httpx.Response(404) if p == "prompt 0" else "x"))
        assert len(list(tmp_path.glob("*.json"))) == 1


class TestTaskScoring:
    def test_segmentation_tables(self):
        refs = [
            render_sections(SectionedReport({SectionName.FINDINGS: "lungs clear", SectionName.IMPRESSION: "normal"})),
            render_sections(SectionedReport({SectionName.FINDINGS: "small effusion"})),
        ]
        ds = _dataset(TaskKind.REPORT_SEGMENTATION, refs=refs)
        report = run_eval(ds, ENDPOINT, transport=_echo(ds))
        table = report.strata_tables["section"]
        assert set(table) == {"Findings", "Impression"}
        assert [m.n for m in table["Findings"]] == [2, 2, 2]
        assert all(m.point == 100.0 and m.ci_low is None for rows in table.values() for m in rows)

        garbage = run_eval(ds, ENDPOINT, transport=_transport(lambda p: "garbage"))
        assert all(m.point == 0.0 for m in garbage.metrics)

    def test_change_summary_tables(self):
        cs = ChangeSummary({ConditionChangeCategory.STABLE: ["Cardiomegaly"]})
        ds = _dataset(TaskKind.TEMPORAL_CHANGE_SUMMARY, refs=[render_change_summary(cs)])
        report = run_eval(ds, ENDPOINT, transport=_echo(ds))
        table = report.strata_tables["category"]
        assert len(table) == 11
        assert [m.point for m in table["conditions.Stable"]] == [100.0, 100.0, 100.0]
        assert table["devices.New"] == ()

    def test_external_metric_via_adapter(self, tmp_path):
        script = tmp_path / "adapter.py"
        script.write_text(
            "import json,sys\nr=json.loads(sys.stdin.readline())\n"
            "print(json.dumps({'scores':[100.0 if c==x else 0.0 for c,x in zip(r['candidates'],r['references'])]}))\n"
        )
        config = MetricConfig.from_dict(
            {"adapters": {"F1RadGraph": f"{sys.executable} {script}"}, "tasks": {"ImpressionPrediction": ["F1RadGraph"]}}
        )
        ds = _dataset(n=4)
        report = run_eval(ds, ENDPOINT, config, transport=_echo(ds))
        assert report.metric("F1RadGraph").point == 100.0

    def test_metric_config_needs_adapter(self):
        with pytest.raises(ConfigError):
            MetricConfig.from_dict({"tasks": {"ImpressionPrediction": ["AlignScore"]}})
        with pytest.raises(ConfigError):
            MetricConfig.from_dict({"tasks": {"ImpressionPrediction": ["BERTScore"]}, "adapters": {}})


class TestStratify:
    def test_single_value_equals_global(self):
        ds = _dataset(n=8, strata=lambda i: {"system": "chest"})
        answers = {e.prompt: ("no acute" if i % 3 else e.reference) for i, e in enumerate(ds)}
        report = run_eval(ds, ENDPOINT, transport=_transport(answers.__getitem__))
        assert stratify(report, "system") == {"chest": list(report.metrics)}

    def test_radiology_qa_system_table(self):
        systems = ["Chest", "Neuro", "Chest", "Hepatobiliary", "Neuro", "Chest"]
        ds = _dataset(TaskKind.RADIOLOGY_QA, refs=[f"answer {i}" for i in range(6)], strata=lambda i: {"system": systems[i]})
        report = run_eval(ds, ENDPOINT, transport=_echo(ds))
        table = report.strata_tables["system"]
        assert list(table) == ["Chest", "Hepatobiliary", "Neuro"]
        assert [table[s][0].n for s in table] == [3, 1, 2]

    def test_random_strata_counts(self):
        rng = random.Random(11)
        labels = [rng.choice("ABCD") for _ in range(100)]
        ds = _dataset(n=100, strata=lambda i: {"grp": labels[i]})
        report = run_eval(ds, ENDPOINT, dry_run=True)
        table = stratify(report, "grp")
        for value, rows in table.items():
            assert all(m.n == labels.count(value) for m in rows)
        assert sum(rows[0].n for rows in table.values()) == 100

    def test_unknown_key(self):
        report = run_eval(_dataset(n=2), ENDPOINT, dry_run=True)
        with pytest.raises(UnknownStratum):
            stratify(report, "system")

    def test_requested_stratum_is_added_to_report(self):
        ds = _dataset(n=4, strata=lambda i: {"site": "a" if i < 2 else "b"})
        report = run_eval(ds, ENDPOINT, dry_run=True, stratify_by=["site"])
        assert set(report.strata_tables["site"]) == {"a", "b"}


class TestEmit:
    def _report(self, metrics=(), tables=None):
        rec = EvalRecord("e1", TaskKind.IMPRESSION_PREDICTION, "p", "r", "r", latency_ms=12.5, attempt_count=1)
        return EvalReport(TaskKind.IMPRESSION_PREDICTION, [rec], list(metrics), tables or {})

    def test_markdown_cell(self):
        md = emit_report(self._report([MetricResult("RougeL", 66.66, 65.64, 67.48, 100)]), "markdown")
        assert "| RougeL | 66.66 [65.64, 67.48] | 100 |" in md

    def test_empty_metrics_header_only(self):
        md = emit_report(self._report(), "markdown")
        assert md == "# ImpressionPrediction\n\n| Metric | Score | n |\n|---|---|---|\n"
        csv_text = emit_report(self._report(), "csv")
        assert csv_text == "table,stratum,metric,point,ci_low,ci_high,n\n"
        assert parse_report_json(emit_report(self._report())).metrics == ()

    def test_markdown_strata_table(self):
        m = MetricResult("F1-Score", 50.0, 40.0, 60.0, 3)
        md = emit_report(self._report([m], {"system": {"Chest": [m]}}), "markdown")
        assert "## system" in md
        assert "| Chest | 50.00 [40.00, 60.00] | 3 |" in md

    def test_csv_rows(self):
        m = MetricResult("F1-Score", 50.0, 40.0, 60.0, 3)
        lines = emit_report(self._report([m], {"system": {"Chest": [m]}}), "csv").splitlines()
        assert lines[1] == "overall,,F1-Score,50.0,40.0,60.0,3"
        assert lines[2] == "system,Chest,F1-Score,50.0,40.0,60.0,3"

    def test_json_round_trip_and_timing(self):
        report = self._report([MetricResult("RougeL", 66.66, 65.64, 67.48, 100)])
        text = emit_report(report)
        assert "latency_ms" not in text
        assert parse_report_json(text) == report
        assert json.loads(emit_report(report, include_timing=True))["records"][0]["latency_ms"] == 12.5

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            emit_report(self._report(), "xml")

    @given(eval_reports())
    @settings(max_examples=50)
    def test_json_round_trip_property(self, report):
        assert parse_report_json(emit_report(report)) == report


def test_record_needs_prediction_or_failure():
    with pytest.raises(ValueError):
        EvalRecord("e", TaskKind.NLI, "p", "r")
    with pytest.raises(ValueError):
        EvalRecord("e", TaskKind.NLI, "p", "r", prediction="x", failure="y")


def test_run_suite_splits_by_task():
    ds = _dataset(n=3) + [InstructionExample("nli-1", TaskKind.NLI, "p nli", "negated", "test")]
    reports = run_suite(ds, ENDPOINT, dry_run=True)
    assert list(reports) == [TaskKind.IMPRESSION_PREDICTION, TaskKind.NLI]
    assert len(reports[TaskKind.IMPRESSION_PREDICTION].records) == 3
