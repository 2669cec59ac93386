from __future__ import annotations

import json
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routineflow.errors import EvaluationError
from routineflow.evaluator import (
    EvalSample,
    MetricsReport,
    SampleScriptClient,
    ScenarioVariant,
    Verdict,
    aggregate,
    dump_samples,
    evaluate_run,
    judge,
    load_samples,
    make_variant,
    report_from_log,
)
from routineflow.memory import RoutineLibrary
from routineflow.pipeline import decompose_trace
from routineflow.prompts import routines_block, strip_routine_section, tools_block
from routineflow.routine import parse_routines_block
from routineflow.tools import ToolCall, format_tool_call

from helpers import (
    JUDGE_CASES,
    call_text,
    judge_samples,
    library_leave_trace,
    library_routines,
    twenty_samples,
    verdict_fixture_9_6_6,
)


def _summary(v: Verdict):
    return (
        v.structural.passed,
        None if v.tool is None else v.tool.passed,
        None if v.params is None else v.params.passed,
        tuple(d.subcategory for d in v.details),
    )


@pytest.mark.parametrize("case_id,key,output,expected", JUDGE_CASES, ids=[c[0] for c in JUDGE_CASES])
def test_judge_cases(case_id, key, output, expected):
    assert _summary(judge(output, judge_samples()[key])) == expected


def test_judge_cases_cover_every_subcategory():
    covered = {sub for *_, exp in JUDGE_CASES for sub in exp[3]}
    assert covered == {
        "missing-brackets/punctuation",
        "natural-language-output",
        "wrong-call-count",
        "nonexistent-tool",
        "wrong-tool",
        "wrong-param-value",
        "hallucinated-param",
        "missing-required-param",
        "wrong-param-type",
    }


def test_empty_free_text_is_a_notice():
    v = judge(call_text("compare_texts", text1="", text2="x"), judge_samples()["compare"])
    assert v.overall
    assert v.notices == ("free-text parameter 'text1' is empty",)


def test_verdict_round_trip():
    for _, key, output, _ in JUDGE_CASES:
        v = judge(output, judge_samples()[key])
        assert Verdict.from_dict(json.loads(json.dumps(v.to_dict()))) == v


_outputs = st.one_of(
    st.sampled_from([c[2] for c in JUDGE_CASES]),
    st.text(max_size=60),
    st.builds(lambda n, a: format_tool_call(ToolCall(n, a)), st.sampled_from(["read_pdf", "compare_texts", "x"]), st.dictionaries(st.sampled_from(["file_path", "text1", "text2", "mode"]), st.one_of(st.text(max_size=10), st.integers()), max_size=3)),
)


@settings(max_examples=150, deadline=None)
@given(_outputs, st.sampled_from(["read", "compare"]))
def test_hierarchy_gating(output, key):
    v = judge(output, judge_samples()[key])
    if not v.structural.passed:
        assert v.tool is None and v.params is None
    if v.tool is not None and not v.tool.passed:
        assert v.params is None
    assert v.overall == (v.structural.passed and bool(v.tool and v.tool.passed) and bool(v.params and v.params.passed))


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=80), st.text(max_size=80))
def test_free_text_insensitivity(t1, t2):
    sample = judge_samples()["compare"]
    assert judge(call_text("compare_texts", text1=t1, text2=t2), sample).overall


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([c[2] for c in JUDGE_CASES]), st.sampled_from(["read", "compare", "balance"])), max_size=25))
def test_denominator_law(pairs):
    samples = judge_samples()
    report = aggregate(judge(out, samples[k]) for out, k in pairs)
    assert report.tool_pass <= report.structural_pass
    assert report.param_pass <= report.tool_pass
    assert report.overall_pass == report.param_pass


# ---------------------------------------------------------------- aggregate


def test_aggregate_9_6_6():
    report = aggregate(verdict_fixture_9_6_6())
    assert (report.structural_pass, report.tool_pass, report.param_pass) == (9, 6, 6)
    assert report.to_dict()["accuracy_pct"] == {"structural": 90.0, "tool": 66.7, "params": 100.0, "overall": 60.0}
    assert report.histogram == {"wrong-tool": 2, "nonexistent-tool": 1, "natural-language-output": 1}


def test_aggregate_all_pass_and_all_fail():
    samples = judge_samples()
    good = [judge(c[2], samples["read"]) for c in JUDGE_CASES[:1]] * 4
    assert aggregate(good).to_dict()["accuracy_pct"] == {"structural": 100.0, "tool": 100.0, "params": 100.0, "overall": 100.0}
    bad = [judge("no call", samples["read"])] * 4
    assert aggregate(bad).to_dict()["accuracy_pct"] == {"structural": 0.0, "tool": "n/a", "params": "n/a", "overall": 0.0}
    assert "n/a" in aggregate(bad).table()


def test_aggregate_empty():
    report = aggregate([])
    assert report.accuracies() == {"structural": None, "tool": None, "params": None, "overall": None}
    assert isinstance(report, MetricsReport)


def test_report_from_log_matches():
    verdicts = verdict_fixture_9_6_6()
    log = [{"index": i, "sample_id": str(i), "output": "", "verdict": v.to_dict()} for i, v in enumerate(verdicts)]
    assert report_from_log(json.loads(json.dumps(log))) == aggregate(verdicts)


# ---------------------------------------------------------------- variants


def _base_sample(branch=2, index=2):
    trace = library_leave_trace(branch)
    return decompose_trace(trace)[index]


def _outside_routines(prompt: str) -> str:
    return re.sub(r"<routines>\n.*?</routines>", "<routines/>", prompt, flags=re.S)


def _unchanged_apart_from_prompt(a: EvalSample, b: EvalSample):
    assert a.history == b.history
    assert a.tools == b.tools
    assert a.ground_truth == b.ground_truth
    assert a.free_text_params == b.free_text_params
    assert tools_block(a.system_prompt) == tools_block(b.system_prompt)


def test_variant_parse():
    assert ScenarioVariant.parse("multi:3") == ScenarioVariant("multi_routine", 3)
    assert str(ScenarioVariant.parse("without-tools")) == "without-tools"
    for bad in ("multi", "linear:2", "bogus", "multi:1"):
        with pytest.raises(EvaluationError):
            ScenarioVariant.parse(bad)


def test_no_routine_variant():
    base = _base_sample()
    out = make_variant(base, RoutineLibrary(library_routines()), ScenarioVariant("no_routine"))
    assert "<routines>" not in out.system_prompt and "# Routine" not in out.system_prompt
    assert out.system_prompt == strip_routine_section(base.system_prompt)
    _unchanged_apart_from_prompt(base, out)


@pytest.mark.parametrize("kind", ["routine_linear", "routine_branching", "routine_with_io", "routine_without_tools"])
def test_single_routine_variants_touch_only_routine_block(kind):
    base = _base_sample()
    lib = RoutineLibrary(library_routines())
    out = make_variant(base, lib, ScenarioVariant(kind))
    assert _outside_routines(out.system_prompt) == _outside_routines(base.system_prompt)
    _unchanged_apart_from_prompt(base, out)
    block = routines_block(out.system_prompt)
    if kind == "routine_linear":
        assert "Branch" not in block
        assert "get_leave_policy" in block and "submit_leave_request" not in block
    if kind == "routine_branching":
        assert block == routines_block(base.system_prompt)
    if kind == "routine_without_tools":
        assert "Check balance" in block
        assert not any(t in block for t in lib.get("leave").tools)


def test_multi_routine_variant_seeded():
    base = _base_sample()
    lib = RoutineLibrary(library_routines())
    a = make_variant(base, lib, ScenarioVariant("multi_routine", 2), seed=11)
    assert make_variant(base, lib, ScenarioVariant("multi_routine", 2), seed=11).system_prompt == a.system_prompt
    titles = re.findall(r"^\[Routine\] ([^:]+):", routines_block(a.system_prompt), re.M)
    assert len(titles) == 2 and titles.count("Leave application") == 1
    _unchanged_apart_from_prompt(base, a)


@pytest.mark.parametrize("k", [2, 3, 5])
def test_multi_shuffle_soundness(k):
    base = _base_sample()
    lib = RoutineLibrary(library_routines())
    positions = set()
    for seed in range(100):
        block = routines_block(make_variant(base, lib, ScenarioVariant("multi_routine", k), seed).system_prompt)
        parsed = parse_routines_block(block)
        assert len(parsed) == k
        titles = [r.title for r in parsed]
        assert titles.count("Leave application") == 1
        positions.add(titles.index("Leave application"))
    assert len(positions) == k


def test_multi_insufficient_distractors():
    base = _base_sample()
    lib = RoutineLibrary(library_routines()[:3])
    with pytest.raises(EvaluationError) as err:
        make_variant(base, lib, ScenarioVariant("multi_routine", 5))
    assert err.value.code == "insufficient-distractors"


def test_samples_file_round_trip():
    samples = twenty_samples()
    assert load_samples(dump_samples(samples)) == samples


# ---------------------------------------------------------------- runs


def _truth_outputs(samples):
    return [format_tool_call(s.ground_truth) for s in samples]


def test_run_all_correct():
    samples = twenty_samples()
    report, log = evaluate_run(samples, SampleScriptClient(samples, _truth_outputs(samples)))
    assert report.overall_acc == 1.0
    assert [e["index"] for e in log] == list(range(20))


def test_run_three_wrong_tools():
    samples = twenty_samples()
    outputs = _truth_outputs(samples)
    for i in (0, 5, 10):
        outputs[i] = call_text("compare_texts", text1="a", text2="b")
    report, _ = evaluate_run(samples, SampleScriptClient(samples, outputs))
    assert report.to_dict()["accuracy_pct"]["tool"] == 85.0
    assert report.to_dict()["accuracy_pct"]["overall"] == 85.0


def test_run_transport_failure_logged():
    samples = twenty_samples()
    outputs: list = _truth_outputs(samples)
    outputs[7] = None
    report, log = evaluate_run(samples, SampleScriptClient(samples, outputs), jobs=4)
    assert report.to_dict()["accuracy_pct"]["structural"] == 95.0
    assert log[7]["output"] is None
    assert log[7]["verdict"]["structural"]["details"][0]["subcategory"] == "transport-failure"


def test_parallel_run_is_deterministic():
    samples = twenty_samples()
    outputs = _truth_outputs(samples)
    outputs[3] = "prose"
    _, serial = evaluate_run(samples, SampleScriptClient(samples, outputs), jobs=1)
    _, parallel = evaluate_run(samples, SampleScriptClient(samples, outputs), jobs=8)
    assert serial == parallel
