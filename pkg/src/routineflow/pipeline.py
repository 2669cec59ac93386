"""Dataset machinery: routine optimization through a planner model, the
three-stage record filter, trace decomposition, query-template expansion,
routine-guided distillation and ShareGPT emission."""

from __future__ import annotations

import itertools
import json
import logging
import random
import re
import string
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from .errors import PipelineError, RoutineError
from .evaluator import EvalSample
from .memory import VariableStore
from .prompts import (
    GENERATION_TEMPLATE,
    PARAPHRASE_INSTRUCTION,
    REPAIR_TEMPLATE,
    fill,
    findings_text,
    replace_tools_block,
    routines_block,
    tools_block,
)
from .routine import Routine, execution_paths, parse_routine, parse_routines_block, validate
from .runtime import SessionConfig, Trace, TraceStep, build_system_prompt, run_task
from .tools import Observation, ToolCall, ToolRegistry, ToolSpec, serialize_tools

logger = logging.getLogger(__name__)

TURN_KINDS = ("human", "function_call", "observation")


@dataclass
class DatasetRecord:
    conversations: list[dict[str, str]]
    system: str
    tools: str

    def to_dict(self) -> dict[str, Any]:
        return {"conversations": self.conversations, "system": self.system, "tools": self.tools}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DatasetRecord:
        return cls([dict(t) for t in d["conversations"]], d.get("system", ""), d.get("tools", "[]"))

    def calls(self) -> list[ToolCall]:
        return [_call_from_value(t["value"]) for t in self.conversations if t["from"] == "function_call"]

    def check(self) -> None:
        """Raise PipelineError unless the record is human-first with
        alternating function_call/observation turns."""
        conv = self.conversations
        if not conv or conv[0]["from"] != "human":
            raise PipelineError("first turn must be human", "bad-record")
        for i, turn in enumerate(conv[1:]):
            want = "function_call" if i % 2 == 0 else "observation"
            if turn["from"] != want:
                raise PipelineError(f"turn {i + 1} is {turn['from']!r}, expected {want!r}", "bad-record")
            if want == "function_call":
                _call_from_value(turn["value"])


def _call_from_value(value: str) -> ToolCall:
    try:
        obj = json.loads(value)
    except json.JSONDecodeError as exc:
        raise PipelineError(f"function_call value is not JSON: {exc}", "bad-record") from None
    if not isinstance(obj, dict) or not isinstance(obj.get("name"), str) or not isinstance(obj.get("arguments"), dict):
        raise PipelineError("function_call value must be {name, arguments}", "bad-record")
    return ToolCall(obj["name"], obj["arguments"])


def read_jsonl(text: str) -> list[Any]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def write_jsonl(items: Iterable[Any]) -> str:
    return "".join(json.dumps(item, ensure_ascii=False) + "\n" for item in items)


# --------------------------------------------------------------------------
# routine generation


def build_generation_prompt(draft: str, catalog: ToolRegistry | Iterable[ToolSpec], language: str = "English") -> str:
    if not draft.strip():
        raise ValueError("routine draft is empty")
    specs = catalog.specs if isinstance(catalog, ToolRegistry) else list(catalog)
    return fill(GENERATION_TEMPLATE, routine_draft=draft, tool_list=serialize_tools(specs), language=language)


def _strip_fences(text: str) -> str:
    m = re.search(r"```(?:json)?\s*(.*?)```", text, re.S)
    return m.group(1) if m else text


class ExhaustedRepairs(PipelineError):
    code = "exhausted-repairs"

    def __init__(self, message: str, findings: list[str]):
        super().__init__(message)
        self.findings = findings


def optimize_routine(
    draft: str,
    catalog: ToolRegistry | Sequence[ToolSpec],
    planner,
    max_repairs: int = 2,
    *,
    routine_id: str = "",
    title: str = "",
    language: str = "English",
) -> Routine:
    """Turn a rough process draft into a validated routine. Failed attempts
    are sent back to the planner with the list of problems."""
    specs = catalog.specs if isinstance(catalog, ToolRegistry) else list(catalog)
    turns = [{"role": "user", "content": build_generation_prompt(draft, specs, language)}]
    findings: list[str] = []
    for attempt in range(max_repairs + 1):
        reply = planner.complete("", list(turns))
        try:
            routine = parse_routine(_strip_fences(reply), routine_id, title, draft)
        except RoutineError as exc:
            findings = [f"{exc.code}: {exc}"]
        else:
            report = validate(routine, specs)
            if report.ok:
                logger.info("routine accepted after %d repair(s)", attempt)
                return routine
            findings = [str(f) for f in report.findings]
        turns.append({"role": "assistant", "content": reply})
        turns.append({"role": "user", "content": fill(REPAIR_TEMPLATE, findings=findings_text(findings))})
    raise ExhaustedRepairs(f"no valid routine after {max_repairs + 1} attempts", findings)


def trajectory_draft(record: DatasetRecord) -> str:
    """Process information for routine generation from an existing tool-call
    trajectory: the user task followed by the numbered call sequence."""
    lines = [f"Task: {record.conversations[0]['value']}" if record.conversations else "Task:"]
    for n, call in enumerate(record.calls(), start=1):
        args = ", ".join(call.arguments) or "no arguments"
        lines.append(f"{n}. call {call.name} ({args})")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# filtering


@dataclass
class FilterReport:
    input_count: int = 0
    text_verification_dropped: int = 0
    summary_removal_modified: int = 0
    length_structure_dropped: int = 0
    output_count: int = 0

    def counts(self) -> tuple[int, int, int]:
        return (self.text_verification_dropped, self.summary_removal_modified, self.length_structure_dropped)

    def to_dict(self) -> dict[str, int]:
        return {
            "input_count": self.input_count,
            "text_verification_dropped": self.text_verification_dropped,
            "summary_removal_modified": self.summary_removal_modified,
            "length_structure_dropped": self.length_structure_dropped,
            "output_count": self.output_count,
        }


def routine_text_ok(system: str) -> bool:
    block = routines_block(system)
    if block is None or not block.strip():
        return False
    try:
        return bool(parse_routine(block).steps)
    except RoutineError:
        pass
    try:
        routines = parse_routines_block(block)
    except RoutineError:
        return False
    return bool(routines) and all(r.steps for r in routines)


def _flat_call(value: str) -> bool:
    try:
        call = _call_from_value(value)
    except PipelineError:
        return False
    return not any(isinstance(v, (list, dict)) for v in call.arguments.values())


def filter_dataset(records: Iterable[DatasetRecord], step_cap: int = 8) -> tuple[list[DatasetRecord], FilterReport]:
    report = FilterReport()
    out = []
    for rec in records:
        report.input_count += 1
        if not routine_text_ok(rec.system):
            report.text_verification_dropped += 1
            continue
        kept = [t for t in rec.conversations if t.get("from") in TURN_KINDS]
        if len(kept) != len(rec.conversations):
            report.summary_removal_modified += 1
            rec = replace(rec, conversations=kept)
        calls = [t["value"] for t in kept if t["from"] == "function_call"]
        if len(calls) > step_cap or not all(_flat_call(v) for v in calls):
            report.length_structure_dropped += 1
            continue
        out.append(rec)
    report.output_count = len(out)
    return out, report


# --------------------------------------------------------------------------
# decomposition


def decompose_trace(
    trace: Trace,
    order_seed: int | None = None,
    free_text: Mapping[str, Iterable[str]] | None = None,
    trace_id: str = "",
) -> list[EvalSample]:
    """One eval sample per tool call. Each sample keeps the prompt snapshot
    of its step, with the tool list reshuffled per sample when a seed is given."""
    if not trace.finished:
        raise PipelineError(f"trace status is {trace.status!r}, not finished", "unfinished-trace")
    free_text = free_text or {}
    history = [{"role": "user", "content": trace.query}]
    samples = []
    for i, step in enumerate(trace.steps):
        listed = tools_block(step.system_prompt_snapshot)
        if listed is None:
            raise PipelineError(f"step {i + 1} snapshot has no <tools> block", "bad-trace")
        sigs = json.loads(listed)
        if order_seed is not None:
            random.Random(f"{order_seed}:{i}").shuffle(sigs)
        tools_text = json.dumps(sigs, ensure_ascii=False)
        call = step.parsed_call
        samples.append(
            EvalSample(
                system_prompt=replace_tools_block(step.system_prompt_snapshot, tools_text),
                history=[dict(t) for t in history],
                tools=tools_text,
                ground_truth=ToolCall(call.name, dict(call.arguments)),
                free_text_params=sorted(free_text.get(call.name, ())),
                sample_id=f"{trace_id}:{i + 1}" if trace_id else str(i + 1),
                routine_id=trace.routine_id,
                branch_path=trace.branch_path,
            )
        )
        history.append({"role": "assistant", "content": step.assistant_output})
        history.append({"role": "tool", "content": step.observation.presented})
    return samples


# --------------------------------------------------------------------------
# queries


def template_fields(template: str) -> list[str]:
    names: list[str] = []
    for _, name, _, _ in string.Formatter().parse(template):
        if name is None:
            continue
        if not name.isidentifier():
            raise PipelineError(f"template {template!r}: placeholder {{{name}}} must be a name", "unknown-placeholder")
        if name not in names:
            names.append(name)
    return names


def expand_query_templates(templates: Sequence[str], entities: Mapping[str, Sequence[Any]]) -> list[str]:
    """Cartesian expansion of each template over its placeholders' value
    lists, in template order, duplicates dropped."""
    seen: dict[str, None] = {}
    for t in templates:
        names = template_fields(t)
        missing = [n for n in names if n not in entities]
        if missing:
            raise PipelineError(f"template {t!r}: no entity column for {missing}", "unknown-placeholder")
        for combo in itertools.product(*(entities[n] for n in names)):
            seen.setdefault(t.format(**dict(zip(names, combo))), None)
    return list(seen)


def paraphrase_queries(queries: Sequence[str], client, per_query: int = 1) -> list[str]:
    """Ask a model for reworded variants; originals come first, duplicates dropped."""
    seen: dict[str, None] = dict.fromkeys(queries)
    for q in queries:
        for _ in range(per_query):
            reply = client.complete("", [{"role": "user", "content": fill(PARAPHRASE_INSTRUCTION, query=q)}]).strip()
            if reply:
                seen.setdefault(reply, None)
    return list(seen)


# --------------------------------------------------------------------------
# distillation


@dataclass
class DistillResult:
    kept: list[Trace] = field(default_factory=list)
    rejected: list[dict[str, Any]] = field(default_factory=list)

    @property
    def n_calls(self) -> int:
        return sum(len(t.steps) for t in self.kept)


def path_tools(routine: Routine, branch_path: str) -> list[str] | None:
    for path in execution_paths(routine):
        if path.label == branch_path and path.finished:
            return [s.tool for s in path.steps]
    return None


def check_trace_against_routine(trace: Trace, routine: Routine) -> tuple[int, str] | None:
    """First failing step (1-based) and reason, or None when the trace
    follows the routine exactly."""
    if not trace.finished:
        return len(trace.steps) + 1, f"{trace.status}: {trace.error}"
    expected = path_tools(routine, trace.branch_path)
    if expected is None:
        return 1, f"branch path {trace.branch_path!r} is not a path of the routine"
    actual = [c.name for c in trace.calls]
    for i, (want, got) in enumerate(zip(expected, actual), start=1):
        if want != got:
            return i, f"called {got!r}, routine expects {want!r}"
    if len(expected) != len(actual):
        return min(len(expected), len(actual)) + 1, f"{len(actual)} calls, routine path has {len(expected)}"
    return None


def distill(
    queries: Sequence[str],
    routine: Routine,
    teacher,
    catalog: ToolRegistry,
    cfg: SessionConfig | None = None,
) -> DistillResult:
    report = validate(routine, catalog.specs)
    if not report.ok:
        raise PipelineError(f"routine is not executable: {'; '.join(map(str, report.findings))}", "invalid-routine")
    result = DistillResult()
    for q in queries:
        trace = run_task(q, [routine], teacher, catalog, cfg)
        failure = check_trace_against_routine(trace, routine)
        if failure is None:
            result.kept.append(trace)
        else:
            step, reason = failure
            logger.info("rejected %r at step %d: %s", q, step, reason)
            result.rejected.append({"query": q, "step": step, "reason": reason})
    return result


# --------------------------------------------------------------------------
# ShareGPT


def emit_sharegpt(
    trace: Trace,
    routine: Routine,
    catalog: ToolRegistry | Sequence[ToolSpec],
    cfg: SessionConfig | None = None,
    *,
    include_final_observation: bool = False,
) -> DatasetRecord:
    """Training record for a finished trace. The record ends on the final
    function_call unless ``include_final_observation`` is set, since the
    finishing tool's output goes straight to the user."""
    if not trace.finished:
        raise PipelineError(f"trace status is {trace.status!r}, not finished", "unfinished-trace")
    cfg = cfg or SessionConfig()
    specs = catalog.specs if isinstance(catalog, ToolRegistry) else list(catalog)
    system = build_system_prompt(cfg, [routine], VariableStore(cfg.variable_threshold), specs, include_tools=False)
    conv = [{"from": "human", "value": trace.query}]
    for i, step in enumerate(trace.steps):
        conv.append({"from": "function_call", "value": step.parsed_call.to_json()})
        if i < len(trace.steps) - 1 or include_final_observation:
            conv.append({"from": "observation", "value": step.observation.presented})
    return DatasetRecord(conv, system, serialize_tools(specs, cfg.tool_order_seed))


def record_to_trace(record: DatasetRecord) -> Trace:
    """Rebuild calls and presented observations from a record. Prompt
    snapshots and raw observations are not recoverable."""
    record.check()
    conv = record.conversations
    steps = []
    for i in range(1, len(conv), 2):
        call = _call_from_value(conv[i]["value"])
        presented = conv[i + 1]["value"] if i + 1 < len(conv) else ""
        steps.append(TraceStep(record.system, call.to_json(), call, Observation(None, presented)))
    return Trace(conv[0]["value"], steps, status="finished")
