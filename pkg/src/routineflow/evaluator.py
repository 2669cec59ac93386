"""Hierarchical judging of single tool-call outputs, subset-denominator
metrics and generation of the routine test configurations."""

from __future__ import annotations

import json
import random
import threading
from collections import Counter, defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .errors import ClientError, EvaluationError, ToolError
from .memory import RoutineLibrary
from .prompts import replace_routines_block, routines_block, routines_body, strip_routine_section
from .routine import flatten_branches
from .runtime import REFUSAL
from .tools import ToolCall, ToolSpec, count_tool_call_spans, parse_tool_call, parse_tools

SUBCATEGORIES = (
    "missing-brackets/punctuation",
    "natural-language-output",
    "wrong-call-count",
    "nonexistent-tool",
    "wrong-tool",
    "wrong-param-value",
    "hallucinated-param",
    "missing-required-param",
    "wrong-param-type",
    "transport-failure",
)


@dataclass
class EvalSample:
    system_prompt: str
    history: list[dict[str, str]]
    tools: str
    ground_truth: ToolCall
    free_text_params: list[str] = field(default_factory=list)
    sample_id: str = ""
    routine_id: str | None = None
    branch_path: str = ""

    def catalog(self) -> dict[str, ToolSpec]:
        specs = parse_tools(self.tools)
        return {s.name: s for s in specs}

    def check(self) -> None:
        cat = self.catalog()
        spec = cat.get(self.ground_truth.name)
        if spec is None:
            raise EvaluationError(f"ground truth tool {self.ground_truth.name!r} not in catalog", "bad-sample")
        extra = set(self.free_text_params) - {p.name for p in spec.params}
        if extra:
            raise EvaluationError(f"free-text params {sorted(extra)} not parameters of {spec.name}", "bad-sample")

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "routine_id": self.routine_id,
            "branch_path": self.branch_path,
            "system_prompt": self.system_prompt,
            "history": self.history,
            "tools": self.tools,
            "ground_truth": self.ground_truth.to_dict(),
            "free_text_params": list(self.free_text_params),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EvalSample:
        return cls(
            system_prompt=d["system_prompt"],
            history=[dict(t) for t in d.get("history", [])],
            tools=d["tools"],
            ground_truth=ToolCall.from_dict(d["ground_truth"]),
            free_text_params=list(d.get("free_text_params", [])),
            sample_id=d.get("sample_id", ""),
            routine_id=d.get("routine_id"),
            branch_path=d.get("branch_path", ""),
        )


def load_samples(text: str) -> list[EvalSample]:
    data = json.loads(text)
    if not isinstance(data, list):
        raise EvaluationError("sample file must hold a JSON array", "bad-sample")
    return [EvalSample.from_dict(d) for d in data]


def dump_samples(samples: Iterable[EvalSample]) -> str:
    return json.dumps([s.to_dict() for s in samples], ensure_ascii=False, indent=2)


# --------------------------------------------------------------------------
# verdicts


@dataclass(frozen=True)
class Detail:
    subcategory: str
    message: str

    def to_dict(self) -> dict[str, str]:
        return {"subcategory": self.subcategory, "message": self.message}


@dataclass(frozen=True)
class StageResult:
    passed: bool
    details: tuple[Detail, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "details": [d.to_dict() for d in self.details]}

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> StageResult | None:
        if d is None:
            return None
        return cls(d["passed"], tuple(Detail(x["subcategory"], x["message"]) for x in d.get("details", [])))


def _fail(subcategory: str, message: str) -> StageResult:
    return StageResult(False, (Detail(subcategory, message),))


@dataclass(frozen=True)
class Verdict:
    """Stage results; ``tool`` and ``params`` are None when an earlier stage
    failed (not judged, as opposed to failed)."""

    structural: StageResult
    tool: StageResult | None = None
    params: StageResult | None = None
    notices: tuple[str, ...] = ()

    @property
    def overall(self) -> bool:
        return bool(self.structural.passed and self.tool and self.tool.passed and self.params and self.params.passed)

    @property
    def details(self) -> list[Detail]:
        out = list(self.structural.details)
        for stage in (self.tool, self.params):
            if stage is not None:
                out.extend(stage.details)
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "structural": self.structural.to_dict(),
            "tool": self.tool.to_dict() if self.tool else None,
            "params": self.params.to_dict() if self.params else None,
            "overall": self.overall,
            "notices": list(self.notices),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Verdict:
        return cls(
            StageResult.from_dict(d["structural"]),
            StageResult.from_dict(d.get("tool")),
            StageResult.from_dict(d.get("params")),
            tuple(d.get("notices", [])),
        )


def conforms(value: Any, type_tag: str) -> bool:
    if type_tag == "string":
        return isinstance(value, str)
    if type_tag == "boolean":
        return isinstance(value, bool)
    if isinstance(value, bool):
        return False
    if type_tag == "number":
        return isinstance(value, (int, float))
    if type_tag == "integer":
        return isinstance(value, int) or (isinstance(value, float) and value.is_integer())
    if type_tag == "array":
        return isinstance(value, list)
    if type_tag == "object":
        return isinstance(value, dict)
    return False


def same_value(a: Any, b: Any) -> bool:
    """Equality after canonicalization: 1 == 1.0, strings compared with outer
    whitespace trimmed, containers compared structurally."""
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return a == b
    if isinstance(a, str) and isinstance(b, str):
        return a.strip() == b.strip()
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(same_value(x, y) for x, y in zip(a, b))
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(same_value(a[k], b[k]) for k in a)
    return a == b


def _judge_params(call: ToolCall, truth: ToolCall, spec: ToolSpec, free_text: set[str]) -> tuple[StageResult, list[str]]:
    details: list[Detail] = []
    notices: list[str] = []
    declared = {p.name for p in spec.params}
    for name in call.arguments:
        if name not in declared:
            details.append(Detail("hallucinated-param", f"{name!r} is not a parameter of {spec.name}"))
    for p in spec.params:
        if p.required and p.name not in call.arguments:
            details.append(Detail("missing-required-param", f"required {p.name!r} is missing"))
    for p in spec.params:
        if p.name not in call.arguments:
            if not p.required and p.name in truth.arguments:
                details.append(Detail("wrong-param-value", f"optional {p.name!r} expected but absent"))
            continue
        value = call.arguments[p.name]
        if not conforms(value, p.type_tag):
            details.append(Detail("wrong-param-type", f"{p.name!r} should be {p.type_tag}, got {type(value).__name__}"))
            continue
        if p.name in free_text:
            if value == "":
                notices.append(f"free-text parameter {p.name!r} is empty")
            continue
        if p.name not in truth.arguments:
            details.append(Detail("wrong-param-value", f"{p.name!r} given but not expected"))
        elif not same_value(value, truth.arguments[p.name]):
            details.append(
                Detail("wrong-param-value", f"{p.name!r} = {value!r}, expected {truth.arguments[p.name]!r}")
            )
    return StageResult(not details, tuple(details)), notices


def judge(model_output: str, sample: EvalSample) -> Verdict:
    try:
        call = parse_tool_call(model_output)
    except ToolError as exc:
        sub = "natural-language-output" if exc.code == "no-tool-call-span" else "missing-brackets/punctuation"
        return Verdict(_fail(sub, str(exc)))
    structural = StageResult(True)

    spans = count_tool_call_spans(model_output)
    catalog = sample.catalog()
    if spans != 1:
        return Verdict(structural, _fail("wrong-call-count", f"{spans} tool calls, expected 1"))
    if call.name not in catalog:
        return Verdict(structural, _fail("nonexistent-tool", f"{call.name!r} is not in the tool list"))
    if call.name != sample.ground_truth.name:
        return Verdict(
            structural, _fail("wrong-tool", f"called {call.name!r}, expected {sample.ground_truth.name!r}")
        )
    params, notices = _judge_params(call, sample.ground_truth, catalog[call.name], set(sample.free_text_params))
    return Verdict(structural, StageResult(True), params, tuple(notices))


def transport_verdict(error: str) -> Verdict:
    return Verdict(_fail("transport-failure", error))


# --------------------------------------------------------------------------
# metrics


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass
class MetricsReport:
    n_total: int = 0
    structural_pass: int = 0
    tool_pass: int = 0
    param_pass: int = 0
    overall_pass: int = 0
    histogram: dict[str, int] = field(default_factory=dict)

    @property
    def structural_acc(self) -> float | None:
        return _ratio(self.structural_pass, self.n_total)

    @property
    def tool_acc(self) -> float | None:
        return _ratio(self.tool_pass, self.structural_pass)

    @property
    def param_acc(self) -> float | None:
        return _ratio(self.param_pass, self.tool_pass)

    @property
    def overall_acc(self) -> float | None:
        return _ratio(self.overall_pass, self.n_total)

    def accuracies(self) -> dict[str, float | None]:
        return {
            "structural": self.structural_acc,
            "tool": self.tool_acc,
            "params": self.param_acc,
            "overall": self.overall_acc,
        }

    def to_dict(self) -> dict[str, Any]:
        pct = {k: (None if v is None else round(100 * v, 1)) for k, v in self.accuracies().items()}
        return {
            "n_total": self.n_total,
            "counts": {
                "structural_pass": self.structural_pass,
                "tool_pass": self.tool_pass,
                "param_pass": self.param_pass,
                "overall_pass": self.overall_pass,
            },
            "accuracy_pct": {k: ("n/a" if v is None else v) for k, v in pct.items()},
            "errors": dict(sorted(self.histogram.items())),
        }

    def table(self) -> str:
        rows = [("metric", "accuracy", "numerator/denominator")]
        fracs = {
            "structural": (self.structural_pass, self.n_total),
            "tool": (self.tool_pass, self.structural_pass),
            "params": (self.param_pass, self.tool_pass),
            "overall": (self.overall_pass, self.n_total),
        }
        for name, value in self.accuracies().items():
            num, den = fracs[name]
            rows.append((name, "n/a" if value is None else f"{100 * value:.1f}%", f"{num}/{den}"))
        width = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, width)).rstrip() for r in rows]
        if self.histogram:
            lines.append("")
            lines.append("errors:")
            for sub, count in sorted(self.histogram.items()):
                lines.append(f"  {sub}: {count}")
        return "\n".join(lines)


def aggregate(verdicts: Iterable[Verdict]) -> MetricsReport:
    report = MetricsReport()
    hist: Counter = Counter()
    for v in verdicts:
        report.n_total += 1
        if v.structural.passed:
            report.structural_pass += 1
            if v.tool is not None and v.tool.passed:
                report.tool_pass += 1
                if v.params is not None and v.params.passed:
                    report.param_pass += 1
        if v.overall:
            report.overall_pass += 1
        hist.update(d.subcategory for d in v.details)
    report.histogram = dict(hist)
    return report


# --------------------------------------------------------------------------
# scenario variants

_VARIANT_KINDS = ("no_routine", "routine_linear", "routine_branching", "routine_with_io", "routine_without_tools", "multi_routine")
_ALIASES = {
    "no-routine": "no_routine",
    "linear": "routine_linear",
    "branching": "routine_branching",
    "with-io": "routine_with_io",
    "without-tools": "routine_without_tools",
    "multi": "multi_routine",
}


@dataclass(frozen=True)
class ScenarioVariant:
    kind: str
    k: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in _VARIANT_KINDS:
            raise EvaluationError(f"unknown variant {self.kind!r}", "bad-variant")
        if (self.kind == "multi_routine") != (self.k is not None):
            raise EvaluationError("only multi_routine takes k", "bad-variant")
        if self.k is not None and self.k < 2:
            raise EvaluationError("multi_routine needs k >= 2", "bad-variant")

    @classmethod
    def parse(cls, text: str) -> ScenarioVariant:
        name, _, k = text.partition(":")
        kind = _ALIASES.get(name, name)
        if kind == "multi_routine":
            if not k.isdigit():
                raise EvaluationError("multi variant needs a count, e.g. multi:3", "bad-variant")
            return cls(kind, int(k))
        if k:
            raise EvaluationError(f"variant {name!r} takes no count", "bad-variant")
        return cls(kind)

    def __str__(self) -> str:
        return f"multi:{self.k}" if self.k is not None else next(a for a, v in _ALIASES.items() if v == self.kind)


def make_variant(base: EvalSample, library: RoutineLibrary, variant: ScenarioVariant, seed: int = 0) -> EvalSample:
    """Rewrite only the routine section of ``base.system_prompt``."""
    if variant.kind == "no_routine":
        prompt = strip_routine_section(base.system_prompt)
        return _with_prompt(base, prompt)
    if routines_block(base.system_prompt) is None:
        raise EvaluationError("base sample has no <routines> block to rewrite", "bad-sample")
    if base.routine_id is None:
        raise EvaluationError("base sample does not record its applicable routine", "bad-sample")
    applicable = library.get(base.routine_id)
    if variant.kind == "routine_linear":
        flat = flatten_branches(applicable)
        wanted = f"{applicable.routine_id}/{base.branch_path}" if base.branch_path else applicable.routine_id
        match = [r for r in flat if r.routine_id == wanted]
        if not match:
            raise EvaluationError(f"no linear path {wanted!r} in routine {applicable.routine_id!r}", "bad-sample")
        body = routines_body(match)
    elif variant.kind == "routine_branching":
        body = routines_body([applicable])
    elif variant.kind == "routine_with_io":
        body = routines_body([applicable], with_io=True)
    elif variant.kind == "routine_without_tools":
        body = routines_body([applicable], with_tools=False)
    else:
        prefix = applicable.routine_id + "/"
        others = [r for r in library if r.routine_id != applicable.routine_id and not r.routine_id.startswith(prefix)]
        if len(others) < variant.k - 1:
            raise EvaluationError(
                f"library has {len(others)} distractors, multi:{variant.k} needs {variant.k - 1}",
                "insufficient-distractors",
            )
        rng = random.Random(seed)
        chosen = rng.sample(others, variant.k - 1) + [applicable]
        rng.shuffle(chosen)
        body = routines_body(chosen)
    return _with_prompt(base, replace_routines_block(base.system_prompt, body))


def _with_prompt(base: EvalSample, prompt: str) -> EvalSample:
    return EvalSample(
        system_prompt=prompt,
        history=[dict(t) for t in base.history],
        tools=base.tools,
        ground_truth=base.ground_truth,
        free_text_params=list(base.free_text_params),
        sample_id=base.sample_id,
        routine_id=base.routine_id,
        branch_path=base.branch_path,
    )


# --------------------------------------------------------------------------
# running


def evaluate_run(samples: Sequence[EvalSample], client, jobs: int = 1) -> tuple[MetricsReport, list[dict[str, Any]]]:
    """One model call per sample, judged and aggregated. The verdict log is
    ordered by sample index whatever order the calls finish in."""

    def one(i: int) -> dict[str, Any]:
        s = samples[i]
        try:
            output = client.complete(s.system_prompt, [dict(t) for t in s.history])
        except ClientError as exc:
            verdict, output = transport_verdict(f"{exc.code}: {exc}"), None
        else:
            verdict = judge(output, s)
        return {"index": i, "sample_id": s.sample_id, "output": output, "verdict": verdict.to_dict()}

    if jobs <= 1:
        log = [one(i) for i in range(len(samples))]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            log = list(pool.map(one, range(len(samples))))
    return aggregate(Verdict.from_dict(e["verdict"]) for e in log), log


class SampleScriptClient:
    """Answers each sample's request with the scripted output at that sample's
    index, so parallel runs stay deterministic. ``None`` entries simulate a
    transport failure; requests without a scripted output get a refusal."""

    def __init__(self, samples: Sequence[EvalSample], outputs: Sequence[str | None], refusal: str = REFUSAL):
        self.refusal = refusal
        self._queues: dict[tuple[str, str], deque] = defaultdict(deque)
        self._lock = threading.Lock()
        for s, out in zip(samples, outputs):
            self._queues[self._key(s.system_prompt, s.history)].append(out)

    @staticmethod
    def _key(system_prompt: str, turns: Sequence[dict[str, str]]) -> tuple[str, str]:
        return system_prompt, json.dumps(list(turns), sort_keys=True, ensure_ascii=False)

    def complete(self, system_prompt: str, turns: Sequence[dict[str, str]]) -> str:
        with self._lock:
            queue = self._queues.get(self._key(system_prompt, turns))
            if not queue:
                return self.refusal
            out = queue.popleft()
        if out is None:
            raise ClientError("scripted transport failure", "transport-failure")
        return out


def report_from_log(log: Iterable[dict[str, Any]]) -> MetricsReport:
    return aggregate(Verdict.from_dict(e["verdict"]) for e in log)
