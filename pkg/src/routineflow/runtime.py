"""Execution loop: prompt assembly, model clients, tool dispatch and traces."""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Protocol, Sequence

import httpx

from .errors import ClientError, RoutineError, ToolError
from .memory import DEFAULT_THRESHOLD, VariableStore, compress_observation, render_variables_block
from .prompts import DEFAULT_ROLE_PREAMBLE, assemble_system_prompt, routines_body
from .routine import Cursor, Routine, Step, StepKind, advance, format_choices, pending_branch, start
from .tools import (
    Observation,
    ToolCall,
    ToolRegistry,
    ToolSpec,
    count_tool_call_spans,
    parse_tool_call,
    serialize_tools,
)

logger = logging.getLogger(__name__)

REFUSAL = "I'm sorry, I can't help with that."

FINISHED = "finished"
STEP_CAP_EXCEEDED = "step-cap-exceeded"
ABORTED = "aborted"


class ModelClient(Protocol):
    def complete(self, system_prompt: str, turns: Sequence[dict[str, str]]) -> str: ...


class ScriptedClient:
    """Replays a fixed list of assistant outputs, then refuses forever.

    A ``None`` entry simulates a transport failure for that call.
    """

    def __init__(self, script: Iterable[str | None], refusal: str = REFUSAL):
        self.script = list(script)
        self.refusal = refusal
        self.requests: list[tuple[str, list[dict[str, str]]]] = []
        self._pos = 0
        self._lock = threading.Lock()

    def complete(self, system_prompt: str, turns: Sequence[dict[str, str]]) -> str:
        with self._lock:
            self.requests.append((system_prompt, [dict(t) for t in turns]))
            if self._pos >= len(self.script):
                return self.refusal
            out = self.script[self._pos]
            self._pos += 1
        if out is None:
            raise ClientError("scripted transport failure", "transport-failure")
        return out


def scripted_client(script: Iterable[str]) -> ScriptedClient:
    return ScriptedClient(script)


class HttpChatClient:
    """Chat-completions style endpoint. The API key is read from the named
    environment variable at call time and never stored."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        credentials_env: str | None = None,
        timeout: float = 60.0,
        tool_role: str = "tool",
    ):
        self.endpoint = endpoint
        self.model = model
        self.credentials_env = credentials_env
        self.timeout = timeout
        self.tool_role = tool_role

    def _messages(self, system_prompt: str, turns: Sequence[dict[str, str]]) -> list[dict[str, str]]:
        msgs = [{"role": "system", "content": system_prompt}]
        for t in turns:
            role = self.tool_role if t["role"] == "tool" else t["role"]
            msgs.append({"role": role, "content": t["content"]})
        return msgs

    def complete(self, system_prompt: str, turns: Sequence[dict[str, str]]) -> str:
        headers = {"Content-Type": "application/json"}
        if self.credentials_env:
            key = os.environ.get(self.credentials_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        body = {"model": self.model, "messages": self._messages(system_prompt, turns)}
        try:
            resp = httpx.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
        except httpx.TimeoutException as exc:
            raise ClientError(f"request timed out after {self.timeout}s: {exc}", "timeout") from exc
        except httpx.HTTPError as exc:
            raise ClientError(f"transport failure: {exc}", "transport-failure") from exc
        if resp.status_code >= 400:
            raise ClientError(f"endpoint returned HTTP {resp.status_code}", "http-status")
        try:
            data = resp.json()
            if "choices" in data:
                return data["choices"][0]["message"]["content"] or ""
            return data["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ClientError(f"unexpected response body: {exc}", "bad-response") from exc


def http_chat_client(endpoint: str, credentials_env: str | None, model: str, timeout: float = 60.0) -> HttpChatClient:
    return HttpChatClient(endpoint, model, credentials_env, timeout)


# --------------------------------------------------------------------------
# prompt assembly


@dataclass
class SessionConfig:
    role_preamble: str = DEFAULT_ROLE_PREAMBLE
    system_params: dict[str, Any] = field(default_factory=dict)
    step_cap: int = 16
    parse_retries: int = 1
    variable_threshold: int = DEFAULT_THRESHOLD
    tool_order_seed: int | None = None
    exemplars: str | None = None
    # tools whose completed call ends the task even without a routine
    finish_tools: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.step_cap < 1:
            raise ValueError("step_cap must be >= 1")
        if self.parse_retries < 0:
            raise ValueError("parse_retries must be >= 0")
        self.finish_tools = frozenset(self.finish_tools)


def _specs(catalog: ToolRegistry | Iterable[ToolSpec]) -> list[ToolSpec]:
    return catalog.specs if isinstance(catalog, ToolRegistry) else list(catalog)


def build_system_prompt(
    cfg: SessionConfig,
    routines: Sequence[Routine],
    store: VariableStore,
    catalog: ToolRegistry | Iterable[ToolSpec],
    *,
    include_tools: bool = True,
    with_io: bool = False,
    with_tools: bool = True,
) -> str:
    """System prompt for one model call. An empty ``routines`` list omits the
    ``# Routine`` section; ``include_tools=False`` omits ``# Tools`` (dataset
    records carry the tool list in their own field)."""
    return assemble_system_prompt(
        role_preamble=cfg.role_preamble,
        system_params=cfg.system_params,
        routines_text=routines_body(routines, with_io, with_tools) if routines else None,
        variables_text=render_variables_block(store),
        tools_text=serialize_tools(_specs(catalog), cfg.tool_order_seed) if include_tools else None,
        exemplars=cfg.exemplars,
    )


# --------------------------------------------------------------------------
# traces


@dataclass
class TraceStep:
    system_prompt_snapshot: str
    assistant_output: str
    parsed_call: ToolCall
    observation: Observation
    step_id: str | None = None
    expected_tool: str | None = None

    @property
    def deviated(self) -> bool:
        return self.expected_tool is not None and self.expected_tool != self.parsed_call.name

    def to_dict(self) -> dict[str, Any]:
        return {
            "step_id": self.step_id,
            "expected_tool": self.expected_tool,
            "system_prompt_snapshot": self.system_prompt_snapshot,
            "assistant_output": self.assistant_output,
            "parsed_call": self.parsed_call.to_dict(),
            "observation": self.observation.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TraceStep:
        obs = d["observation"]
        return cls(
            system_prompt_snapshot=d["system_prompt_snapshot"],
            assistant_output=d["assistant_output"],
            parsed_call=ToolCall.from_dict(d["parsed_call"]),
            observation=Observation(obs.get("raw"), obs["presented"]),
            step_id=d.get("step_id"),
            expected_tool=d.get("expected_tool"),
        )


@dataclass
class Trace:
    query: str
    steps: list[TraceStep] = field(default_factory=list)
    status: str = ABORTED
    error: str | None = None
    routine_id: str | None = None
    branch_path: str = ""
    model_calls: int = 0

    @property
    def calls(self) -> list[ToolCall]:
        return [s.parsed_call for s in self.steps]

    @property
    def finished(self) -> bool:
        return self.status == FINISHED

    def to_dict(self) -> dict[str, Any]:
        return {
            "query": self.query,
            "status": self.status,
            "error": self.error,
            "routine_id": self.routine_id,
            "branch_path": self.branch_path,
            "model_calls": self.model_calls,
            "steps": [s.to_dict() for s in self.steps],
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=indent)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Trace:
        return cls(
            query=d["query"],
            steps=[TraceStep.from_dict(s) for s in d.get("steps", [])],
            status=d.get("status", ABORTED),
            error=d.get("error"),
            routine_id=d.get("routine_id"),
            branch_path=d.get("branch_path", ""),
            model_calls=d.get("model_calls", 0),
        )


# --------------------------------------------------------------------------
# the loop


def _entry_tools(r: Routine) -> set[str]:
    first = r.outline[0] if r.outline else None
    if first is None:
        return set()
    if first.step.kind is StepKind.BRANCH:
        return {g[0].tool for g in first.groups.values() if g}
    return {first.step.tool}


def _select_routine(routines: Sequence[Routine], tool: str) -> Routine:
    for r in routines:
        if tool in _entry_tools(r):
            return r
    return routines[0]


def infer_branch(r: Routine, branch_step: Step, tool: str) -> int:
    """Pick the branch whose first step uses ``tool``."""
    entry = next(e for e in r.outline if e.step.id == branch_step.id)
    matches = [no for no, group in entry.groups.items() if group and group[0].tool == tool]
    if len(matches) > 1:
        raise RoutineError(
            f"tool {tool!r} opens branches {matches} of step {branch_step.id}; cannot tell them apart",
            "ambiguous-branch",
        )
    if not matches:
        raise RoutineError(f"tool {tool!r} opens no branch of step {branch_step.id}", "invalid-branch-choice")
    return matches[0]


def _ask(client: ModelClient, prompt: str, turns: list[dict[str, str]], retries: int, trace: Trace) -> tuple[str, ToolCall | None, str]:
    output, error = "", ""
    for _ in range(retries + 1):
        trace.model_calls += 1
        try:
            output = client.complete(prompt, [dict(t) for t in turns])
        except ClientError as exc:
            error = f"{exc.code}: {exc}"
            continue
        try:
            call = parse_tool_call(output)
        except ToolError as exc:
            error = f"{exc.code}: {exc}"
            continue
        n = count_tool_call_spans(output)
        if n > 1:
            error = f"wrong-call-count: {n} tool calls in one reply"
            continue
        return output, call, ""
    return output, None, error


def run_task(
    query: str,
    routines: Sequence[Routine],
    client: ModelClient,
    catalog: ToolRegistry,
    cfg: SessionConfig | None = None,
) -> Trace:
    cfg = cfg or SessionConfig()
    routines = list(routines)
    store = VariableStore(cfg.variable_threshold)
    turns = [{"role": "user", "content": query}]
    trace = Trace(query)
    routine: Routine | None = None
    cursor: Cursor | None = None

    def stop(status: str, error: str | None = None) -> Trace:
        trace.status = status
        trace.error = error
        if cursor is not None:
            trace.branch_path = format_choices(cursor.chosen_branches)
        return trace

    for n in range(1, cfg.step_cap + 1):
        prompt = build_system_prompt(cfg, routines, store, catalog)
        output, call, error = _ask(client, prompt, turns, cfg.parse_retries, trace)
        if call is None:
            return stop(ABORTED, f"step {n}: {error}")

        expected: Step | None = None
        if routines and (cursor is None or not cursor.terminated):
            if routine is None:
                routine = _select_routine(routines, call.name)
                trace.routine_id = routine.routine_id
            try:
                branch = pending_branch(routine, cursor)
                choice = infer_branch(routine, branch, call.name) if branch is not None else None
                cursor = start(routine, choice) if cursor is None else advance(routine, cursor, choice)
            except RoutineError as exc:
                return stop(ABORTED, f"step {n}: {exc.code}: {exc}")
            if not cursor.terminated:
                expected = routine.step(cursor.position)

        try:
            raw = catalog.dispatch(call, store)
        except ToolError as exc:
            return stop(ABORTED, f"step {n}: {exc.code}: {exc}")
        presented = compress_observation(raw, store)
        trace.steps.append(
            TraceStep(
                system_prompt_snapshot=prompt,
                assistant_output=output,
                parsed_call=call,
                observation=Observation(raw, presented),
                step_id=str(expected.id) if expected else None,
                expected_tool=expected.tool if expected else None,
            )
        )
        turns.append({"role": "assistant", "content": output})
        turns.append({"role": "tool", "content": presented})
        if (expected is not None and expected.kind is StepKind.FINISH) or call.name in cfg.finish_tools:
            return stop(FINISHED)
    return stop(STEP_CAP_EXCEEDED, f"no finish step within {cfg.step_cap} rounds")


def replay_script(trace: Trace) -> list[str]:
    return [s.assistant_output for s in trace.steps]
