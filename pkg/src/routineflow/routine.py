"""Routine data model: step ids, steps, parsing, rendering, validation,
branch flattening and the execution cursor.

A routine is a flat, ordered list of steps. Main steps carry ids ``"1"``,
``"2"``...; a ``branch`` step is a decision point whose alternatives follow
it as runs of ``branchnode`` steps with ids ``"<parent>-<branch>_<index>"``.
Branch groups are never nested.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Any, Iterable, Iterator

from .errors import RoutineError

_ID_RE = re.compile(r"^([1-9]\d*)(?:-([1-9]\d*)_([1-9]\d*))?$")

# tool values the generation prompt explicitly forbids
FORBIDDEN_TOOLS = frozenset({"no tool needed", "no tool used", "none"})


class InvariantViolation(RoutineError):
    code = "invariant-violation"

    def __init__(self, invariant: str, message: str):
        super().__init__(f"{invariant}: {message}")
        self.invariant = invariant


@dataclass(frozen=True, order=True)
class StepId:
    main: int
    branch: int | None = None
    index: int | None = None

    def __post_init__(self) -> None:
        if (self.branch is None) != (self.index is None):
            raise RoutineError("branch ids need both branch and index", "malformed-id")
        for part in (self.main, self.branch, self.index):
            if part is not None and (not isinstance(part, int) or part < 1):
                raise RoutineError(f"step id components must be >= 1, got {part!r}", "malformed-id")

    @property
    def is_branch(self) -> bool:
        return self.branch is not None

    def __str__(self) -> str:
        if self.branch is None:
            return str(self.main)
        return f"{self.main}-{self.branch}_{self.index}"


def parse_step_id(text: str) -> StepId:
    m = _ID_RE.match(text.strip()) if isinstance(text, str) else None
    if m is None:
        raise RoutineError(f"malformed step id {text!r}", "malformed-id")
    main, branch, index = m.groups()
    if branch is None:
        return StepId(int(main))
    return StepId(int(main), int(branch), int(index))


class StepKind(str, Enum):
    NODE = "node"
    BRANCH = "branch"
    BRANCHNODE = "branchnode"
    FINISH = "finish"


@dataclass(frozen=True)
class Step:
    id: StepId
    name: str
    description: str = ""
    kind: StepKind = StepKind.NODE
    tool: str | None = None
    input_desc: str | None = None
    output_desc: str | None = None

    @property
    def condition(self) -> str | None:
        """Entry condition of the first step of a branch group, if phrased as
        ``"If <condition>, ..."`` in the description."""
        if not self.id.is_branch or self.id.index != 1:
            return None
        m = re.match(r"\s*[Ii]f\s+([^,]*)", self.description)
        return m.group(1).strip() if m else None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"step": str(self.id), "name": self.name}
        if self.kind is not StepKind.BRANCH or self.description:
            out["description"] = self.description
        if self.input_desc is not None:
            out["input"] = self.input_desc
        if self.output_desc is not None:
            out["output"] = self.output_desc
        if self.tool is not None:
            out["tool"] = self.tool
        out["type"] = self.kind.value
        return out


@dataclass(frozen=True)
class _Entry:
    """One main-line position: a main step plus, for branch steps, its groups."""

    step: Step
    groups: dict[int, tuple[Step, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class Routine:
    steps: tuple[Step, ...]
    routine_id: str = ""
    title: str = ""
    description: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.steps, tuple):
            object.__setattr__(self, "steps", tuple(self.steps))

    @cached_property
    def _by_id(self) -> dict[StepId, Step]:
        return {s.id: s for s in self.steps}

    @cached_property
    def outline(self) -> tuple[_Entry, ...]:
        entries: list[_Entry] = []
        for s in self.steps:
            if not s.id.is_branch:
                entries.append(_Entry(s, {}))
                continue
            if not entries or entries[-1].step.id.main != s.id.main:
                continue  # orphan branch step; parse rejects these
            groups = entries[-1].groups
            groups[s.id.branch] = groups.get(s.id.branch, ()) + (s,)
        return tuple(entries)

    def step(self, step_id: StepId | str) -> Step:
        if isinstance(step_id, str):
            step_id = parse_step_id(step_id)
        try:
            return self._by_id[step_id]
        except KeyError:
            raise RoutineError(f"routine {self.routine_id!r} has no step {step_id}", "unknown-step") from None

    @property
    def tools(self) -> list[str]:
        return [s.tool for s in self.steps if s.tool is not None]

    @property
    def has_branches(self) -> bool:
        return any(s.kind is StepKind.BRANCH for s in self.steps)

    def to_dict(self) -> dict[str, Any]:
        return {
            "routine_id": self.routine_id,
            "title": self.title,
            "description": self.description,
            "steps": [s.to_dict() for s in self.steps],
        }


# --------------------------------------------------------------------------
# parsing


def _step_from_dict(obj: Any, pos: int) -> Step:
    if not isinstance(obj, dict):
        raise RoutineError(f"entry {pos} is not an object", "malformed-document")
    raw_id = obj.get("step")
    if isinstance(raw_id, int) and not isinstance(raw_id, bool):
        raw_id = str(raw_id)
    if not isinstance(raw_id, str):
        raise RoutineError(f"entry {pos} has no string 'step' field", "malformed-document")
    sid = parse_step_id(raw_id)
    kind_tag = obj.get("type")
    try:
        kind = StepKind(kind_tag)
    except ValueError:
        raise RoutineError(f"step {sid}: unknown type {kind_tag!r}", "unknown-kind") from None
    for key in ("name", "description", "input", "output"):
        if key in obj and not isinstance(obj[key], str):
            raise RoutineError(f"step {sid}: field {key!r} must be a string", "malformed-document")
    tool = obj.get("tool")
    if tool is not None and not isinstance(tool, str):
        raise RoutineError(f"step {sid}: field 'tool' must be a string", "malformed-document")
    if kind is StepKind.BRANCH:
        if tool:
            raise InvariantViolation("branch-has-tool", f"branch step {sid} names tool {tool!r}")
        tool = None
        if sid.is_branch:
            raise InvariantViolation("branch-id-kind", f"branch step {sid} must have a main id")
    else:
        if not tool:
            raise InvariantViolation("missing-tool", f"{kind.value} step {sid} has no tool")
    if kind is StepKind.BRANCHNODE and not sid.is_branch:
        raise InvariantViolation("branch-id-kind", f"branchnode {sid} must have a branch id")
    if kind is StepKind.NODE and sid.is_branch:
        raise InvariantViolation("branch-id-kind", f"node {sid} has a branch id; use 'branchnode'")
    return Step(
        id=sid,
        name=obj.get("name", ""),
        description=obj.get("description", ""),
        kind=kind,
        tool=tool,
        input_desc=obj.get("input"),
        output_desc=obj.get("output"),
    )


def _check_structure(steps: tuple[Step, ...]) -> None:
    seen: set[StepId] = set()
    last_main: Step | None = None
    finished_groups: set[tuple[int, int]] = set()
    current_group: tuple[int, int] | None = None
    expected_index = 1
    for s in steps:
        if s.id in seen:
            raise InvariantViolation("duplicate-id", f"step id {s.id} appears more than once")
        seen.add(s.id)
        if not s.id.is_branch:
            if last_main is not None and s.id.main <= last_main.id.main:
                raise InvariantViolation(
                    "main-order", f"main step {s.id} does not follow {last_main.id}"
                )
            last_main = s
            if current_group is not None:
                finished_groups.add(current_group)
            current_group = None
            continue
        if last_main is None or last_main.id.main != s.id.main or last_main.kind is not StepKind.BRANCH:
            raise InvariantViolation(
                "branch-placement", f"branch step {s.id} does not follow branch step {s.id.main}"
            )
        key = (s.id.main, s.id.branch)
        if key != current_group:
            if key in finished_groups:
                raise InvariantViolation("group-contiguity", f"branch group {key[0]}-{key[1]} is split")
            if current_group is not None:
                finished_groups.add(current_group)
            current_group = key
            expected_index = 1
        if s.id.index != expected_index:
            raise InvariantViolation(
                "group-indices", f"expected step {key[0]}-{key[1]}_{expected_index}, got {s.id}"
            )
        expected_index += 1
    if not any(s.kind is StepKind.FINISH for s in steps):
        raise InvariantViolation("no-finish", "routine has no finish step")


def routine_from_steps(
    items: list[Any], routine_id: str = "", title: str = "", description: str = ""
) -> Routine:
    """Build and check a routine from step dicts or :class:`Step` values."""
    if not isinstance(items, (list, tuple)):
        raise RoutineError("routine document must be a JSON list of steps", "malformed-document")
    steps = tuple(_step_from_dict(obj.to_dict() if isinstance(obj, Step) else obj, i) for i, obj in enumerate(items))
    _check_structure(steps)
    return Routine(steps, routine_id=routine_id, title=title, description=description)


def routine_from_dict(obj: Any) -> Routine:
    if not isinstance(obj, dict) or "steps" not in obj:
        raise RoutineError("routine object needs a 'steps' list", "malformed-document")
    meta = {k: obj.get(k, "") for k in ("routine_id", "title", "description")}
    for k, v in meta.items():
        if not isinstance(v, str):
            raise RoutineError(f"routine field {k!r} must be a string", "malformed-document")
    return routine_from_steps(obj["steps"], **meta)


def parse_routine(json_text: str, routine_id: str = "", title: str = "", description: str = "") -> Routine:
    """Parse either the bare JSON step list or a ``{routine_id, title,
    description, steps}`` object. Keyword metadata fills in what the bare list
    form cannot carry."""
    try:
        doc = json.loads(json_text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise RoutineError(f"not valid JSON: {exc}", "malformed-document") from None
    if isinstance(doc, dict):
        r = routine_from_dict(doc)
        return replace(
            r,
            routine_id=r.routine_id or routine_id,
            title=r.title or title,
            description=r.description or description,
        )
    return routine_from_steps(doc, routine_id, title, description)


def render_json(r: Routine) -> str:
    return json.dumps([s.to_dict() for s in r.steps], ensure_ascii=False, indent=2)


# --------------------------------------------------------------------------
# natural-language form

_BRANCH_CHECK = "This step performs a branch condition check:"


def _nl_body(s: Step, with_io: bool, with_tools: bool) -> str:
    text = s.description
    if with_io:
        io = []
        if s.input_desc:
            io.append(f"input: {s.input_desc}")
        if s.output_desc:
            io.append(f"output: {s.output_desc}")
        if io:
            text += f" ({'; '.join(io)})"
    if s.kind is StepKind.FINISH:
        if with_tools:
            return f"{text}, using the {s.tool} tool, and end the workflow;"
        return f"{text}, and end the workflow;"
    if with_tools:
        return f"{text}, use the {s.tool} tool;"
    return f"{text};"


def render_natural_language(r: Routine, with_io: bool = False, with_tools: bool = True) -> str:
    """Render the body of a ``<routines>`` block.

    ``with_io`` adds each step's input/output descriptions; ``with_tools=False``
    drops every tool clause so the model has to infer tools from descriptions.
    """
    blocks = []
    for entry in r.outline:
        s = entry.step
        if s.kind is not StepKind.BRANCH:
            blocks.append(f"Step {s.id}. {s.name}: {_nl_body(s, with_io, with_tools)}")
            continue
        head = f"Step {s.id}. {s.name}: "
        head += f"{s.description}, {_BRANCH_CHECK[0].lower()}{_BRANCH_CHECK[1:]}" if s.description else _BRANCH_CHECK
        lines = [head]
        for branch_no in entry.groups:
            for b in entry.groups[branch_no]:
                lines.append(
                    f"    Branch {b.id.main}-{b.id.branch} Step {b.id.index}. {b.name}: "
                    + _nl_body(b, with_io, with_tools)
                )
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


_NL_STEP = re.compile(r"^Step (\d+)\. (.*?): (.*)$")
_NL_BRANCH = re.compile(r"^Branch (\d+)-(\d+) Step (\d+)\. (.*?): (.*)$")
_NL_TAIL = re.compile(r"^(.*?)(?:, (?:use|using) the (\S+) tool)?(, and end the workflow)?;$", re.S)
_NL_LABEL = re.compile(r"^\[Routine\] (.*?): (.*)$")


def _nl_step(sid: StepId, name: str, rest: str) -> Step:
    low = rest.lower()
    if low.endswith(_BRANCH_CHECK.lower()):
        desc = rest[: -len(_BRANCH_CHECK)].rstrip().removesuffix(",")
        return Step(sid, name, desc, StepKind.BRANCH)
    m = _NL_TAIL.match(rest)
    if m is None:
        raise RoutineError(f"cannot read step {sid} line: {rest!r}", "malformed-document")
    desc, tool, end = m.groups()
    if end:
        kind = StepKind.FINISH
    else:
        kind = StepKind.BRANCHNODE if sid.is_branch else StepKind.NODE
    return Step(sid, name, desc, kind, tool)


def parse_routines_block(text: str) -> list[Routine]:
    """Read back the natural-language form, tolerating the ``[Routine]`` labels
    used when several routines share one block. Only checks line shape; the
    result is not validated."""
    routines: list[tuple[str, str, list[Step]]] = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        m = _NL_LABEL.match(line)
        if m:
            routines.append((m.group(1), m.group(2), []))
            continue
        if not routines:
            routines.append(("", "", []))
        m = _NL_BRANCH.match(line)
        if m:
            sid = StepId(int(m.group(1)), int(m.group(2)), int(m.group(3)))
            routines[-1][2].append(_nl_step(sid, m.group(4), m.group(5)))
            continue
        m = _NL_STEP.match(line)
        if m:
            routines[-1][2].append(_nl_step(StepId(int(m.group(1))), m.group(2), m.group(3)))
            continue
        raise RoutineError(f"unrecognized routine line: {line!r}", "malformed-document")
    return [Routine(tuple(steps), title=title, description=desc) for title, desc, steps in routines]


def parse_natural_language(text: str) -> Routine:
    routines = parse_routines_block(text)
    if len(routines) != 1:
        raise RoutineError(f"expected one routine, found {len(routines)}", "malformed-document")
    return routines[0]


# --------------------------------------------------------------------------
# paths, validation, flattening

Choices = tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class ExecutionPath:
    choices: Choices
    steps: tuple[Step, ...]
    finished: bool

    @property
    def label(self) -> str:
        return format_choices(self.choices)


def format_choices(choices: Iterable[tuple[int, int]]) -> str:
    return ",".join(f"{p}-{b}" for p, b in choices)


def parse_choices(text: str) -> Choices:
    if not text:
        return ()
    out = []
    for part in text.split(","):
        parent, _, branch = part.partition("-")
        out.append((int(parent), int(branch)))
    return tuple(out)


def _walk(outline: tuple[_Entry, ...], i: int, choices: Choices, acc: tuple[Step, ...]) -> Iterator[ExecutionPath]:
    if i == len(outline):
        yield ExecutionPath(choices, acc, False)
        return
    entry = outline[i]
    s = entry.step
    if s.kind is not StepKind.BRANCH:
        if s.kind is StepKind.FINISH:
            yield ExecutionPath(choices, acc + (s,), True)
        else:
            yield from _walk(outline, i + 1, choices, acc + (s,))
        return
    if not entry.groups:
        yield from _walk(outline, i + 1, choices, acc)
        return
    for branch_no, group in entry.groups.items():
        taken = acc
        done = False
        for b in group:
            taken += (b,)
            if b.kind is StepKind.FINISH:
                done = True
                break
        picked = choices + ((s.id.main, branch_no),)
        if done:
            yield ExecutionPath(picked, taken, True)
        else:
            yield from _walk(outline, i + 1, picked, taken)


def execution_paths(r: Routine) -> list[ExecutionPath]:
    """Every distinct walk through the routine, one per combination of
    branch choices that is actually reached."""
    return list(_walk(r.outline, 0, (), ()))


@dataclass(frozen=True)
class Finding:
    code: str
    step: str | None
    message: str

    def __str__(self) -> str:
        where = f"step {self.step}: " if self.step else ""
        return f"{self.code}: {where}{self.message}"


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.findings

    def codes(self) -> list[str]:
        return [f.code for f in self.findings]


def _tool_names(catalog: Iterable[Any]) -> set[str]:
    return {c if isinstance(c, str) else c.name for c in catalog}


def validate(r: Routine, catalog: Iterable[Any]) -> ValidationReport:
    """Check ``r`` is executable against ``catalog`` (tool specs or names)."""
    known = _tool_names(catalog)
    findings: list[Finding] = []
    seen: set[StepId] = set()
    for s in r.steps:
        if s.id in seen:
            findings.append(Finding("duplicate-id", str(s.id), "step id appears more than once"))
        seen.add(s.id)
        if s.tool is None:
            continue
        if s.tool.strip().lower() in FORBIDDEN_TOOLS:
            findings.append(Finding("forbidden-no-tool", str(s.id), f"tool {s.tool!r} is not a real tool"))
        elif s.tool not in known:
            findings.append(Finding("unknown-tool", str(s.id), f"tool {s.tool!r} is not in the catalog"))
    for entry in r.outline:
        if entry.step.kind is not StepKind.BRANCH:
            continue
        if not entry.groups:
            findings.append(Finding("empty-branch-group", str(entry.step.id), "branch step has no branches"))
            continue
        for missing in sorted(set(range(1, max(entry.groups) + 1)) - set(entry.groups)):
            findings.append(
                Finding("empty-branch-group", str(entry.step.id), f"branch {entry.step.id}-{missing} has no steps")
            )
    reported: set[str] = set()
    for path in execution_paths(r):
        if path.finished:
            continue
        last = str(path.steps[-1].id) if path.steps else None
        key = last or ""
        if key in reported:
            continue
        reported.add(key)
        via = f" (branches {path.label})" if path.choices else ""
        findings.append(Finding("unreachable-finish", last, f"path ends without a finish step{via}"))
    return ValidationReport(tuple(findings))


def flatten_branches(r: Routine) -> list[Routine]:
    """One linear routine per execution path, branch nodes renumbered into the
    main sequence."""
    out = []
    for path in execution_paths(r):
        steps = []
        for n, s in enumerate(path.steps, start=1):
            kind = StepKind.FINISH if s.kind is StepKind.FINISH else StepKind.NODE
            steps.append(replace(s, id=StepId(n), kind=kind))
        if path.choices:
            rid = f"{r.routine_id}/{path.label}"
            title = f"{r.title} (branch {path.label})" if r.title else r.title
        else:
            rid, title = r.routine_id, r.title
        out.append(Routine(tuple(steps), routine_id=rid, title=title, description=r.description))
    return out


# --------------------------------------------------------------------------
# cursor


@dataclass(frozen=True)
class Cursor:
    routine_id: str
    position: StepId | None
    chosen_branches: Choices = ()

    @property
    def terminated(self) -> bool:
        return self.position is None

    def branch_for(self, parent: int) -> int | None:
        return dict(self.chosen_branches).get(parent)


def _main_index(r: Routine, main: int) -> int:
    for i, entry in enumerate(r.outline):
        if entry.step.id.main == main:
            return i
    raise RoutineError(f"no main step {main}", "unknown-step")


def _enter(r: Routine, i: int, choice: int | None, chosen: Choices) -> Cursor:
    if i >= len(r.outline):
        if choice is not None:
            raise RoutineError("branch choice given but no branch step follows", "invalid-branch-choice")
        return Cursor(r.routine_id, None, chosen)
    entry = r.outline[i]
    s = entry.step
    if s.kind is not StepKind.BRANCH:
        if choice is not None:
            raise RoutineError(f"step {s.id} is not a branch step", "invalid-branch-choice")
        return Cursor(r.routine_id, s.id, chosen)
    if choice is None:
        raise RoutineError(f"step {s.id} is a branch step; a branch choice is required", "missing-branch-choice")
    group = entry.groups.get(choice)
    if not group:
        raise RoutineError(f"step {s.id} has no branch {choice}", "invalid-branch-choice")
    return Cursor(r.routine_id, group[0].id, chosen + ((s.id.main, choice),))


def start(r: Routine, branch_choice: int | None = None) -> Cursor:
    return _enter(r, 0, branch_choice, ())


def pending_branch(r: Routine, c: Cursor | None) -> Step | None:
    """The branch step the next move enters, if any. ``c=None`` means the
    walk has not started yet."""
    if c is None:
        i = 0
    else:
        if c.terminated:
            return None
        cur = r.step(c.position)
        if cur.kind is StepKind.FINISH:
            return None
        if cur.id.is_branch:
            group = r.outline[_main_index(r, cur.id.main)].groups[cur.id.branch]
            if cur.id.index < len(group):
                return None
        i = _main_index(r, cur.id.main) + 1
    if i < len(r.outline) and r.outline[i].step.kind is StepKind.BRANCH:
        return r.outline[i].step
    return None


def advance(r: Routine, c: Cursor, branch_choice: int | None = None) -> Cursor:
    if c.terminated:
        raise RoutineError("cursor already terminated", "already-terminated")
    cur = r.step(c.position)
    if cur.kind is StepKind.FINISH:
        if branch_choice is not None:
            raise RoutineError("branch choice given at a finish step", "invalid-branch-choice")
        return Cursor(c.routine_id, None, c.chosen_branches)
    if cur.id.is_branch:
        group = r.outline[_main_index(r, cur.id.main)].groups[cur.id.branch]
        if cur.id.index < len(group):
            if branch_choice is not None:
                raise RoutineError("branch choice given inside a branch group", "invalid-branch-choice")
            return Cursor(c.routine_id, group[cur.id.index].id, c.chosen_branches)
    return _enter(r, _main_index(r, cur.id.main) + 1, branch_choice, c.chosen_branches)
