"""MCP-style tool catalog: specs, prompt serialization, tool-call parsing and
dispatch to in-process handlers."""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from .errors import ToolError
from .memory import resolve_arguments

logger = logging.getLogger(__name__)

TYPE_TAGS = ("string", "number", "integer", "boolean", "array", "object")

Handler = Callable[[dict[str, Any]], Any]


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type_tag: str = "string"
    description: str = ""
    required: bool = False
    free_text: bool = False

    def __post_init__(self) -> None:
        if not self.name:
            raise ToolError("parameter name must be nonempty", "bad-spec")
        if self.type_tag not in TYPE_TAGS:
            raise ToolError(f"parameter {self.name}: unknown type {self.type_tag!r}", "bad-spec")
        if self.free_text and self.type_tag != "string":
            raise ToolError(f"parameter {self.name}: free_text requires type string", "bad-spec")


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str = ""
    params: tuple[ParamSpec, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.params, tuple):
            object.__setattr__(self, "params", tuple(self.params))
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ToolError(f"tool {self.name}: duplicate parameter names", "bad-spec")

    def param(self, name: str) -> ParamSpec | None:
        for p in self.params:
            if p.name == name:
                return p
        return None

    @property
    def free_text_params(self) -> frozenset[str]:
        return frozenset(p.name for p in self.params if p.free_text)

    def signature(self) -> dict[str, Any]:
        """Tool signature as shown to the model (no free_text markers)."""
        return {
            "name": self.name,
            "description": self.description,
            "parameters": {
                "type": "object",
                "properties": {p.name: {"type": p.type_tag, "description": p.description} for p in self.params},
                "required": [p.name for p in self.params if p.required],
            },
        }

    @classmethod
    def from_signature(cls, obj: dict[str, Any], free_text: Iterable[str] = ()) -> ToolSpec:
        """Inverse of :meth:`signature`; ``free_text`` markers may also be
        embedded per property as ``"free_text": true``."""
        if not isinstance(obj, dict) or not isinstance(obj.get("name"), str):
            raise ToolError("tool signature needs a string 'name'", "bad-spec")
        schema = obj.get("parameters") or {}
        props = schema.get("properties") or {}
        required = set(schema.get("required") or [])
        missing = required - set(props)
        if missing:
            raise ToolError(f"tool {obj['name']}: required params not declared: {sorted(missing)}", "bad-spec")
        free = set(free_text)
        params = tuple(
            ParamSpec(
                name=pname,
                type_tag=p.get("type", "string"),
                description=p.get("description", ""),
                required=pname in required,
                free_text=bool(p.get("free_text", False)) or pname in free,
            )
            for pname, p in props.items()
        )
        return cls(obj["name"], obj.get("description", ""), params)


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "arguments": self.arguments}, ensure_ascii=False)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "arguments": self.arguments}

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> ToolCall:
        return cls(obj["name"], dict(obj.get("arguments") or {}))


@dataclass(frozen=True)
class Observation:
    raw: Any
    presented: str

    def to_dict(self) -> dict[str, Any]:
        return {"raw": self.raw, "presented": self.presented}


# --------------------------------------------------------------------------
# model output parsing

_SPAN_RE = re.compile(r"<tool_call>(.*?)</tool_call>", re.S)


def format_tool_call(call: ToolCall) -> str:
    return f"<tool_call>\n{call.to_json()}\n</tool_call>"


def count_tool_call_spans(model_output: str) -> int:
    return len(_SPAN_RE.findall(model_output))


def parse_tool_call(model_output: str) -> ToolCall:
    """Parse the first ``<tool_call>`` span of a model reply.

    Raises ToolError with code ``no-tool-call-span``, ``malformed-json`` or
    ``bad-shape``. Use :func:`count_tool_call_spans` to detect extra calls.
    """
    m = _SPAN_RE.search(model_output)
    if m is None:
        if "<tool_call>" in model_output:
            raise ToolError("unterminated <tool_call> span", "malformed-json")
        raise ToolError("no <tool_call> span in model output", "no-tool-call-span")
    try:
        obj = json.loads(m.group(1).strip())
    except json.JSONDecodeError as exc:
        raise ToolError(f"tool call is not valid JSON: {exc}", "malformed-json") from None
    if not isinstance(obj, dict) or set(obj) != {"name", "arguments"}:
        raise ToolError("tool call must be an object with exactly 'name' and 'arguments'", "bad-shape")
    if not isinstance(obj["name"], str) or not isinstance(obj["arguments"], dict):
        raise ToolError("'name' must be a string and 'arguments' an object", "bad-shape")
    return ToolCall(obj["name"], obj["arguments"])


# --------------------------------------------------------------------------
# registry


class ToolRegistry:
    """Ordered catalog of tool specs with their handlers.

    Write during setup, read-only afterwards.
    """

    def __init__(self) -> None:
        self._specs: dict[str, ToolSpec] = {}
        self._handlers: dict[str, Handler] = {}

    def register(self, spec: ToolSpec, handler: Handler | None = None) -> ToolRegistry:
        if spec.name in self._specs:
            raise ToolError(f"tool {spec.name!r} is already registered", "duplicate-name")
        self._specs[spec.name] = spec
        if handler is not None:
            self._handlers[spec.name] = handler
        return self

    def __len__(self) -> int:
        return len(self._specs)

    def __contains__(self, name: object) -> bool:
        return name in self._specs

    def __iter__(self):
        return iter(self._specs.values())

    @property
    def specs(self) -> list[ToolSpec]:
        return list(self._specs.values())

    def get(self, name: str) -> ToolSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise ToolError(f"unknown tool {name!r}", "unknown-tool") from None

    def free_text_params(self) -> dict[str, frozenset[str]]:
        return {s.name: s.free_text_params for s in self._specs.values() if s.free_text_params}

    def serialize(self, order_seed: int | None = None) -> str:
        return serialize_tools(self.specs, order_seed)

    def dispatch(self, call: ToolCall, store=None) -> Any:
        """Resolve memory keys in ``call.arguments`` through ``store`` and run
        the handler; returns the handler's raw value."""
        if call.name not in self._specs:
            raise ToolError(f"unknown tool {call.name!r}", "unknown-tool")
        handler = self._handlers.get(call.name)
        if handler is None:
            raise ToolError(f"tool {call.name!r} has no handler", "handler-failure")
        args = call.arguments
        if store is not None:
            args = resolve_arguments(args, store)
        try:
            return handler(args)
        except Exception as exc:
            raise ToolError(f"tool {call.name!r} failed: {exc}", "handler-failure") from exc


def register_tool(registry: ToolRegistry, spec: ToolSpec, handler: Handler) -> ToolRegistry:
    return registry.register(spec, handler)


def permute(items: list[Any], seed: int | None) -> list[Any]:
    """Seeded Fisher-Yates shuffle (``random.Random.shuffle``); ``None`` keeps order."""
    items = list(items)
    if seed is not None:
        random.Random(seed).shuffle(items)
    return items


def serialize_tools(specs: Iterable[ToolSpec], order_seed: int | None = None) -> str:
    return json.dumps([s.signature() for s in permute(list(specs), order_seed)], ensure_ascii=False)


def parse_tools(text: str, free_text: dict[str, Iterable[str]] | None = None) -> list[ToolSpec]:
    """Read a serialized tools string back into specs."""
    try:
        arr = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ToolError(f"tools text is not valid JSON: {exc}", "bad-spec") from None
    if not isinstance(arr, list):
        raise ToolError("tools text must be a JSON array", "bad-spec")
    free_text = free_text or {}
    return [ToolSpec.from_signature(o, free_text.get(o.get("name"), ())) for o in arr]


# --------------------------------------------------------------------------
# tool configuration files


class _Missing(dict):
    def __missing__(self, key: str) -> str:
        return "{" + key + "}"


def _interpolate(template: Any, args: dict[str, Any]) -> Any:
    if isinstance(template, str):
        m = re.fullmatch(r"\{(\w+)\}", template)
        if m and m.group(1) in args:
            return args[m.group(1)]  # keep the argument's JSON type
        return template.format_map(_Missing({k: v for k, v in args.items()}))
    if isinstance(template, list):
        return [_interpolate(t, args) for t in template]
    if isinstance(template, dict):
        return {k: _interpolate(v, args) for k, v in template.items()}
    return template


def mock_handler(mock: dict[str, Any]) -> Handler:
    """Build a handler from a config ``mock`` entry.

    ``{"returns": value}`` yields a canned value; ``{"template": value}``
    substitutes ``{arg}`` placeholders in string leaves with argument values.
    """
    if "returns" in mock:
        canned = mock["returns"]
        return lambda args: json.loads(json.dumps(canned))
    if "template" in mock:
        template = mock["template"]
        return lambda args: _interpolate(template, args)
    raise ToolError("mock entry needs 'returns' or 'template'", "bad-spec")


def load_tool_config(source: str | Path | dict | list) -> ToolRegistry:
    """Load a tool configuration file into a registry.

    The file holds ``{"tools": [...]}`` (or a bare list) of tool signatures,
    optionally with ``"free_text": true`` on properties and a ``"mock"`` entry.
    Tools without a mock get a handler that echoes its arguments.
    """
    if isinstance(source, (str, Path)):
        data = json.loads(Path(source).read_text(encoding="utf-8"))
    else:
        data = source
    entries = data.get("tools", []) if isinstance(data, dict) else data
    reg = ToolRegistry()
    for entry in entries:
        spec = ToolSpec.from_signature(entry, entry.get("free_text_params", ()))
        mock = entry.get("mock")
        handler = mock_handler(mock) if mock is not None else (lambda args: {"ok": True, "arguments": args})
        reg.register(spec, handler)
    return reg


def tool_config_entry(spec: ToolSpec, mock: dict[str, Any] | None = None) -> dict[str, Any]:
    sig = spec.signature()
    for p in spec.params:
        if p.free_text:
            sig["parameters"]["properties"][p.name]["free_text"] = True
    if mock is not None:
        sig["mock"] = mock
    return sig
