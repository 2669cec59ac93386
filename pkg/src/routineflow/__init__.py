"""Routine-guided multi-step tool calling: plans, runtime, evaluation and data."""

from .errors import RoutineError, RoutineFlowError, ToolError
from .evaluator import EvalSample, MetricsReport, ScenarioVariant, Verdict, aggregate, judge, make_variant
from .memory import RoutineLibrary, VariableStore, compress_observation, render_variables_block, resolve_arguments
from .pipeline import DatasetRecord, decompose_trace, distill, emit_sharegpt, filter_dataset, optimize_routine
from .routine import (
    Cursor,
    Routine,
    Step,
    StepId,
    StepKind,
    advance,
    flatten_branches,
    parse_routine,
    parse_step_id,
    render_json,
    render_natural_language,
    start,
    validate,
)
from .runtime import HttpChatClient, ScriptedClient, SessionConfig, Trace, build_system_prompt, run_task
from .tools import ParamSpec, ToolCall, ToolRegistry, ToolSpec, parse_tool_call, serialize_tools

__all__ = [
    "Cursor",
    "DatasetRecord",
    "EvalSample",
    "HttpChatClient",
    "MetricsReport",
    "ParamSpec",
    "Routine",
    "RoutineError",
    "RoutineFlowError",
    "RoutineLibrary",
    "ScenarioVariant",
    "ScriptedClient",
    "SessionConfig",
    "Step",
    "StepId",
    "StepKind",
    "ToolCall",
    "ToolError",
    "ToolRegistry",
    "ToolSpec",
    "Trace",
    "VariableStore",
    "Verdict",
    "advance",
    "aggregate",
    "build_system_prompt",
    "compress_observation",
    "decompose_trace",
    "distill",
    "emit_sharegpt",
    "filter_dataset",
    "flatten_branches",
    "judge",
    "make_variant",
    "optimize_routine",
    "parse_routine",
    "parse_step_id",
    "parse_tool_call",
    "render_json",
    "render_natural_language",
    "render_variables_block",
    "resolve_arguments",
    "run_task",
    "serialize_tools",
    "start",
    "validate",
]
