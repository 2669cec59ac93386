"""Prompt templates and the section surgery used on assembled system prompts."""

from __future__ import annotations

import re
from typing import Iterable, Mapping, Sequence

from .routine import Routine, render_natural_language

DEFAULT_ROLE_PREAMBLE = (
    "You are an expert at calling functions (tools), and can accurately select and call the appropriate "
    "tool from the available tool set according to the user's task to answer the user's questions;"
)

BEHAVIOR_RULES = (
    "You have a scenario workflow operation step called Routine. You need to select a tool to call based on "
    "the steps in the Routine and the completed historical steps;",
    "You have completed tool calls for similar scenarios before and have a memory of tool calls for similar "
    "scenarios. Now you can imitate the previous tool calls to select the tool you need to call now based on "
    "the historical dialogue information;",
    "Please strictly imitate the tool call instruction steps in the Routine, do not add tool call instructions "
    "that have not appeared in the Routine, and only output one tool call at a time;",
    "In the case of branches, please judge the branches of subsequent steps according to the conditions of "
    "each branch;",
)

MEMORY_NOTE = (
    "Note: When temporary variable memory_xxx appears in the result returned by the tool result, it means "
    "that the value of the variable xxx is too long and is stored in the temporary variable memory. Try to "
    "fill in temporary variable memory_xxx instead of the actual value in the tool call parameters;"
)

ROUTINE_HEADER = (
    "# Routine\n"
    "To solve user questions, you need to refer to the following routines, select the tool you need to call, "
    "and make function calls based on the current progress and chat history. Please strictly follow the "
    "routines, do not skip any steps, and only output one function call at a time.\n"
    "The <routines></routines> XML tag provides you with the routine signatures of the workflow operation steps:"
)

VARIABLES_HEADER = (
    "# Variables\n"
    "To ensure smooth information flow between each step, the system uses the following temporary variables "
    "to record intermediate results:"
)

TOOLS_HEADER = (
    "# Tools\n"
    "You may call one or more functions to assist with the user query.\n"
    "You are provided with function signatures within <tools></tools> XML tags:"
)

TOOL_CALL_FORMAT = (
    "For each function call, return a json object with function name and arguments within "
    "<tool_call></tool_call> XML tags:\n"
    "<tool_call>\n"
    '{"name": <function-name>, "arguments": <args-json-object>}\n'
    "</tool_call>"
)


def tagged(tag: str, body: str) -> str:
    return f"<{tag}>\n{body}\n</{tag}>" if body else f"<{tag}>\n</{tag}>"


def system_params_lines(params: Mapping[str, object]) -> str:
    return "\n".join(f"The {name} of the current question is {value};" for name, value in params.items())


def routine_label(r: Routine) -> str:
    return f"[Routine] {r.title or r.routine_id}: {r.description}"


def routines_body(routines: Sequence[Routine], with_io: bool = False, with_tools: bool = True) -> str:
    """A single routine renders bare; several are each prefixed with a
    ``[Routine] <title>: <description>`` label line."""
    if len(routines) == 1:
        return render_natural_language(routines[0], with_io, with_tools)
    return "\n\n".join(
        routine_label(r) + "\n" + render_natural_language(r, with_io, with_tools) for r in routines
    )


def assemble_system_prompt(
    *,
    role_preamble: str,
    system_params: Mapping[str, object],
    routines_text: str | None,
    variables_text: str,
    tools_text: str | None,
    exemplars: str | None = None,
) -> str:
    head = "\n".join((role_preamble,) + BEHAVIOR_RULES)
    if exemplars:
        head += "\n" + exemplars
    sections = [head, MEMORY_NOTE]
    if system_params:
        sections[-1] += "\n" + system_params_lines(system_params)
    if routines_text is not None:
        sections.append(ROUTINE_HEADER + "\n\n" + tagged("routines", routines_text))
    sections.append(VARIABLES_HEADER + "\n\n" + tagged("variables", variables_text))
    if tools_text is not None:
        sections.append(TOOLS_HEADER + "\n\n" + tagged("tools", tools_text) + "\n\n" + TOOL_CALL_FORMAT)
    return "\n\n".join(sections)


# --------------------------------------------------------------------------
# section surgery

_ROUTINE_SECTION = re.compile(r"# Routine\n.*?</routines>\n\n", re.S)
_ROUTINES_BLOCK = re.compile(r"<routines>\n.*?</routines>", re.S)
_TOOLS_BLOCK = re.compile(r"<tools>\n(.*?)\n</tools>", re.S)


def strip_routine_section(prompt: str) -> str:
    return _ROUTINE_SECTION.sub("", prompt, count=1)


def replace_routines_block(prompt: str, body: str) -> str:
    if _ROUTINES_BLOCK.search(prompt) is None:
        raise ValueError("prompt has no <routines> block")
    return _ROUTINES_BLOCK.sub(lambda _: tagged("routines", body), prompt, count=1)


def routines_block(prompt: str) -> str | None:
    m = re.search(r"<routines>\n(.*?)</routines>", prompt, re.S)
    return m.group(1).rstrip("\n") if m else None


def tools_block(prompt: str) -> str | None:
    m = _TOOLS_BLOCK.search(prompt)
    return m.group(1) if m else None


def replace_tools_block(prompt: str, tools_text: str) -> str:
    if _TOOLS_BLOCK.search(prompt) is None:
        raise ValueError("prompt has no <tools> block")
    return _TOOLS_BLOCK.sub(lambda _: tagged("tools", tools_text), prompt, count=1)


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


# --------------------------------------------------------------------------
# routine generation

GENERATION_TEMPLATE = """You are a Routine workflow writer for a company. You can write the operation step flow based on the process information provided by the user and the available tools.
The steps are written in structured json and lists. Write the flow in the following way:

[{"step": "1", "name": "xxxxx", "description": "xxxxxxxxxxxx", "tool": "tool_X", "type": "node"},
{"step": "2", "name": "xxxxx", "description": "xxxxxxxxxxxx", "tool": "tool_Y", "type": "node"}]

The format is a json list. Each step contains the step number, step name, step action description, step input, step output, step tool, and node type.
The input and output of the step do not have to be very specific. Use natural language to write the possible input and output according to the tool. Only one tool is used for each step.
When you may encounter branch condition judgment in a certain step, express it in the following way and indicate under what conditions to enter a branch, what tool to use;

{"step": "x", "name": "xxxxx", "type": "branch"},
    {"step": "x-1_1", "name": "xx", "description": "xxxx", "tool": "tool_X1", "type": "branchnode"},
    {"step": "x-2_1", "name": "xx", "description": "xxxx", "tool": "tool_X2", "type": "branchnode"},
{"step": "y", "name": "xxxxx", "description": "xxxxxx", "tool": "tool_Y", "type": "node"}

If the next branch step involves multiple steps, you can open a new branch workflow, for example:
{"step": "x-n_1", "name": "xx", "description": "xxxx", "tool": "tool_X", "type": "branchnode"},
{"step": "x-n_2", "name": "xx", "description": "xxxx", "tool": "tool_Y", "type": "branchnode"}

Regarding the writing of step numbers, x-n_i represents the i-th step in the n-th branch of the main line step x;
Please pay attention to the description in the tool and the parameters that need to be filled in, which need to be fed back in the input of each step;
Pay attention to the branch judgment in the process information, and do not write multiple possibilities of branch conditions in the steps of the same line;
When a step is completed and the workflow needs to be ended, please change the node type of the step to "finish", set "type": "finish"; For example:

{"step": "x", "name": "xxxxx", "description": "xxx", "tool": "tool_X", "type": "finish"}

Note: Each workflow step must use a tool provided in the tool list, or perform branch condition judgment. There will be no "no tool needed", "no tool used", or use of non-existent tools. Each step only uses one tool.
The following is the process information provided by this user: {routine_draft};
In the tool list, these tools are available: {tool_list};
Now please convert it into a structured Routine workflow. Do not output other prefixes, suffixes, or meaningless information, and please output in {language}."""

REPAIR_TEMPLATE = """The Routine you wrote cannot be used yet:
{findings}
Fix these problems and output the complete corrected Routine as a json list only."""

PARAPHRASE_INSTRUCTION = (
    "Rewrite the following user request so it keeps exactly the same meaning, entities and values but uses "
    "different wording. Output only the rewritten request.\n\n{query}"
)


def fill(template: str, **values: str) -> str:
    """Substitute ``{name}`` slots without touching the template's literal JSON braces."""
    pattern = re.compile(r"\{(" + "|".join(map(re.escape, values)) + r")\}")
    return pattern.sub(lambda m: values[m.group(1)], template)


def findings_text(items: Iterable[object]) -> str:
    return "\n".join(f"- {item}" for item in items)
