"""Command line: ``routineflow routine|agent|data|eval ...``.

Exit codes: 0 success, 1 operation failure (findings, aborted run, exhausted
repairs...), 2 unreadable or malformed inputs and configuration.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import click

from .errors import RoutineFlowError
from .evaluator import (
    SampleScriptClient,
    ScenarioVariant,
    dump_samples,
    evaluate_run,
    load_samples,
    make_variant,
    report_from_log,
)
from .memory import RoutineLibrary
from .pipeline import (
    DatasetRecord,
    decompose_trace,
    distill,
    emit_sharegpt,
    expand_query_templates,
    filter_dataset,
    optimize_routine,
    read_jsonl,
    write_jsonl,
)
from .routine import Routine, flatten_branches, parse_routine, render_json, render_natural_language, validate
from .runtime import HttpChatClient, ScriptedClient, SessionConfig, Trace, run_task
from .tools import ToolRegistry, load_tool_config

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("routineflow")


class InputError(click.ClickException):
    exit_code = 2


class OperationError(click.ClickException):
    exit_code = 1


# --------------------------------------------------------------------------
# configuration


@dataclass
class Config:
    endpoint: str | None = None
    model: str | None = None
    credentials_env: str | None = None
    timeout: float = 60.0
    tool_role: str = "tool"
    session: SessionConfig = field(default_factory=SessionConfig)
    shuffle_seed: int = 0
    tools_path: str | None = None
    library_path: str | None = None


_SESSION_KEYS = {
    "role_preamble",
    "system_params",
    "step_cap",
    "parse_retries",
    "variable_threshold",
    "tool_order_seed",
    "exemplars",
    "finish_tools",
}


def load_config(path: str | None) -> Config:
    if path is None:
        return Config()
    try:
        data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    for table in data.values():
        if isinstance(table, dict) and any("key" in k.lower() and k != "credentials_env" for k in table):
            raise InputError("config files must not hold credentials; name an environment variable in credentials_env")
    model = data.get("model", {})
    session = data.get("session", {})
    unknown = set(session) - _SESSION_KEYS
    if unknown:
        raise InputError(f"unknown [session] keys: {sorted(unknown)}")
    try:
        sess = SessionConfig(**session)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad [session] table: {exc}") from None
    seeds = data.get("seeds", {})
    if "tool_order" in seeds:
        sess.tool_order_seed = seeds["tool_order"]
    paths = data.get("paths", {})
    return Config(
        endpoint=model.get("endpoint"),
        model=model.get("name"),
        credentials_env=model.get("credentials_env"),
        timeout=float(model.get("timeout", 60.0)),
        tool_role=model.get("tool_role", "tool"),
        session=sess,
        shuffle_seed=int(seeds.get("shuffle", 0)),
        tools_path=paths.get("tools"),
        library_path=paths.get("library"),
    )


def _live_client(cfg: Config) -> HttpChatClient:
    if not cfg.endpoint or not cfg.model:
        raise InputError("no --script given and the config has no [model] endpoint/name")
    return HttpChatClient(cfg.endpoint, cfg.model, cfg.credentials_env, cfg.timeout, cfg.tool_role)


# --------------------------------------------------------------------------
# input helpers


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None


def _write(path: str | None, text: str) -> None:
    if path is None:
        click.echo(text, nl=not text.endswith("\n"))
        return
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from None


def _json(path: str) -> Any:
    try:
        return json.loads(_read(path))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from None


def _guard(what: str, fn: Callable[[], Any]) -> Any:
    try:
        return fn()
    except (RoutineFlowError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{what}: {exc}") from None


def load_routine(path: str, routine_id: str | None = None) -> Routine:
    text = _read(path)
    doc = _guard(path, lambda: json.loads(text))
    if isinstance(doc, list) and doc and isinstance(doc[0], dict) and "steps" in doc[0]:
        lib = _guard(path, lambda: RoutineLibrary.load(path))
        if routine_id is None:
            if len(lib) != 1:
                raise InputError(f"{path} is a library of {len(lib)} routines; pick one with --id")
            return lib.routines[0]
        return _guard(path, lambda: lib.get(routine_id))
    return _guard(path, lambda: parse_routine(text, routine_id=routine_id or Path(path).stem))


def load_tools(path: str | None) -> ToolRegistry:
    if path is None:
        raise InputError("a tool configuration is required (--tools or [paths] tools)")
    data = _json(path)
    return _guard(path, lambda: load_tool_config(data))


def load_script(path: str) -> list[str | None]:
    data = _json(path)
    if not isinstance(data, list) or not all(x is None or isinstance(x, str) for x in data):
        raise InputError(f"{path}: a script is a JSON array of assistant outputs (strings or null)")
    return data


def load_traces(path: str) -> list[Trace]:
    text = _read(path)
    try:
        doc = json.loads(text)
        items = doc if isinstance(doc, list) else [doc]
    except json.JSONDecodeError:
        items = _guard(path, lambda: read_jsonl(text))
    return [_guard(path, lambda d=d: Trace.from_dict(d)) for d in items]


def _session(cfg: Config, seed: int | None, step_cap: int | None, retries: int | None, params: tuple[str, ...]) -> SessionConfig:
    sess = cfg.session
    if seed is not None:
        sess.tool_order_seed = seed
    if step_cap is not None:
        sess.step_cap = step_cap
    if retries is not None:
        sess.parse_retries = retries
    for item in params:
        name, sep, value = item.partition("=")
        if not sep:
            raise InputError(f"--system-param expects NAME=VALUE, got {item!r}")
        sess.system_params[name] = value
    return sess


# --------------------------------------------------------------------------
# root


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML configuration file.")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, verbose: bool) -> None:
    """Routine-guided tool calling: plans, runs, datasets and evaluation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = load_config(config_path)


# --------------------------------------------------------------------------
# routine


@main.group()
def routine() -> None:
    """Validate, render and flatten routine files."""


@routine.command("validate")
@click.argument("path")
@click.option("--tools", "tools_path", help="Tool configuration JSON.")
@click.option("--id", "routine_id", help="Routine id when PATH is a library.")
@click.pass_obj
def routine_validate(cfg: Config, path: str, tools_path: str | None, routine_id: str | None) -> None:
    """Print validation findings; exit 1 if there are any."""
    r = load_routine(path, routine_id)
    reg = load_tools(tools_path or cfg.tools_path)
    report = validate(r, reg.specs)
    for f in report.findings:
        click.echo(str(f))
    if not report.ok:
        sys.exit(1)
    click.echo("ok")


@routine.command("render")
@click.argument("path")
@click.option("--to", "fmt", type=click.Choice(["nl", "json"]), default="nl", show_default=True, help="Output format.")
@click.option("--with-io", is_flag=True, help="Include step input/output descriptions.")
@click.option("--without-tools", is_flag=True, help="Drop the tool clause from every step.")
@click.option("--tags", is_flag=True, help="Wrap natural-language output in <routines> tags.")
@click.option("--id", "routine_id", help="Routine id when PATH is a library.")
@click.option("--out", type=click.Path(dir_okay=False), help="Output file (default: stdout).")
def routine_render(path: str, fmt: str, with_io: bool, without_tools: bool, tags: bool, routine_id: str | None, out: str | None) -> None:
    """Render a routine as natural language or canonical JSON."""
    r = load_routine(path, routine_id)
    if fmt == "json":
        text = render_json(r)
    else:
        text = render_natural_language(r, with_io=with_io, with_tools=not without_tools)
        if tags:
            text = f"<routines>\n{text}\n</routines>"
    _write(out, text + "\n")


@routine.command("flatten")
@click.argument("path")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False), help="Directory for the per-path routine files.")
@click.option("--id", "routine_id", help="Routine id when PATH is a library.")
def routine_flatten(path: str, out_dir: str, routine_id: str | None) -> None:
    """Write one branch-free routine file per execution path."""
    r = load_routine(path, routine_id)
    stem = r.routine_id or Path(path).stem
    flat = flatten_branches(r)
    for n, linear in enumerate(flat, start=1):
        target = Path(out_dir) / f"{stem}_{n}.json"
        _write(str(target), json.dumps(linear.to_dict(), ensure_ascii=False, indent=2) + "\n")
        click.echo(str(target))


# --------------------------------------------------------------------------
# agent


def _agent_inputs(cfg: Config, routine_paths, library_path, top_k, tools_path):
    reg = load_tools(tools_path or cfg.tools_path)
    routines = [load_routine(p) for p in routine_paths]
    lib = None
    library_path = library_path or (cfg.library_path if not routines else None)
    if library_path:
        lib = _guard(library_path, lambda: RoutineLibrary.load(library_path))
    return reg, routines, lib, top_k


def _routines_for(query: str, routines: list[Routine], lib: RoutineLibrary | None, top_k: int) -> list[Routine]:
    if routines or lib is None:
        return routines
    return [r for r, _ in lib.retrieve(query, top_k)]


_agent_options = [
    click.option("--routine", "routine_paths", multiple=True, help="Routine JSON file (repeatable)."),
    click.option("--library", "library_path", help="Routine library to retrieve from when no --routine is given."),
    click.option("--top-k", default=1, show_default=True, help="Routines retrieved from the library."),
    click.option("--tools", "tools_path", help="Tool configuration JSON."),
    click.option("--script", "script_path", help="JSON array of scripted assistant outputs (no live model)."),
    click.option("--seed", type=int, help="Tool-order seed for the prompt's tool list."),
    click.option("--step-cap", type=int, help="Maximum tool calls per task."),
    click.option("--parse-retries", type=int, help="Extra attempts after an unparseable reply."),
    click.option("--system-param", "system_params", multiple=True, help="NAME=VALUE shown in the system prompt."),
]


def agent_options(fn):
    for opt in reversed(_agent_options):
        fn = opt(fn)
    return fn


@main.group()
def agent() -> None:
    """Run the execution loop."""


@agent.command("run")
@click.option("--query", required=True, help="User task text.")
@agent_options
@click.option("--out", type=click.Path(dir_okay=False), help="Trace file (default: stdout).")
@click.pass_obj
def agent_run(cfg: Config, query, routine_paths, library_path, top_k, tools_path, script_path, seed, step_cap, parse_retries, system_params, out) -> None:
    """Execute one query and write its trace; exit 1 unless it finished."""
    reg, routines, lib, top_k = _agent_inputs(cfg, routine_paths, library_path, top_k, tools_path)
    sess = _session(cfg, seed, step_cap, parse_retries, system_params)
    client = ScriptedClient(load_script(script_path)) if script_path else _live_client(cfg)
    trace = run_task(query, _routines_for(query, routines, lib, top_k), client, reg, sess)
    _write(out, trace.to_json() + "\n")
    if out:
        click.echo(f"{trace.status}: {len(trace.steps)} step(s)" + (f" ({trace.error})" if trace.error else ""))
    if not trace.finished:
        sys.exit(1)


@agent.command("repl")
@agent_options
@click.pass_obj
def agent_repl(cfg: Config, routine_paths, library_path, top_k, tools_path, script_path, seed, step_cap, parse_retries, system_params) -> None:
    """Read queries from the terminal and run each one. Empty line or EOF quits."""
    reg, routines, lib, top_k = _agent_inputs(cfg, routine_paths, library_path, top_k, tools_path)
    sess = _session(cfg, seed, step_cap, parse_retries, system_params)
    client = ScriptedClient(load_script(script_path)) if script_path else _live_client(cfg)
    while True:
        try:
            query = input("query> ").strip()
        except EOFError:
            break
        if not query or query in {"exit", "quit"}:
            break
        trace = run_task(query, _routines_for(query, routines, lib, top_k), client, reg, sess)
        for n, step in enumerate(trace.steps, start=1):
            click.echo(f"[{n}] {step.parsed_call.to_json()}")
            click.echo(f"    -> {step.observation.presented}")
        click.echo(f"{trace.status}" + (f": {trace.error}" if trace.error else ""))


# --------------------------------------------------------------------------
# data


@main.group()
def data() -> None:
    """Dataset synthesis, filtering and conversion."""


@data.command("optimize")
@click.argument("draft_path")
@click.option("--tools", "tools_path", help="Tool configuration JSON.")
@click.option("--script", "script_path", help="Scripted planner replies.")
@click.option("--max-repairs", default=2, show_default=True, help="Repair rounds after the first attempt.")
@click.option("--id", "routine_id", default="", help="routine_id for the result.")
@click.option("--title", default="", help="Title for the result.")
@click.option("--language", default="English", show_default=True, help="Language the planner is asked to write in.")
@click.option("--out", type=click.Path(dir_okay=False), help="Output file (default: stdout).")
@click.pass_obj
def data_optimize(cfg: Config, draft_path, tools_path, script_path, max_repairs, routine_id, title, language, out) -> None:
    """Turn a process draft into a validated routine via a planner model."""
    draft = _read(draft_path).strip()
    reg = load_tools(tools_path or cfg.tools_path)
    planner = ScriptedClient(load_script(script_path)) if script_path else _live_client(cfg)
    try:
        r = optimize_routine(draft, reg, planner, max_repairs, routine_id=routine_id, title=title, language=language)
    except RoutineFlowError as exc:
        findings = "\n".join(getattr(exc, "findings", []))
        raise OperationError(f"{exc}\n{findings}".rstrip()) from None
    _write(out, json.dumps(r.to_dict(), ensure_ascii=False, indent=2) + "\n")


@data.command("filter")
@click.argument("corpus_path")
@click.option("--step-cap", default=8, show_default=True, help="Maximum tool calls a record may contain.")
@click.option("--out", type=click.Path(dir_okay=False), help="Surviving records, JSONL (default: stdout).")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), help="Per-stage counts, JSON.")
def data_filter(corpus_path, step_cap, out, report_path) -> None:
    """Routine-text, summary-removal and length/structure filters over JSONL records."""
    text = _read(corpus_path)
    records = _guard(corpus_path, lambda: [DatasetRecord.from_dict(d) for d in read_jsonl(text)])
    kept, report = filter_dataset(records, step_cap)
    _write(out, write_jsonl(r.to_dict() for r in kept))
    report_text = json.dumps(report.to_dict(), indent=2) + "\n"
    if report_path:
        _write(report_path, report_text)
    if out:
        click.echo(report_text, nl=False)


@data.command("decompose")
@click.argument("traces_path")
@click.option("--seed", type=int, help="Tool-order shuffle seed (omit to keep order).")
@click.option("--tools", "tools_path", help="Tool configuration (supplies free-text markers).")
@click.option("--out", type=click.Path(dir_okay=False), help="Samples file (default: stdout).")
@click.pass_obj
def data_decompose(cfg: Config, traces_path, seed, tools_path, out) -> None:
    """Split finished traces into per-step eval samples."""
    traces = load_traces(traces_path)
    tools_path = tools_path or cfg.tools_path
    free = load_tools(tools_path).free_text_params() if tools_path else {}
    samples = []
    for n, t in enumerate(traces, start=1):
        if not t.finished:
            log.warning("skipping trace %d (%s)", n, t.status)
            continue
        samples.extend(decompose_trace(t, seed, free, trace_id=f"t{n}"))
    _write(out, dump_samples(samples) + "\n")
    if out:
        click.echo(f"{len(samples)} samples from {len(traces)} traces")


@data.command("expand")
@click.argument("templates_path")
@click.argument("entities_path")
@click.option("--out", type=click.Path(dir_okay=False), help="Queries file, JSON (default: stdout).")
def data_expand(templates_path, entities_path, out) -> None:
    """Fill query templates with every combination of entity values."""
    templates = _json(templates_path)
    entities = _json(entities_path)
    try:
        queries = expand_query_templates(templates, entities)
    except RoutineFlowError as exc:
        raise OperationError(str(exc)) from None
    _write(out, json.dumps(queries, ensure_ascii=False, indent=2) + "\n")
    if out:
        click.echo(f"{len(queries)} queries")


@data.command("distill")
@click.argument("queries_path")
@click.option("--routine", "routine_path", required=True, help="Routine JSON file to follow.")
@click.option("--tools", "tools_path", help="Tool configuration JSON.")
@click.option("--script", "script_path", help="Scripted teacher outputs, consumed across all queries in order.")
@click.option("--seed", type=int, help="Tool-order seed for prompts.")
@click.option("--out", type=click.Path(dir_okay=False), help="Kept traces, JSONL.")
@click.option("--rejections", type=click.Path(dir_okay=False), help="Rejection log, JSON.")
@click.pass_obj
def data_distill(cfg: Config, queries_path, routine_path, tools_path, script_path, seed, out, rejections) -> None:
    """Run a teacher under a routine and keep only traces that follow it."""
    queries = _json(queries_path)
    r = load_routine(routine_path)
    reg = load_tools(tools_path or cfg.tools_path)
    sess = _session(cfg, seed, None, None, ())
    teacher = ScriptedClient(load_script(script_path)) if script_path else _live_client(cfg)
    try:
        result = distill(queries, r, teacher, reg, sess)
    except RoutineFlowError as exc:
        raise OperationError(str(exc)) from None
    _write(out, write_jsonl(t.to_dict() for t in result.kept))
    if rejections:
        _write(rejections, json.dumps(result.rejected, ensure_ascii=False, indent=2) + "\n")
    if out:
        click.echo(f"kept {len(result.kept)}, rejected {len(result.rejected)}, {result.n_calls} calls")


@data.command("emit")
@click.argument("traces_path")
@click.option("--routine", "routine_path", required=True, help="Routine JSON file the traces followed.")
@click.option("--tools", "tools_path", help="Tool configuration JSON.")
@click.option("--seed", type=int, help="Tool-order seed for the tools field.")
@click.option("--include-final-observation", is_flag=True, help="Keep the last tool's observation as a final turn.")
@click.option("--out", type=click.Path(dir_okay=False), help="Records, JSONL (default: stdout).")
@click.pass_obj
def data_emit(cfg: Config, traces_path, routine_path, tools_path, seed, include_final_observation, out) -> None:
    """Convert finished traces to ShareGPT records (JSONL)."""
    traces = load_traces(traces_path)
    r = load_routine(routine_path)
    reg = load_tools(tools_path or cfg.tools_path)
    sess = _session(cfg, seed, None, None, ())
    records = [
        emit_sharegpt(t, r, reg, sess, include_final_observation=include_final_observation).to_dict()
        for t in traces
        if t.finished
    ]
    _write(out, write_jsonl(records))


# --------------------------------------------------------------------------
# eval


@main.group("eval")
def eval_() -> None:
    """Judge tool-call outputs and build test configurations."""


@eval_.command("variant")
@click.argument("samples_path")
@click.option("--library", "library_path", help="Routine library (default: config [paths] library).")
@click.option("--variant", "variant_text", required=True, help="no-routine|linear|branching|with-io|without-tools|multi:K")
@click.option("--seed", type=int, help="Shuffle seed for multi:K (default: config [seeds] shuffle).")
@click.option("--out", type=click.Path(dir_okay=False), help="Samples file (default: stdout).")
@click.pass_obj
def eval_variant(cfg: Config, samples_path, library_path, variant_text, seed, out) -> None:
    """Rewrite the routine section of every sample."""
    samples = _guard(samples_path, lambda: load_samples(_read(samples_path)))
    variant = _guard("--variant", lambda: ScenarioVariant.parse(variant_text))
    library_path = library_path or cfg.library_path
    lib = _guard(library_path, lambda: RoutineLibrary.load(library_path)) if library_path else RoutineLibrary()
    seed = cfg.shuffle_seed if seed is None else seed
    try:
        rewritten = [make_variant(s, lib, variant, seed + i) for i, s in enumerate(samples)]
    except RoutineFlowError as exc:
        raise OperationError(str(exc)) from None
    _write(out, dump_samples(rewritten) + "\n")


@eval_.command("run")
@click.argument("samples_path")
@click.option("--script", "script_path", help="JSON array of outputs aligned with the samples.")
@click.option("--jobs", default=1, show_default=True, help="Parallel model calls.")
@click.option("--verdicts", "verdicts_path", type=click.Path(dir_okay=False), help="Per-sample verdict log.")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), help="Metrics report JSON.")
@click.pass_obj
def eval_run(cfg: Config, samples_path, script_path, jobs, verdicts_path, report_path) -> None:
    """Query the model once per sample, judge and aggregate."""
    samples = _guard(samples_path, lambda: load_samples(_read(samples_path)))
    client = SampleScriptClient(samples, load_script(script_path)) if script_path else _live_client(cfg)
    report, entries = evaluate_run(samples, client, jobs)
    if verdicts_path:
        _write(verdicts_path, json.dumps(entries, ensure_ascii=False, indent=2) + "\n")
    if report_path:
        _write(report_path, json.dumps(report.to_dict(), indent=2) + "\n")
    click.echo(report.table())


@eval_.command("report")
@click.argument("verdicts_path")
@click.option("--out", type=click.Path(dir_okay=False), help="Metrics report JSON.")
def eval_report(verdicts_path, out) -> None:
    """Re-aggregate a verdict log."""
    entries = _json(verdicts_path)
    report = _guard(verdicts_path, lambda: report_from_log(entries))
    if out:
        _write(out, json.dumps(report.to_dict(), indent=2) + "\n")
    click.echo(report.table())


if __name__ == "__main__":
    main()
