"""Shared fixture builders for the test suite."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from hypothesis import strategies as st

from routineflow.pipeline import DatasetRecord
from routineflow.routine import Routine, Step, StepKind, routine_from_steps
from routineflow.tools import ParamSpec, ToolCall, ToolRegistry, ToolSpec, format_tool_call, load_tool_config

FIXTURES = Path(__file__).parent / "fixtures"

HANDBOOK_QUERY = (
    'Hi, I need to download the "Employee Handbook 2023" PDF from our company\'s internal HR portal. '
    "Once I have it, I need to check if there are any updates in the handbook based on the latest "
    "announcements from the HR portal. Can you assist me with this?"
)


def fixture_text(name: str) -> str:
    return (FIXTURES / name).read_text(encoding="utf-8")


def fixture_json(name: str) -> Any:
    return json.loads(fixture_text(name))


def handbook_registry() -> ToolRegistry:
    return load_tool_config(FIXTURES / "handbook_tools.json")


def handbook_script() -> list[str]:
    return fixture_json("handbook_script.json")


def golden_handbook_nl() -> str:
    text = fixture_text("handbook_nl.txt")
    return text.split("<routines>\n", 1)[1].rsplit("\n</routines>", 1)[0]


# --------------------------------------------------------------------------
# HR mock catalog: 25 tools

_HR_TOOLS: list[tuple[str, str, list[tuple[str, str, bool, bool]]]] = [
    ("get_employee_profile", "Look up an employee record.", [("user_id", "string", True, False)]),
    ("get_leave_balance", "Remaining leave days by type.", [("user_id", "string", True, False), ("leave_type", "string", False, False)]),
    ("submit_leave_request", "File a leave application.", [("user_id", "string", True, False), ("days", "integer", True, False), ("reason", "string", False, True)]),
    ("notify_manager", "Message the line manager.", [("user_id", "string", True, False), ("message", "string", True, True)]),
    ("get_leave_policy", "Company leave rules.", [("leave_type", "string", True, False)]),
    ("summarize_result", "Summarize findings for the user.", [("content", "string", True, True)]),
    ("get_payslip", "Payslip for a month.", [("user_id", "string", True, False), ("month", "string", True, False)]),
    ("get_salary_structure", "Salary components for a grade.", [("grade", "string", True, False)]),
    ("get_attendance_records", "Clock-in records for a month.", [("user_id", "string", True, False), ("month", "string", True, False)]),
    ("get_overtime_records", "Overtime hours for a month.", [("user_id", "string", True, False), ("month", "string", True, False)]),
    ("calculate_overtime_pay", "Pay owed for overtime hours.", [("hours", "number", True, False), ("rate", "number", False, False)]),
    ("get_training_catalog", "Available training courses.", [("topic", "string", False, False)]),
    ("enroll_training", "Enroll in a course.", [("user_id", "string", True, False), ("course_id", "string", True, False)]),
    ("get_benefits_plan", "Current benefits plan.", [("user_id", "string", True, False)]),
    ("update_benefits_enrollment", "Change benefits options.", [("user_id", "string", True, False), ("plan_id", "string", True, False)]),
    ("get_expense_policy", "Expense reimbursement rules.", [("category", "string", True, False)]),
    ("submit_expense_claim", "File an expense claim.", [("user_id", "string", True, False), ("amount", "number", True, False), ("note", "string", False, True)]),
    ("get_approval_status", "Status of a pending approval.", [("request_id", "string", True, False)]),
    ("search_job_openings", "Internal job postings.", [("keyword", "string", True, False)]),
    ("submit_referral", "Refer a candidate.", [("job_id", "string", True, False), ("candidate_name", "string", True, False)]),
    ("get_org_chart", "Reporting lines of a department.", [("department", "string", True, False)]),
    ("book_meeting_room", "Reserve a meeting room.", [("room", "string", True, False), ("time", "string", True, False)]),
    ("get_holiday_calendar", "Public holidays for a year.", [("year", "integer", True, False)]),
    ("create_it_ticket", "Open an IT support ticket.", [("user_id", "string", True, False), ("issue", "string", True, True)]),
    ("get_onboarding_checklist", "New-hire checklist.", [("user_id", "string", True, False)]),
]


def hr_specs() -> list[ToolSpec]:
    return [
        ToolSpec(name, desc, tuple(ParamSpec(p, t, f"The {p}.", req, free) for p, t, req, free in params))
        for name, desc, params in _HR_TOOLS
    ]


def hr_registry() -> ToolRegistry:
    reg = ToolRegistry()
    for spec in hr_specs():
        reg.register(spec, lambda args, _n=spec.name: {"tool": _n, "arguments": args})
    return reg


# --------------------------------------------------------------------------
# routine builders

def build_routine(routine_id: str, title: str, description: str, plan: list[tuple]) -> Routine:
    """``plan`` items: ("node"|"finish", name, desc, tool) or
    ("branch", name, [[(name, desc, tool), ...], ...])."""
    steps: list[Step] = []
    for n, item in enumerate(plan, start=1):
        if item[0] == "branch":
            steps.append(Step(str(n), item[1], kind=StepKind.BRANCH))
            for b, group in enumerate(item[2], start=1):
                for i, (name, desc, tool) in enumerate(group, start=1):
                    steps.append(Step(f"{n}-{b}_{i}", name, desc, StepKind.BRANCHNODE, tool))
        else:
            steps.append(Step(str(n), item[1], item[2], StepKind(item[0]), item[3]))
    return routine_from_steps(steps, routine_id, title, description)


_LIBRARY_PLANS: list[tuple[str, str, str, list[tuple]]] = [
    ("leave", "Leave application", "apply for annual leave and notify the manager", [
        ("node", "Identify employee", "Look up the requesting employee's record", "get_employee_profile"),
        ("node", "Check balance", "Query the remaining annual leave balance", "get_leave_balance"),
        ("branch", "Balance decision", [
            [("Submit request", "If the balance covers the request, submit the leave application", "submit_leave_request"),
             ("Notify manager", "Send the pending approval to the line manager", "notify_manager")],
            [("Explain shortfall", "If the balance is insufficient, look up unpaid leave rules", "get_leave_policy")],
        ]),
        ("finish", "Summarize", "Summarize the outcome for the employee", "summarize_result"),
    ]),
    ("payslip", "Payslip query", "explain a monthly payslip and salary structure", [
        ("node", "Identify employee", "Look up the employee grade", "get_employee_profile"),
        ("node", "Fetch payslip", "Retrieve the payslip for the requested month", "get_payslip"),
        ("node", "Salary rules", "Retrieve the salary structure for the grade", "get_salary_structure"),
        ("finish", "Explain", "Explain each payslip line", "summarize_result"),
    ]),
    ("overtime", "Overtime pay", "check overtime hours and compute overtime pay", [
        ("node", "Attendance", "Retrieve attendance for the month", "get_attendance_records"),
        ("node", "Overtime hours", "Retrieve recorded overtime hours", "get_overtime_records"),
        ("branch", "Hours decision", [
            [("Compute pay", "If overtime hours are recorded, compute the overtime pay", "calculate_overtime_pay")],
            [("Open ticket", "If no overtime is recorded, open a ticket to correct the records", "create_it_ticket")],
        ]),
        ("finish", "Report", "Report the result", "summarize_result"),
    ]),
    ("training", "Training enrollment", "find a training course and enroll the employee", [
        ("node", "Browse catalog", "List courses on the requested topic", "get_training_catalog"),
        ("node", "Enroll", "Enroll the employee in the chosen course", "enroll_training"),
        ("finish", "Confirm", "Confirm the enrollment", "summarize_result"),
    ]),
    ("benefits", "Benefits change", "review and update the benefits plan enrollment", [
        ("node", "Current plan", "Retrieve the current benefits plan", "get_benefits_plan"),
        ("branch", "Eligibility", [
            [("Update plan", "If the employee is eligible, update the enrollment", "update_benefits_enrollment")],
            [("Escalate", "If not eligible, ask the manager for an exception", "notify_manager")],
        ]),
        ("finish", "Summarize", "Summarize the benefits change", "summarize_result"),
    ]),
    ("expense", "Expense claim", "submit an expense reimbursement claim", [
        ("node", "Policy", "Look up the expense policy for the category", "get_expense_policy"),
        ("node", "Submit claim", "File the expense claim", "submit_expense_claim"),
        ("node", "Status", "Check the approval status of the claim", "get_approval_status"),
        ("finish", "Report", "Report the claim status", "summarize_result"),
    ]),
    ("referral", "Job referral", "search internal job openings and refer a candidate", [
        ("node", "Search", "Search the internal job openings", "search_job_openings"),
        ("node", "Refer", "Submit the candidate referral", "submit_referral"),
        ("finish", "Confirm", "Confirm the referral", "summarize_result"),
    ]),
    ("orgchart", "Org chart", "show the reporting lines of a department", [
        ("node", "Profile", "Look up the employee department", "get_employee_profile"),
        ("node", "Org chart", "Retrieve the reporting lines", "get_org_chart"),
        ("finish", "Explain", "Explain the reporting lines", "summarize_result"),
    ]),
    ("meeting", "Meeting booking", "book a meeting room avoiding public holidays", [
        ("node", "Holidays", "Check the holiday calendar", "get_holiday_calendar"),
        ("node", "Book", "Reserve the meeting room", "book_meeting_room"),
        ("finish", "Confirm", "Confirm the booking", "summarize_result"),
    ]),
    ("onboarding", "Onboarding", "walk a new hire through the onboarding checklist", [
        ("node", "Checklist", "Retrieve the onboarding checklist", "get_onboarding_checklist"),
        ("node", "IT setup", "Open an IT ticket for equipment", "create_it_ticket"),
        ("finish", "Welcome", "Summarize next steps for the new hire", "summarize_result"),
    ]),
]


def library_routines() -> list[Routine]:
    """Ten HR routines; the first seven hold the three two-branch ones."""
    return [build_routine(rid, title, desc, plan) for rid, title, desc, plan in _LIBRARY_PLANS]


def seven_routine_library() -> list[Routine]:
    return library_routines()[:7]


def _generated_routine(i: int) -> Routine:
    names = [t[0] for t in _HR_TOOLS]
    tool = lambda k: names[(i * 7 + k) % len(names)]  # noqa: E731
    plan: list[tuple] = [("node", f"Step {k}", f"Generated step {k} of routine {i}", tool(k)) for k in range(1, 2 + i % 3)]
    if i % 2:
        groups = [
            [(f"Path {b} step {s}", f"If case {b} holds, do part {s}", tool(10 + b + s)) for s in range(1, 1 + (b + i) % 2 + 1)]
            for b in range(1, 2 + i % 3)
        ]
        plan.append(("branch", "Decision", groups))
    plan.append(("finish", "Wrap up", "Summarize the outcome", "summarize_result"))
    return build_routine(f"gen{i}", f"Generated {i}", f"generated routine number {i}", plan)


def routine_corpus() -> list[Routine]:
    """Twenty-two routines mixing linear and branching shapes."""
    from routineflow.routine import parse_routine

    fixed = [
        parse_routine(fixture_text("handbook.json"), routine_id="handbook"),
        parse_routine(fixture_text("leave_branching.json"), routine_id="leave_fixture"),
    ]
    return fixed + library_routines() + [_generated_routine(i) for i in range(10)]


# --------------------------------------------------------------------------
# hypothesis strategy

_TEXT = st.text(alphabet="abcdefghij klmnop,QRS:-'", min_size=1, max_size=24).map(str.strip).filter(bool)
_TOOL = st.sampled_from([t[0] for t in _HR_TOOLS])


@st.composite
def routines(draw) -> Routine:
    plan: list[tuple] = []
    n_main = draw(st.integers(min_value=0, max_value=4))
    for k in range(n_main):
        if draw(st.booleans()) and draw(st.booleans()):
            groups = draw(
                st.lists(
                    st.lists(st.tuples(_TEXT, _TEXT, _TOOL), min_size=1, max_size=3),
                    min_size=1,
                    max_size=3,
                )
            )
            plan.append(("branch", draw(_TEXT), groups))
        else:
            plan.append(("node", draw(_TEXT), draw(_TEXT), draw(_TOOL)))
    plan.append(("finish", draw(_TEXT), draw(_TEXT), draw(_TOOL)))
    return build_routine("r", "", "", plan)


# --------------------------------------------------------------------------
# filter corpus

def _system_with(block: str | None) -> str:
    if block is None:
        return "You are an HR assistant.\n\n# Tools\n<tools>\n[]\n</tools>"
    return f"You are an HR assistant.\n\n# Routine\n<routines>\n{block}\n</routines>\n\n# Variables\n<variables>\n</variables>"


def _record(n_calls: int, *, block: str | None = "default", nested: bool = False, prose: bool = False) -> DatasetRecord:
    if block == "default":
        block = golden_handbook_nl()
    conv = [{"from": "human", "value": f"task with {n_calls} calls"}]
    for i in range(n_calls):
        args: dict[str, Any] = {"user_id": "u1", "index": i}
        if nested and i == 0:
            args["filters"] = {"month": "2024-05"}
        conv.append({"from": "function_call", "value": json.dumps({"name": "get_payslip", "arguments": args})})
        conv.append({"from": "observation", "value": json.dumps({"ok": True, "i": i})})
    if prose:
        conv.append({"from": "gpt", "value": "Here is a summary of everything I did."})
    return DatasetRecord(conv, _system_with(block), "[]")


def filter_corpus() -> list[DatasetRecord]:
    """Twenty records: 3 with an absent, blank or zero-step routine block, 2 with nine calls,
    1 with a nested argument, 4 ending in prose, 1 with exactly 8 calls and
    9 plain records. Expected: 14 kept, counts (3, 4, 3)."""
    recs = [
        _record(3, block=None),
        _record(3, block=""),
        _record(3, block="[]"),
        _record(9),
        _record(9),
        _record(4, nested=True),
        _record(2, prose=True),
        _record(3, prose=True),
        _record(4, prose=True),
        _record(5, prose=True),
        _record(8),
    ]
    recs += [_record(1 + i % 7) for i in range(9)]
    return recs


def call_text(name: str, **arguments: Any) -> str:
    return format_tool_call(ToolCall(name, arguments))


# --------------------------------------------------------------------------
# judge cases

def _sample(tools: list[ToolSpec], truth: ToolCall, free_text: tuple[str, ...] = ()):
    from routineflow.evaluator import EvalSample
    from routineflow.tools import serialize_tools

    listed = serialize_tools(tools)
    return EvalSample(
        system_prompt=f"You are an HR assistant.\n\n# Tools\n<tools>\n{listed}\n</tools>",
        history=[{"role": "user", "content": "help me"}],
        tools=listed,
        ground_truth=truth,
        free_text_params=list(free_text),
        sample_id=truth.name,
    )


def judge_samples() -> dict[str, Any]:
    hb = handbook_registry().specs
    hr = hr_specs()
    return {
        "read": _sample(hb, ToolCall("read_pdf", {"file_path": "/local/path/employee-handbook-2023.pdf"})),
        "compare": _sample(hb, ToolCall("compare_texts", {"text1": "user need: query", "text2": "latest announcements"}), ("text1", "text2")),
        "balance": _sample(hr, ToolCall("get_leave_balance", {"user_id": "U1", "leave_type": "annual"})),
        "balance_bare": _sample(hr, ToolCall("get_leave_balance", {"user_id": "U1"})),
        "overtime": _sample(hr, ToolCall("calculate_overtime_pay", {"hours": 1})),
    }


def _c(name: str, **args: Any) -> str:
    return call_text(name, **args)


PDF = "/local/path/employee-handbook-2023.pdf"

# (case id, sample key, model output, (structural, tool, params, subcategories))
JUDGE_CASES: list[tuple[str, str, str, tuple]] = [
    ("exact-call", "read", _c("read_pdf", file_path=PDF), (True, True, True, ())),
    ("prose", "read", "Sure, I will now read the PDF.", (False, None, None, ("natural-language-output",))),
    ("unbalanced-brace", "read", '<tool_call>{"name": "read_pdf", "arguments": {"file_path": "x"}</tool_call>', (False, None, None, ("missing-brackets/punctuation",))),
    ("unterminated-span", "read", '<tool_call>{"name": "read_pdf", "arguments": {}}', (False, None, None, ("missing-brackets/punctuation",))),
    ("bad-shape", "read", '<tool_call>{"tool": "read_pdf"}</tool_call>', (False, None, None, ("missing-brackets/punctuation",))),
    ("two-calls", "read", _c("read_pdf", file_path=PDF) + _c("read_pdf", file_path=PDF), (True, False, None, ("wrong-call-count",))),
    ("nonexistent-tool", "read", _c("open_pdf", file_path=PDF), (True, False, None, ("nonexistent-tool",))),
    ("wrong-tool", "read", _c("download_file", url="u", destination_path=PDF), (True, False, None, ("wrong-tool",))),
    ("wrong-value", "read", _c("read_pdf", file_path="/tmp/other.pdf"), (True, True, False, ("wrong-param-value",))),
    ("hallucinated-param", "read", _c("read_pdf", file_path=PDF, mode="fast"), (True, True, False, ("hallucinated-param",))),
    ("missing-required", "read", _c("read_pdf"), (True, True, False, ("missing-required-param",))),
    ("wrong-type", "read", _c("read_pdf", file_path=5), (True, True, False, ("wrong-param-type",))),
    ("free-text-paraphrase", "compare", _c("compare_texts", text1="user need-query", text2="the announcements"), (True, True, True, ())),
    ("free-text-plus-extra", "compare", _c("compare_texts", text1="user need-query", text2="x", mode="diff"), (True, True, False, ("hallucinated-param",))),
    ("free-text-missing", "compare", _c("compare_texts", text1="user need-query"), (True, True, False, ("missing-required-param",))),
    ("free-text-wrong-type", "compare", _c("compare_texts", text1=7, text2="x"), (True, True, False, ("wrong-param-type",))),
    ("free-text-empty", "compare", _c("compare_texts", text1="", text2="x"), (True, True, True, ())),
    ("optional-absent", "balance", _c("get_leave_balance", user_id="U1"), (True, True, False, ("wrong-param-value",))),
    ("optional-extra", "balance_bare", _c("get_leave_balance", user_id="U1", leave_type="sick"), (True, True, False, ("wrong-param-value",))),
    ("numeric-canonical", "overtime", _c("calculate_overtime_pay", hours=1.0), (True, True, True, ())),
]


def verdict_fixture_9_6_6() -> list:
    """Ten verdicts: 9 structural passes, 6 of them tool passes, all 6 param passes."""
    from routineflow.evaluator import judge

    samples = judge_samples()
    outputs = [("read", _c("read_pdf", file_path=PDF))] * 6
    outputs += [("read", _c("download_file", url="u", destination_path=PDF))] * 2
    outputs += [("read", _c("open_pdf", file_path=PDF))]
    outputs += [("read", "I cannot do that.")]
    return [judge(out, samples[key]) for key, out in outputs]


# --------------------------------------------------------------------------
# traces and samples

LEAVE_SCRIPTS = {
    1: [
        ("get_employee_profile", {"user_id": "U1"}),
        ("get_leave_balance", {"user_id": "U1"}),
        ("submit_leave_request", {"user_id": "U1", "days": 3, "reason": "family trip"}),
        ("notify_manager", {"user_id": "U1", "message": "Leave request pending your approval."}),
        ("summarize_result", {"content": "Request submitted and manager notified."}),
    ],
    2: [
        ("get_employee_profile", {"user_id": "U1"}),
        ("get_leave_balance", {"user_id": "U1"}),
        ("get_leave_policy", {"leave_type": "annual"}),
        ("summarize_result", {"content": "Not enough balance; unpaid leave is possible."}),
    ],
}


def leave_script(branch: int) -> list[str]:
    return [call_text(name, **args) for name, args in LEAVE_SCRIPTS[branch]]


def library_leave_trace(branch: int, query: str = "I want three days of annual leave"):
    from routineflow.memory import RoutineLibrary
    from routineflow.runtime import ScriptedClient, run_task

    lib = RoutineLibrary(library_routines())
    return run_task(query, [lib.get("leave")], ScriptedClient(leave_script(branch)), hr_registry())


def handbook_trace(query: str = HANDBOOK_QUERY):
    from routineflow.routine import parse_routine
    from routineflow.runtime import ScriptedClient, run_task

    r = parse_routine(fixture_text("handbook.json"), routine_id="handbook")
    return run_task(query, [r], ScriptedClient(handbook_script()), handbook_registry())


def twenty_samples():
    """Five handbook traces with distinct queries, decomposed: 20 samples."""
    from routineflow.pipeline import decompose_trace

    samples = []
    for n in range(5):
        t = handbook_trace(f"{HANDBOOK_QUERY} (request {n})")
        samples += decompose_trace(t, free_text=handbook_registry().free_text_params(), trace_id=f"t{n}")
    return samples


# --------------------------------------------------------------------------
# acceptance reporting (printed by conftest at the end of the run)

ACCEPTANCE_LINES: list[str] = []
