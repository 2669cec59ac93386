"""Variable memory (per-task stand-ins for oversized tool values) and
procedure memory (a routine library with similarity retrieval)."""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from .errors import RoutineError
from .routine import Routine, routine_from_dict

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 200
PREVIEW_CHARS = 80
KEY_RE = re.compile(r"^memory_[A-Za-z0-9_]+$")


@dataclass
class VariableStore:
    """Key -> full value map for a single task. Never shared between sessions."""

    threshold: int = DEFAULT_THRESHOLD
    entries: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")

    def __contains__(self, key: object) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def fresh_key(self, name: str) -> str:
        base = "memory_" + (re.sub(r"\W", "_", name) or "value")
        key, n = base, 1
        while key in self.entries:
            n += 1
            key = f"{base}_{n}"
        return key

    def put(self, name: str, value: Any) -> str:
        key = self.fresh_key(name)
        self.entries[key] = value
        return key

    def copy(self) -> VariableStore:
        return VariableStore(self.threshold, dict(self.entries))


def _substitute(value: Any, path: tuple[str, ...], name: str, store: VariableStore, names: dict[str, str]) -> Any:
    if isinstance(value, str):
        if len(value) > store.threshold:
            return store.put(names.get(".".join(path), name), value)
        return value
    if isinstance(value, dict):
        return {k: _substitute(v, path + (str(k),), str(k), store, names) for k, v in value.items()}
    if isinstance(value, list):
        return [_substitute(v, path + (str(i),), f"{name}_{i}", store, names) for i, v in enumerate(value)]
    return value


def compress_observation(raw: Any, store: VariableStore, field_names: dict[str, str] | None = None) -> str:
    """Swap every string leaf longer than ``store.threshold`` for a fresh
    ``memory_<field>`` key and return the JSON text the model will see.

    ``field_names`` maps dotted value paths (``"data.0.body"``) to key names,
    overriding the default of naming a leaf after its JSON field.
    """
    presented = _substitute(raw, (), "value", store, field_names or {})
    return json.dumps(presented, ensure_ascii=False)


def resolve_arguments(args: Any, store: VariableStore, warnings: list[str] | None = None) -> Any:
    """Replace string values that name a stored key with the stored value.

    Unknown ``memory_*`` strings are passed through and reported.
    """
    if isinstance(args, str):
        if args in store.entries:
            return store.entries[args]
        if KEY_RE.match(args):
            msg = f"unknown-key: {args}"
            logger.warning("argument references unknown variable %s", args)
            if warnings is not None:
                warnings.append(msg)
        return args
    if isinstance(args, dict):
        return {k: resolve_arguments(v, store, warnings) for k, v in args.items()}
    if isinstance(args, list):
        return [resolve_arguments(v, store, warnings) for v in args]
    return args


def render_variables_block(store: VariableStore) -> str:
    lines = []
    for key, value in store.entries.items():
        text = value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)
        if len(text) <= PREVIEW_CHARS:
            lines.append(f"{key} = {text}")
        else:
            lines.append(f"{key} = {text[:PREVIEW_CHARS]}… (truncated, {len(text)} chars total)")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# procedure memory

_TERM_RE = re.compile(r"\w+")

Similarity = Callable[[str, str], float]


def term_bag(text: str) -> Counter:
    return Counter(_TERM_RE.findall(text.lower()))


def cosine_similarity(a: str, b: str) -> float:
    va, vb = term_bag(a), term_bag(b)
    dot = sum(va[t] * vb[t] for t in va.keys() & vb.keys())
    if dot == 0:
        return 0.0
    return dot / (math.sqrt(sum(v * v for v in va.values())) * math.sqrt(sum(v * v for v in vb.values())))


class RoutineLibrary:
    def __init__(self, routines: Iterable[Routine] = (), similarity: Similarity = cosine_similarity):
        self.routines: list[Routine] = []
        self._ids: set[str] = set()
        self.similarity = similarity
        for r in routines:
            self.add(r)

    def add(self, routine: Routine) -> None:
        if routine.routine_id in self._ids:
            raise RoutineError(f"duplicate routine id {routine.routine_id!r}", "duplicate-routine")
        self._ids.add(routine.routine_id)
        self.routines.append(routine)

    def __len__(self) -> int:
        return len(self.routines)

    def __iter__(self):
        return iter(self.routines)

    def get(self, routine_id: str) -> Routine:
        for r in self.routines:
            if r.routine_id == routine_id:
                return r
        raise RoutineError(f"no routine {routine_id!r} in library", "unknown-routine")

    def retrieve(self, query: str, k: int = 1) -> list[tuple[Routine, float]]:
        return retrieve_routines(self, query, k)

    def to_json(self) -> str:
        return json.dumps([r.to_dict() for r in self.routines], ensure_ascii=False, indent=2)

    @classmethod
    def load(cls, path: str | Path, similarity: Similarity = cosine_similarity) -> RoutineLibrary:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, list):
            raise RoutineError("routine library file must be a JSON array", "malformed-document")
        return cls((routine_from_dict(d) for d in data), similarity)


def retrieval_text(r: Routine) -> str:
    """The description; routines without one are matched on title and step text."""
    if r.description.strip():
        return r.description
    return " ".join([r.title] + [f"{s.name} {s.description}" for s in r.steps])


def retrieve_routines(library: RoutineLibrary, query: str, k: int = 1) -> list[tuple[Routine, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    scored = [(r, library.similarity(retrieval_text(r), query)) for r in library.routines]
    scored.sort(key=lambda pair: (-pair[1], pair[0].routine_id))
    return scored[:k]
