"""Built-in tasks and the worker-side task registry.

Tasks are compiled in, not downloaded: each is identified by a content hash
over a small language-neutral definition document (canonical JSON, sorted
keys, sha256). A worker refuses a ticket whose advertised version differs
from its local hash, which keeps the "download if unseen" negotiation
without shipping code. Other worker implementations reproduce the same
hashes from the same documents.

A task implementation is a pure function ``fn(args, ctx) -> results`` where
``args`` is the ticket's input chunk (a list) and ``results`` is one output
per input, in order. ``ctx`` resolves declared resources and carries the
delivery attempt number.
"""

from __future__ import annotations

import hashlib
import json
import math
import traceback
from dataclasses import dataclass
from typing import Callable

from .datasets import from_f32le, labels_from_bytes, nearest_neighbor_labels
from .protocol import Blob, TaskDescriptor


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def definition_hash(doc: dict) -> str:
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


# -- built-in task semantics ----------------------------------------------------


def is_prime(candidate: int) -> bool:
    """True iff candidate has no divisor in [2, isqrt(candidate)]. Note the
    loop never runs for candidate=1, which therefore reports prime; kept
    deliberately, results are read with that convention."""
    if candidate < 1:
        raise ValueError(f"candidate must be >= 1, got {candidate}")
    for i in range(2, math.isqrt(candidate) + 1):
        if candidate % i == 0:
            return False
    return True


class TaskRefusedError(Exception):
    """Worker cannot run the task (unknown id or version mismatch)."""


class ResourceUnavailableError(Exception):
    pass


@dataclass
class TaskContext:
    """Execution environment handed to a task implementation."""

    attempt: int = 1
    resolver: Callable[[str], bytes] | None = None
    poster: Callable[[str, dict], dict] | None = None

    def resource(self, name: str) -> bytes:
        if self.resolver is None:
            raise ResourceUnavailableError(f"no resource resolver for {name!r}")
        return self.resolver(name)

    def post_json(self, path: str, payload: dict) -> dict:
        if self.poster is None:
            raise ResourceUnavailableError(f"no HTTP channel for {path!r}")
        return self.poster(path, payload)


TaskFn = Callable[[list, TaskContext], list]


class TaskRegistry:
    """task_id -> (descriptor, implementation)."""

    def __init__(self):
        self._tasks: dict[str, tuple[TaskDescriptor, TaskFn]] = {}

    def register(self, descriptor: TaskDescriptor, fn: TaskFn) -> None:
        existing = self._tasks.get(descriptor.task_id)
        if existing is not None and existing[0] != descriptor:
            raise ValueError(f"task {descriptor.task_id!r} already registered differently")
        self._tasks[descriptor.task_id] = (descriptor, fn)

    def get(self, task_id: str) -> tuple[TaskDescriptor, TaskFn] | None:
        return self._tasks.get(task_id)

    def descriptor(self, task_id: str) -> TaskDescriptor | None:
        entry = self._tasks.get(task_id)
        return entry[0] if entry else None

    def task_ids(self) -> list[str]:
        return sorted(self._tasks)

    def __contains__(self, task_id: str) -> bool:
        return task_id in self._tasks


# -- definitions ------------------------------------------------------------------
# These documents are the cross-implementation contract: the version hash is
# sha256 over their canonical JSON. Do not edit casually; a changed document
# is a new task version.

IS_PRIME_DEF = {
    "task": "is_prime",
    "input": "integer candidate >= 1",
    "output": "{is_prime: boolean}",
    "rule": "prime iff no divisor in [2, isqrt(candidate)]; candidate 1 reports true",
}

CRASH_GATE_DEF = {
    "task": "crash_gate",
    "input": "{fail_attempts: integer, value: any}",
    "output": "{value: any, attempt: integer}",
    "rule": "raise while delivery attempt <= fail_attempts, then echo value",
}

KNN_CHUNK_DEF = {
    "task": "knn_chunk",
    "input": "integer test-image index",
    "output": "{index: integer, label: integer}",
    "rule": "label of the L2-nearest training image; float64 scores; ties to lowest index",
    "resources": ["knn-meta", "knn-train-images", "knn-train-labels", "knn-test-images"],
}


def _run_is_prime(args: list, ctx: TaskContext) -> list:
    return [{"is_prime": is_prime(int(c))} for c in args]


def _run_crash_gate(args: list, ctx: TaskContext) -> list:
    out = []
    for item in args:
        if ctx.attempt <= int(item.get("fail_attempts", 0)):
            raise RuntimeError(
                f"injected failure: attempt {ctx.attempt} <= {item['fail_attempts']}"
            )
        out.append({"value": item.get("value"), "attempt": ctx.attempt})
    return out


def _run_knn_chunk(args: list, ctx: TaskContext) -> list:
    meta = json.loads(ctx.resource("knn-meta"))
    dim = int(meta["dim"])
    train = from_f32le(ctx.resource("knn-train-images"), (int(meta["train_count"]), dim))
    train_labels = labels_from_bytes(ctx.resource("knn-train-labels"))
    test = from_f32le(ctx.resource("knn-test-images"), (int(meta["test_count"]), dim))
    indices = [int(i) for i in args]
    labels = nearest_neighbor_labels(test[indices], train, train_labels)
    return [{"index": i, "label": int(lab)} for i, lab in zip(indices, labels)]


def builtin_descriptor(task_id: str, chunking: int = 1) -> TaskDescriptor:
    defs = {
        "is_prime": IS_PRIME_DEF,
        "crash_gate": CRASH_GATE_DEF,
        "knn_chunk": KNN_CHUNK_DEF,
    }
    if task_id not in defs:
        raise KeyError(f"no built-in task {task_id!r}")
    doc = defs[task_id]
    return TaskDescriptor(
        task_id=task_id,
        version=definition_hash(doc),
        resource_deps=list(doc.get("resources", [])),
        chunking=chunking,
    )


def builtin_registry(chunking: dict[str, int] | None = None) -> TaskRegistry:
    """Registry with every built-in task; per-task chunking overridable."""
    chunking = chunking or {}
    reg = TaskRegistry()
    for task_id, fn in (
        ("is_prime", _run_is_prime),
        ("crash_gate", _run_crash_gate),
        ("knn_chunk", _run_knn_chunk),
    ):
        reg.register(builtin_descriptor(task_id, chunking.get(task_id, 1)), fn)
    return reg


@dataclass
class ExecutionOutcome:
    """Either a result list or the captured failure of one execution."""

    results: list | None = None
    error_message: str = ""
    trace: str = ""

    @property
    def ok(self) -> bool:
        return self.results is not None


def execute(fn: TaskFn, args: list[Blob], ctx: TaskContext) -> ExecutionOutcome:
    """Run fn, converting any exception into a captured failure."""
    try:
        results = fn(args, ctx)
    except Exception as exc:
        return ExecutionOutcome(None, f"{type(exc).__name__}: {exc}", traceback.format_exc())
    if not isinstance(results, list) or len(results) != len(args):
        message = (
            f"task returned {type(results).__name__} of length "
            f"{len(results) if isinstance(results, list) else 'n/a'}, expected {len(args)}"
        )
        return ExecutionOutcome(None, message, "(no traceback: bad task return shape)")
    return ExecutionOutcome(results)
