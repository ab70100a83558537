"""Wire protocol and ticket/task data model shared by the coordinator and workers.

Every message is a single UTF-8 JSON document of the form

    {"kind": "<kind>", "protocol_version": 1, "body": {...}}

sent as one WebSocket text frame (or one journal line). Encoding is
deterministic: keys are sorted and optional fields set to ``None`` are
omitted, so ``encode_message`` is byte-stable for a given message. Decoding
ignores unknown fields for forward compatibility but rejects unknown kinds
and foreign protocol versions.

The full schema is documented in ``docs/wire-schema.json``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from typing import Any

PROTOCOL_VERSION = 1

# Argument/result blobs are opaque JSON values; the framework, not the
# protocol, interprets them.
Blob = Any

# Ticket lifecycle.
PENDING = "pending"
DISTRIBUTED = "distributed"
COMPLETED = "completed"
FAILED = "failed"
TICKET_STATUSES = frozenset({PENDING, DISTRIBUTED, COMPLETED, FAILED})

# Result acknowledgement outcomes.
ACCEPTED = "accepted"
DUPLICATE = "duplicate"
UNKNOWN = "unknown"

# Console / control commands.
CONTROL_COMMANDS = frozenset({"reload", "redirect", "stop"})


class ProtocolError(Exception):
    """Base class for wire-level failures."""


class EncodeError(ProtocolError):
    pass


class DecodeError(ProtocolError):
    pass


@dataclass
class TaskDescriptor:
    """A named, versioned task definition with declared resource dependencies.

    ``version`` is a content hash over the task definition; it changes iff
    the definition changes. ``chunking`` is the number of inputs bundled
    into one ticket.
    """

    task_id: str
    version: str
    resource_deps: list[str] = field(default_factory=list)
    chunking: int = 1

    def __post_init__(self) -> None:
        if not self.task_id:
            raise ValueError("task_id must be nonempty")
        if len(set(self.resource_deps)) != len(self.resource_deps):
            raise ValueError("resource_deps contains duplicates")
        if self.chunking < 1:
            raise ValueError("chunking must be a positive integer")


@dataclass
class ErrorReport:
    """A worker-side failure for one ticket, including the stack trace."""

    ticket_id: str
    worker_id: str
    message: str
    trace: str
    at: int  # timestamp ms

    def __post_init__(self) -> None:
        if not self.message:
            raise ValueError("error report message must be nonempty")


@dataclass
class Ticket:
    """One distributable task invocation.

    ``input_index`` is the position of this ticket's first argument in the
    original input list; ``args`` is the list of argument blobs for the
    chunk. ``distributions`` records every (worker_id, timestamp ms) grant,
    nondecreasing in timestamp.
    """

    ticket_id: str
    project_id: str
    task_id: str
    input_index: int
    args: list[Blob]
    created_at: int  # timestamp ms
    distributions: list[tuple[str, int]] = field(default_factory=list)
    status: str = PENDING
    result: Blob = None
    error_reports: list[ErrorReport] = field(default_factory=list)

    @property
    def last_distribution_at(self) -> int | None:
        return self.distributions[-1][1] if self.distributions else None


# ---------------------------------------------------------------------------
# Wire messages
# ---------------------------------------------------------------------------


@dataclass
class Hello:
    """Session opener. The client sends its user agent; the server replies
    with the assigned worker_id."""

    worker_id: str | None = None
    user_agent: str | None = None


@dataclass
class TicketRequest:
    pass


@dataclass
class TicketGrant:
    ticket_id: str
    project_id: str
    task_id: str
    input_index: int
    args: list[Blob]
    attempt: int = 1  # 1-based count of distributions including this grant


@dataclass
class NoTicket:
    retry_after_ms: int = 1000


@dataclass
class TaskRequest:
    task_id: str


@dataclass
class TaskPayload:
    task_id: str
    found: bool
    version: str | None = None
    resource_deps: list[str] = field(default_factory=list)
    chunking: int = 1


@dataclass
class ResultSubmit:
    ticket_id: str
    result: Blob = None


@dataclass
class ResultAck:
    ticket_id: str
    status: str = ACCEPTED  # accepted | duplicate | unknown


@dataclass
class ErrorSubmit:
    ticket_id: str
    message: str
    trace: str = ""


@dataclass
class Control:
    command: str  # reload | redirect | stop
    url: str | None = None


WireMessage = (
    Hello
    | TicketRequest
    | TicketGrant
    | NoTicket
    | TaskRequest
    | TaskPayload
    | ResultSubmit
    | ResultAck
    | ErrorSubmit
    | Control
)

_KIND_TO_CLASS = {
    "hello": Hello,
    "ticket_request": TicketRequest,
    "ticket_grant": TicketGrant,
    "no_ticket": NoTicket,
    "task_request": TaskRequest,
    "task_payload": TaskPayload,
    "result_submit": ResultSubmit,
    "result_ack": ResultAck,
    "error_submit": ErrorSubmit,
    "control": Control,
}
_CLASS_TO_KIND = {cls: kind for kind, cls in _KIND_TO_CLASS.items()}


def kind_of(msg: WireMessage) -> str:
    try:
        return _CLASS_TO_KIND[type(msg)]
    except KeyError:
        raise EncodeError(f"not a wire message: {type(msg).__name__}") from None


def _check_finite(value: Any, path: str) -> None:
    if isinstance(value, float):
        if not math.isfinite(value):
            raise EncodeError(f"non-finite number at {path}")
    elif isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise EncodeError(f"non-string key at {path}")
            _check_finite(v, f"{path}.{k}")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            _check_finite(v, f"{path}[{i}]")
    elif value is not None and not isinstance(value, (str, int, bool)):
        raise EncodeError(f"unrepresentable value at {path}: {type(value).__name__}")


def encode_message(msg: WireMessage) -> bytes:
    """Serialize a message to deterministic UTF-8 JSON bytes."""
    kind = kind_of(msg)
    body: dict[str, Any] = {}
    for f in fields(msg):
        value = getattr(msg, f.name)
        if value is None:
            continue  # omit unset optionals
        body[f.name] = value
    _check_finite(body, kind)
    payload = {"kind": kind, "protocol_version": PROTOCOL_VERSION, "body": body}
    try:
        text = json.dumps(
            payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
        )
    except (TypeError, ValueError) as exc:
        raise EncodeError(str(exc)) from exc
    return text.encode("utf-8")


def decode_message(data: bytes | str) -> WireMessage:
    """Parse one wire message.

    Unknown body fields are dropped (forward compatibility); unknown kinds,
    missing required fields, and protocol version mismatches raise
    ``DecodeError``.
    """
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"invalid UTF-8: {exc}") from exc
    try:
        payload = json.loads(data)
    except json.JSONDecodeError as exc:
        raise DecodeError(f"malformed JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise DecodeError("message must be a JSON object")

    kind = payload.get("kind")
    if not isinstance(kind, str):
        raise DecodeError("missing message kind")
    cls = _KIND_TO_CLASS.get(kind)
    if cls is None:
        raise DecodeError(f"unknown message kind: {kind!r}")

    version = payload.get("protocol_version")
    if version is None:
        raise DecodeError("missing protocol_version")
    if version != PROTOCOL_VERSION:
        raise DecodeError(f"protocol version mismatch: got {version!r}, want {PROTOCOL_VERSION}")

    body = payload.get("body", {})
    if not isinstance(body, dict):
        raise DecodeError("body must be a JSON object")

    kwargs: dict[str, Any] = {}
    for f in fields(cls):
        if f.name in body:
            kwargs[f.name] = body[f.name]
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise DecodeError(f"{kind}: missing required field ({exc})") from exc
