"""Trace records and golden-file comparison.

A trace is the ordered journal of everything observable during a run: audit
records interleaved with envelope summaries, in logical-time order. Traces
serialize one record per line, pipe-separated, `-` for absent fields:

    A|<seq>|<logicalTime>|<op>|<actor>|<messageId>|<modelId>|<outcome>
    M|<logicalTime>|<topic>|<kind>|<session>|<origin-node>|<id>|<detail>

Comparison is structural: message ids in both traces are canonicalized by
order of first appearance before diffing, so id-assignment drift between
otherwise identical runs does not register as a difference.
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field

from .errors import GoldenParseError

ABSENT = "-"

_FIELD_COUNT = 8
# Field index of the message id per record shape (A: messageId, M: id).
_ID_COLUMN = {"A": 5, "M": 6}


def _render_field(value: str | int | None) -> str:
    if value is None or value == "":
        return ABSENT
    return str(value)


@dataclass(frozen=True)
class AuditEvent:
    """Audit record as it appears in a trace."""

    seq: int
    logical_time: int
    op: str
    actor: str
    message_id: str | None
    model_id: str | None
    outcome: str

    def render(self) -> str:
        """Serialize to one trace line."""
        return "|".join(
            [
                "A",
                str(self.seq),
                str(self.logical_time),
                self.op,
                self.actor,
                _render_field(self.message_id),
                _render_field(self.model_id),
                self.outcome,
            ]
        )


@dataclass(frozen=True)
class EnvelopeEvent:
    """Summary of one accepted envelope."""

    logical_time: int
    topic: str
    kind: str
    session: str
    origin: str
    message_id: str
    detail: str | None = None

    def render(self) -> str:
        """Serialize to one trace line."""
        return "|".join(
            [
                "M",
                str(self.logical_time),
                self.topic,
                self.kind,
                self.session,
                self.origin,
                self.message_id,
                _render_field(self.detail),
            ]
        )


TraceEvent = AuditEvent | EnvelopeEvent


@dataclass
class Trace:
    """Ordered journal of one run."""

    events: list[TraceEvent] = field(default_factory=list)

    def append(self, event: TraceEvent) -> None:
        self.events.append(event)

    def lines(self) -> list[str]:
        return [e.render() for e in self.events]

    def render(self) -> str:
        """Full file body, one record per line with a trailing newline."""
        body = "\n".join(self.lines())
        return body + "\n" if body else ""

    def audit_events(self) -> list[AuditEvent]:
        return [e for e in self.events if isinstance(e, AuditEvent)]

    def envelope_events(self) -> list[EnvelopeEvent]:
        return [e for e in self.events if isinstance(e, EnvelopeEvent)]


def _parse_int(raw: str, line_no: int, what: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise GoldenParseError(f"line {line_no}: non-numeric {what}: {raw!r}", line_no)


def parse_trace(text: str) -> Trace:
    """Parse a serialized trace, raising GoldenParseError on any bad line."""
    trace = Trace()
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("|")
        if len(fields) != _FIELD_COUNT:
            raise GoldenParseError(
                f"line {line_no}: expected {_FIELD_COUNT} fields, got {len(fields)}",
                line_no,
            )
        tag = fields[0]
        if tag == "A":
            trace.append(
                AuditEvent(
                    seq=_parse_int(fields[1], line_no, "seq"),
                    logical_time=_parse_int(fields[2], line_no, "logicalTime"),
                    op=fields[3],
                    actor=fields[4],
                    message_id=None if fields[5] == ABSENT else fields[5],
                    model_id=None if fields[6] == ABSENT else fields[6],
                    outcome=fields[7],
                )
            )
        elif tag == "M":
            trace.append(
                EnvelopeEvent(
                    logical_time=_parse_int(fields[1], line_no, "logicalTime"),
                    topic=fields[2],
                    kind=fields[3],
                    session=fields[4],
                    origin=fields[5],
                    message_id=fields[6],
                    detail=None if fields[7] == ABSENT else fields[7],
                )
            )
        else:
            raise GoldenParseError(f"line {line_no}: unknown record tag {tag!r}", line_no)
    return trace


def canonicalize_lines(lines: list[str]) -> list[str]:
    """Rewrite message ids as #1, #2, ... by order of first appearance."""
    mapping: dict[str, str] = {}
    out = []
    for line in lines:
        fields = line.split("|")
        column = _ID_COLUMN.get(fields[0])
        if column is not None and fields[column] != ABSENT:
            raw = fields[column]
            if raw not in mapping:
                mapping[raw] = f"#{len(mapping) + 1}"
            fields[column] = mapping[raw]
        out.append("|".join(fields))
    return out


@dataclass(frozen=True)
class DiffEntry:
    """One contiguous run of disagreement between two traces."""

    op: str  # replace | delete | insert
    position: int  # line index in the left trace where the run starts
    got: tuple[str, ...]
    want: tuple[str, ...]


@dataclass
class TraceDiff:
    """Structural difference between a produced trace and a golden one."""

    entries: list[DiffEntry] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.entries

    @property
    def size(self) -> int:
        """Number of differing lines (an inserted line counts once)."""
        return sum(max(len(e.got), len(e.want)) for e in self.entries)

    def render(self) -> str:
        """Human-readable diff body, empty string when traces match."""
        chunks = []
        for entry in self.entries:
            chunks.append(f"@ line {entry.position + 1} ({entry.op})")
            chunks.extend(f"- {line}" for line in entry.got)
            chunks.extend(f"+ {line}" for line in entry.want)
        return "\n".join(chunks)


def compare_traces(produced: Trace, golden: Trace) -> TraceDiff:
    """Structural diff after canonicalizing message ids on both sides."""
    left = canonicalize_lines(produced.lines())
    right = canonicalize_lines(golden.lines())
    matcher = difflib.SequenceMatcher(a=left, b=right, autojunk=False)
    diff = TraceDiff()
    for op, i1, i2, j1, j2 in matcher.get_opcodes():
        if op == "equal":
            continue
        diff.entries.append(
            DiffEntry(op=op, position=i1, got=tuple(left[i1:i2]), want=tuple(right[j1:j2]))
        )
    return diff
