"""Guarded deployment of generated network programs.

Programs arrive in a deliberately tiny DSL (one instruction per line, `#`
comments; see docs/dsl.md) so they can be interpreted under a budget instead
of executed as code. Three mechanisms gate the path from generated text to a
live configuration change:

* sandbox runs interpret the program against a disposable copy of the world
  and check named invariants; the live state is never touched,
* deploys require a recorded Accepted verdict and respect human-in-the-loop
  tickets; every deploy snapshots first so rollback restores the prior
  configuration exactly,
* consensus across independently generated candidates compares structural
  hashes; anything short of a strict majority escalates to a ticket.

Rejections and escalations feed a prompt-refinement envelope back to the
authoring planner's feedback topic, closing the loop.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Callable

from .errors import (
    DeployWithoutVerdict,
    ExecutionFailed,
    TicketClosed,
    UnknownDeployment,
    UnknownTicket,
)
from .fabric import KIND_PROMPT, AuditOp, Fabric
from .simnet import SimWorld, WorldState

DEFAULT_INSTRUCTION_BUDGET = 10_000

_IDENT_RE = re.compile(r"^[a-z0-9][a-z0-9._-]*$")

# opcode -> (identifier argument count, value argument count)
_SHAPES = {"set": (2, 1), "scale": (2, 1), "limit": (2, 2), "reroute": (2, 1)}


class ProgramSyntaxError(Exception):
    """Raised by parse_program; kind is 'ParseError' or 'IllegalInstruction'."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _ExecError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass(frozen=True)
class Instruction:
    op: str
    idents: tuple[str, ...]
    values: tuple[Fraction, ...]

    def render(self) -> str:
        parts = [self.op, *self.idents, *(str(v) for v in self.values)]
        return " ".join(parts)


def parse_program(source: str) -> list[Instruction]:
    """Parse DSL text; identifiers are case-folded for structural stability."""
    instructions = []
    for line_no, raw in enumerate(source.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        op = tokens[0].lower()
        if op not in _SHAPES:
            raise ProgramSyntaxError(
                "IllegalInstruction", f"line {line_no}: unknown instruction {tokens[0]!r}"
            )
        n_idents, n_values = _SHAPES[op]
        if len(tokens) != 1 + n_idents + n_values:
            raise ProgramSyntaxError(
                "ParseError",
                f"line {line_no}: {op} takes {n_idents + n_values} arguments",
            )
        idents = tuple(t.lower() for t in tokens[1 : 1 + n_idents])
        for ident in idents:
            if not _IDENT_RE.match(ident):
                raise ProgramSyntaxError(
                    "ParseError", f"line {line_no}: bad identifier {ident!r}"
                )
        values = []
        for tok in tokens[1 + n_idents :]:
            try:
                values.append(Fraction(tok))
            except (ValueError, ZeroDivisionError):
                raise ProgramSyntaxError(
                    "ParseError", f"line {line_no}: bad value {tok!r}"
                )
        instructions.append(Instruction(op, idents, tuple(values)))
    return instructions


def structural_hash(source: str) -> str:
    """Hash of the parsed, canonically rendered program.

    Formatting, comments, and identifier case never affect the hash; programs
    that do not parse hash by their failure kind plus raw text.
    """
    try:
        canonical = "\n".join(i.render() for i in parse_program(source))
    except ProgramSyntaxError as exc:
        canonical = f"!{exc.kind}\n{source}"
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _execute(instructions: list[Instruction], state: WorldState, budget: int) -> None:
    executed = 0
    for ins in instructions:
        executed += 1
        if executed > budget:
            raise _ExecError("Timeout", f"instruction budget {budget} exhausted")
        try:
            if ins.op == "set":
                state.set_knob(ins.idents[0], ins.idents[1], ins.values[0])
            elif ins.op == "scale":
                current = state.get_knob(ins.idents[0], ins.idents[1])
                state.set_knob(ins.idents[0], ins.idents[1], current * ins.values[0])
            elif ins.op == "limit":
                current = state.get_knob(ins.idents[0], ins.idents[1])
                lo, hi = ins.values
                state.set_knob(ins.idents[0], ins.idents[1], max(lo, min(hi, current)))
            elif ins.op == "reroute":
                state.shift_load(ins.idents[0], ins.idents[1], ins.values[0])
        except KeyError as exc:
            raise _ExecError("IllegalInstruction", str(exc))


@dataclass(frozen=True)
class GuardedProgram:
    """A candidate change expressed in the restricted DSL."""

    program_id: str
    source: str
    declared_effects: tuple[str, ...]
    author: str


@dataclass(frozen=True)
class NamedInvariant:
    """A named predicate over post-run world state."""

    name: str
    predicate: Callable[[WorldState], bool]


def min_total_throughput(bound: Fraction | int) -> NamedInvariant:
    """Invariant: total served load strictly exceeds the bound."""
    limit = Fraction(bound)
    return NamedInvariant(
        f"total-throughput>{limit}", lambda s: s.total_throughput() > limit
    )


def knob_within(node: str, knob: str, lo: Fraction, hi: Fraction) -> NamedInvariant:
    """Invariant: a knob ends inside [lo, hi]."""

    def check(state: WorldState) -> bool:
        try:
            value = state.get_knob(node, knob)
        except KeyError:
            return False
        return lo <= value <= hi

    return NamedInvariant(f"{node}.{knob}-within[{lo},{hi}]", check)


@dataclass
class SandboxVerdict:
    """Outcome of one sandbox run."""

    program_id: str
    accepted: bool
    reason: str | None
    metric_deltas: dict[str, Fraction] = field(default_factory=dict)

    @property
    def status(self) -> str:
        return "Accepted" if self.accepted else "Rejected"


@dataclass
class DeploymentRecord:
    deployment_id: str
    program_id: str
    target: str
    config_hash_before: str
    config_hash_after: str
    status: str  # Applied | RolledBack
    snapshot_id: str


class TicketState(str, Enum):
    OPEN = "Open"
    APPROVED = "Approved"
    DENIED = "Denied"


@dataclass
class HitlTicket:
    ticket_id: str
    reason: str
    subject: str
    state: TicketState = TicketState.OPEN
    note: str = ""


class TicketBook:
    """Append-only ndjson persistence for tickets, shared with the CLI."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, event: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def load(self) -> dict[str, HitlTicket]:
        """Fold the event log into current ticket states."""
        tickets: dict[str, HitlTicket] = {}
        if not self.path.exists():
            return tickets
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                event = json.loads(line)
                if event["event"] == "open":
                    tickets[event["ticket"]] = HitlTicket(
                        ticket_id=event["ticket"],
                        reason=event["reason"],
                        subject=event["subject"],
                    )
                elif event["event"] == "resolve":
                    ticket = tickets.get(event["ticket"])
                    if ticket is not None:
                        ticket.state = TicketState(event["decision"])
                        ticket.note = event.get("note", "")
        return tickets

    def resolve(self, ticket_id: str, decision: TicketState, note: str = "") -> HitlTicket:
        """Resolve a ticket through the book alone (operator CLI path)."""
        tickets = self.load()
        if ticket_id not in tickets:
            raise UnknownTicket(f"no ticket {ticket_id!r}")
        if tickets[ticket_id].state is not TicketState.OPEN:
            raise TicketClosed(f"ticket {ticket_id} already {tickets[ticket_id].state.value}")
        self.append(
            {"event": "resolve", "ticket": ticket_id, "decision": decision.value, "note": note}
        )
        ticket = tickets[ticket_id]
        ticket.state = decision
        ticket.note = note
        return ticket


@dataclass
class ConsensusResult:
    status: str  # Consensus | Escalate
    agreement: Fraction
    chosen: GuardedProgram | None = None
    ticket: HitlTicket | None = None


class Guard:
    """Sandbox, deployment gate, consensus check, and HITL queue."""

    def __init__(
        self,
        fabric: Fabric,
        world: SimWorld,
        *,
        policy: str = "escalate-only",
        instruction_budget: int = DEFAULT_INSTRUCTION_BUDGET,
        ticket_store: str | Path | None = None,
    ):
        if policy not in ("strict", "escalate-only", "off"):
            raise ValueError(f"unknown HITL policy {policy!r}")
        self._fabric = fabric
        self._world = world
        self.policy = policy
        self.instruction_budget = instruction_budget
        self._verdicts: dict[str, SandboxVerdict] = {}
        self._deployments: dict[str, DeploymentRecord] = {}
        self._dep_count = 0
        self._book = TicketBook(ticket_store) if ticket_store else None
        self._tickets: dict[str, HitlTicket] = self._book.load() if self._book else {}
        self._ticket_count = len(self._tickets)

    # -- sandbox -----------------------------------------------------------

    def _feedback(self, program: GuardedProgram, reason: str) -> None:
        topic = f"planner/{program.author}/feedback"
        self._fabric.create_topic(topic)
        self._fabric.publish(
            self._fabric.envelope(
                topic,
                f"refine {program.program_id}: {reason}",
                kind=KIND_PROMPT,
                session=program.program_id,
                origin="guard",
                detail=f"refine {reason}",
            )
        )

    def sandbox_run(
        self,
        program: GuardedProgram,
        invariants: list[NamedInvariant] = (),
        model: WorldState | None = None,
    ) -> SandboxVerdict:
        """Interpret the program against a copy of the world and judge it.

        The live world is never written: the run works on a deep copy of
        `model` (default: current state). The verdict is recorded so deploy
        can check it later, and rejections emit planner feedback.
        """
        base = model if model is not None else self._world.state
        work = copy.deepcopy(base)
        before = work.metrics()
        reason: str | None = None
        try:
            instructions = parse_program(program.source)
        except ProgramSyntaxError as exc:
            reason = exc.kind
        else:
            try:
                _execute(instructions, work, self.instruction_budget)
            except _ExecError as exc:
                reason = exc.kind
            else:
                for invariant in invariants:
                    if not invariant.predicate(work):
                        reason = f"InvariantViolation({invariant.name})"
                        break

        if reason is None:
            after = work.metrics()
            deltas = {
                key: after.get(key, Fraction(0)) - before.get(key, Fraction(0))
                for key in sorted(set(before) | set(after))
            }
            verdict = SandboxVerdict(program.program_id, True, None, deltas)
        else:
            verdict = SandboxVerdict(program.program_id, False, reason)
        self._verdicts[program.program_id] = verdict
        self._fabric.audit(
            AuditOp.SANDBOX,
            actor=program.author,
            outcome="ok" if verdict.accepted else f"error({reason})",
        )
        if not verdict.accepted:
            self._feedback(program, reason or "rejected")
        return verdict

    def verdict_for(self, program_id: str) -> SandboxVerdict | None:
        return self._verdicts.get(program_id)

    # -- deploy / rollback ---------------------------------------------------

    def _hitl_gate(self, subject: str) -> None:
        if self.policy == "off":
            return
        subject_tickets = [t for t in self._tickets.values() if t.subject == subject]
        if any(t.state is TicketState.DENIED for t in subject_tickets):
            raise DeployWithoutVerdict(f"subject {subject!r} denied by ticket")
        if self.policy == "strict" and not any(
            t.state is TicketState.APPROVED for t in subject_tickets
        ):
            raise DeployWithoutVerdict(
                f"strict policy requires an approved ticket for {subject!r}"
            )

    def deploy(self, program: GuardedProgram, target: str) -> DeploymentRecord:
        """Apply an Accepted program to the live world, snapshotting first."""
        verdict = self._verdicts.get(program.program_id)
        if verdict is None or not verdict.accepted:
            raise DeployWithoutVerdict(
                f"no Accepted sandbox verdict recorded for {program.program_id!r}"
            )
        self._hitl_gate(program.program_id)
        snapshot_id = self._world.snapshot()
        before = self._world.config_hash()
        try:
            _execute(
                parse_program(program.source), self._world.state, self.instruction_budget
            )
        except (ProgramSyntaxError, _ExecError) as exc:
            self._world.restore(snapshot_id)
            raise ExecutionFailed(f"{program.program_id}: {exc}") from exc
        self._dep_count += 1
        record = DeploymentRecord(
            deployment_id=f"dep-{self._dep_count}",
            program_id=program.program_id,
            target=target,
            config_hash_before=before,
            config_hash_after=self._world.config_hash(),
            status="Applied",
            snapshot_id=snapshot_id,
        )
        self._deployments[record.deployment_id] = record
        self._fabric.audit(AuditOp.EXECUTE, actor=target, model_id=None)
        return record

    def rollback(self, deployment_id: str) -> DeploymentRecord:
        """Restore the pre-deploy snapshot; a record rolls back only once."""
        record = self._deployments.get(deployment_id)
        if record is None or record.status != "Applied":
            raise UnknownDeployment(f"no applied deployment {deployment_id!r}")
        self._world.restore(record.snapshot_id)
        record.status = "RolledBack"
        self._fabric.audit(AuditOp.ROLLBACK, actor=record.target)
        return record

    def deployment(self, deployment_id: str) -> DeploymentRecord | None:
        return self._deployments.get(deployment_id)

    # -- consensus -------------------------------------------------------------

    def consensus_check(self, outputs: list[GuardedProgram]) -> ConsensusResult:
        """Strict-majority agreement over structural hashes.

        Disagreement escalates: a ticket is opened (subject: the first
        candidate) and every distinct author gets refinement feedback.
        """
        if len(outputs) < 2:
            raise ValueError("consensus needs at least two candidate programs")
        hashes = [structural_hash(p.source) for p in outputs]
        counts: dict[str, int] = {}
        for h in hashes:
            counts[h] = counts.get(h, 0) + 1
        top_hash = max(counts, key=lambda h: (counts[h], -hashes.index(h)))
        agreement = Fraction(counts[top_hash], len(outputs))
        if counts[top_hash] * 2 > len(outputs):
            chosen = outputs[hashes.index(top_hash)]
            return ConsensusResult("Consensus", agreement, chosen=chosen)
        ticket = self.open_ticket("ConsensusDisagreement", outputs[0].program_id)
        for author in sorted({p.author for p in outputs}):
            exemplar = next(p for p in outputs if p.author == author)
            self._feedback(exemplar, "consensus disagreement")
        return ConsensusResult("Escalate", agreement, ticket=ticket)

    # -- human-in-the-loop -------------------------------------------------------

    def open_ticket(self, reason: str, subject: str) -> HitlTicket:
        """Queue a decision for a human operator."""
        self._ticket_count += 1
        ticket = HitlTicket(f"ticket-{self._ticket_count}", reason, subject)
        self._tickets[ticket.ticket_id] = ticket
        if self._book:
            self._book.append(
                {
                    "event": "open",
                    "ticket": ticket.ticket_id,
                    "reason": reason,
                    "subject": subject,
                }
            )
        return ticket

    def hitl_resolve(
        self, ticket_id: str, decision: str, note: str = "", resolver: str = "operator"
    ) -> HitlTicket:
        """Resolve a ticket exactly once; denial permanently blocks the subject."""
        ticket = self._tickets.get(ticket_id)
        if ticket is None:
            raise UnknownTicket(f"no ticket {ticket_id!r}")
        if ticket.state is not TicketState.OPEN:
            raise TicketClosed(f"ticket {ticket_id} already {ticket.state.value}")
        if decision not in ("approve", "deny"):
            raise ValueError(f"decision must be approve or deny, got {decision!r}")
        ticket.state = TicketState.APPROVED if decision == "approve" else TicketState.DENIED
        ticket.note = note
        if self._book:
            self._book.append(
                {
                    "event": "resolve",
                    "ticket": ticket_id,
                    "decision": ticket.state.value,
                    "note": note,
                }
            )
        self._fabric.audit(AuditOp.HITL, actor=resolver, outcome="ok")
        return ticket

    def tickets(self) -> list[HitlTicket]:
        return [self._tickets[t] for t in sorted(self._tickets)]
