"""Self-managing control loop over the simulated network.

One loop iteration monitors telemetry into the shared knowledge base,
analyzes windowed means against a congestion threshold, plans multiplicative
knob adjustments for congested nodes, and executes them as control envelopes.
A rollback snapshot is always taken before execution; if the expected effect
(strictly lower windowed mean on every touched node) is not observed after
the settle window, the managed configuration is restored.

All arithmetic is exact: loads, thresholds, and severities are Fractions, so
convergence counts can be checked against a symbolic oracle with no
tolerance. Severity of a congestion finding is clamp((mean - theta) /
(1 - theta), 0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .errors import ExecutionFailed, InsufficientData, NoApplicableAction
from .fabric import KIND_CONTROL, AuditOp, Fabric, MessageEnvelope, Selector, Subscription
from .simnet import ADMISSION_KNOB, SimWorld


@dataclass(frozen=True)
class KnowledgeRecord:
    """One immutable fact; source names the stage that produced it."""

    key: str
    value: object
    logical_time: int
    source: str  # monitor | analyze | plan | execute


class KnowledgeBase:
    """Append-only store shared by all loop stages."""

    def __init__(self) -> None:
        self._records: list[KnowledgeRecord] = []
        self._seen_envelopes: set[str] = set()

    def add(self, record: KnowledgeRecord) -> None:
        self._records.append(record)

    def records(self) -> tuple[KnowledgeRecord, ...]:
        return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def seen(self, envelope_id: str) -> bool:
        return envelope_id in self._seen_envelopes

    def mark_seen(self, envelope_id: str) -> None:
        self._seen_envelopes.add(envelope_id)

    def series(self, key: str, window: int) -> list:
        """Last `window` values recorded under a key, oldest first."""
        values = [r.value for r in self._records if r.key == key]
        return values[-window:]


@dataclass(frozen=True)
class Finding:
    kind: str  # congestion | none
    target: str
    severity: Fraction
    evidence: tuple[str, ...] = ()


@dataclass(frozen=True)
class ManagedAction:
    target: str
    knob: str
    value: Fraction

    def render(self) -> str:
        return f"{self.target}.{self.knob}={self.value}"


@dataclass(frozen=True)
class AdaptationPlan:
    plan_id: str
    actions: tuple[ManagedAction, ...]
    expected_effect: str
    rollback_ref: str


@dataclass(frozen=True)
class ExecutionReport:
    plan_id: str
    applied: tuple[ManagedAction, ...]
    effect_held: bool
    rolled_back: bool


@dataclass
class LoopReport:
    """What run_loop did: total iterations, and how many adapted."""

    iterations: int
    adaptations: int
    converged: bool
    findings: tuple[Finding, ...] = ()
    reports: tuple[ExecutionReport, ...] = ()


def convergence_oracle(u0: Fraction, theta: Fraction, step: Fraction) -> int:
    """Least n with u0 * step**n <= theta, by exact iteration.

    This is the number of adaptations a healthy loop performs before analysis
    stops flagging congestion (strictly-above-theta means are congested).
    Matches ceil(log(theta/u0) / log(step)) away from exact-power boundaries,
    but stays free of floating point.
    """
    if not (0 < step < 1):
        raise ValueError("step must lie strictly between 0 and 1")
    n = 0
    value = Fraction(u0)
    while value > theta:
        value *= step
        n += 1
    return n


class MapeKLoop:
    """Managing system: monitor, analyze, plan, execute over shared knowledge."""

    def __init__(
        self,
        fabric: Fabric,
        world: SimWorld,
        *,
        theta: Fraction = Fraction(4, 5),
        window: int = 10,
        knob_step: Fraction = Fraction(9, 10),
        telemetry_selector: str = "telemetry/**",
        actor: str = "mapek",
    ):
        if not (0 < knob_step < 1):
            raise ValueError("knob_step must lie strictly between 0 and 1")
        self._fabric = fabric
        self._world = world
        self.theta = Fraction(theta)
        self.window = window
        self.knob_step = Fraction(knob_step)
        self.actor = actor
        self.knowledge = KnowledgeBase()
        self._origins: set[str] = set()
        self._plan_count = 0
        fabric.register_node(actor)
        self._sub_id = fabric.subscribe(
            Subscription(
                selector=Selector.parse(telemetry_selector), subscriber_node=actor
            )
        )

    # -- stages ------------------------------------------------------------

    def monitor(self, envelopes: list[MessageEnvelope] | None = None) -> int:
        """Fold telemetry into knowledge; idempotent per envelope id."""
        batch = envelopes if envelopes is not None else self._fabric.drain(self._sub_id)
        ingested = 0
        for envelope in batch:
            if self.knowledge.seen(envelope.id):
                continue
            self.knowledge.mark_seen(envelope.id)
            origin = envelope.metadata["origin-node"]
            value = Fraction(envelope.payload.decode("utf-8"))
            self.knowledge.add(
                KnowledgeRecord(
                    key=f"load.{origin}",
                    value=value,
                    logical_time=envelope.logical_time,
                    source="monitor",
                )
            )
            self._origins.add(origin)
            ingested += 1
        return ingested

    def analyze(self) -> list[Finding]:
        """Windowed-mean congestion check per monitored origin."""
        if not self._origins:
            raise InsufficientData("no monitoring data in knowledge")
        findings = []
        for origin in sorted(self._origins):
            series = self.knowledge.series(f"load.{origin}", self.window)
            if not series:
                continue
            mean = sum(series, Fraction(0)) / len(series)
            if mean > self.theta:
                severity = (mean - self.theta) / (1 - self.theta)
                severity = max(Fraction(0), min(Fraction(1), severity))
                findings.append(
                    Finding(
                        kind="congestion",
                        target=origin,
                        severity=severity,
                        evidence=(f"load.{origin}", f"samples={len(series)}", f"mean={mean}"),
                    )
                )
        findings.sort(key=lambda f: (-f.severity, f.target))
        if not findings:
            findings = [Finding(kind="none", target="", severity=Fraction(0))]
        for finding in findings:
            self.knowledge.add(
                KnowledgeRecord(
                    key=f"finding.{finding.target or 'none'}",
                    value=finding.severity,
                    logical_time=self._fabric.now,
                    source="analyze",
                )
            )
        return findings

    def plan(self, findings: list[Finding]) -> AdaptationPlan:
        """Turn congestion findings into knob actions, snapshotting first."""
        actionable = [f for f in findings if f.kind != "none"]
        if not actionable:
            raise NoApplicableAction("analysis reported nothing to act on")
        actions = []
        for finding in actionable:
            node = self._world.state.nodes.get(finding.target)
            if node is None or ADMISSION_KNOB not in node.knobs:
                continue
            current = node.knobs[ADMISSION_KNOB]
            actions.append(
                ManagedAction(finding.target, ADMISSION_KNOB, current * self.knob_step)
            )
        if not actions:
            targets = ",".join(f.target for f in actionable)
            raise NoApplicableAction(f"no managed knobs on {targets}")
        rollback_ref = self._world.snapshot()
        self._plan_count += 1
        plan = AdaptationPlan(
            plan_id=f"adapt-{self._plan_count}",
            actions=tuple(actions),
            expected_effect="windowed mean load strictly decreases on every target",
            rollback_ref=rollback_ref,
        )
        self._fabric.audit(AuditOp.PLAN, actor=self.actor)
        self.knowledge.add(
            KnowledgeRecord(
                key=f"plan.{plan.plan_id}",
                value=len(actions),
                logical_time=self._fabric.now,
                source="plan",
            )
        )
        return plan

    def _windowed_mean(self, origin: str) -> Fraction | None:
        series = self.knowledge.series(f"load.{origin}", self.window)
        if not series:
            return None
        return sum(series, Fraction(0)) / len(series)

    def execute(self, plan: AdaptationPlan) -> ExecutionReport:
        """Apply actions as control envelopes, settle, verify, else roll back."""
        before = {a.target: self._windowed_mean(a.target) for a in plan.actions}
        for action in plan.actions:
            topic = f"managed/{action.target}/knobs"
            if not self._fabric.has_topic(topic):
                raise ExecutionFailed(action.render())
            self._fabric.publish(
                self._fabric.envelope(
                    topic,
                    f"{action.knob}={action.value}",
                    kind=KIND_CONTROL,
                    session="mapek",
                    origin=self.actor,
                    detail=action.render(),
                )
            )
        self._world.step(self.window)
        self.monitor()
        held = True
        for action in plan.actions:
            after = self._windowed_mean(action.target)
            previous = before[action.target]
            if previous is None or after is None or not after < previous:
                held = False
                break
        rolled_back = False
        if not held:
            self._world.restore(plan.rollback_ref)
            self._fabric.audit(AuditOp.ROLLBACK, actor=self.actor)
            rolled_back = True
        self.knowledge.add(
            KnowledgeRecord(
                key=f"exec.{plan.plan_id}",
                value="held" if held else "rolled-back",
                logical_time=self._fabric.now,
                source="execute",
            )
        )
        self._fabric.audit(
            AuditOp.EXECUTE,
            actor=self.actor,
            outcome="ok" if held else "error(EffectNotObserved)",
        )
        return ExecutionReport(
            plan_id=plan.plan_id,
            applied=plan.actions,
            effect_held=held,
            rolled_back=rolled_back,
        )

    # -- loop ----------------------------------------------------------------

    def run_loop(self, max_iterations: int = 10) -> LoopReport:
        """Iterate M-A-P-E until analysis is clean or the budget runs out."""
        iterations = 0
        adaptations = 0
        reports: list[ExecutionReport] = []
        findings: list[Finding] = []
        converged = False
        while iterations < max_iterations:
            iterations += 1
            self._world.step(self.window)
            self.monitor()
            findings = self.analyze()
            if all(f.kind == "none" for f in findings):
                converged = True
                break
            plan = self.plan(findings)
            reports.append(self.execute(plan))
            adaptations += 1
        return LoopReport(
            iterations=iterations,
            adaptations=adaptations,
            converged=converged,
            findings=tuple(findings),
            reports=tuple(reports),
        )
