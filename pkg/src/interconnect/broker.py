"""Intent decomposition and plan execution.

The broker turns a natural-language intent into a small task graph: one
ingest task per named stream, an inference task bound to a registered model,
an aggregation task when several streams feed it, and a durable subscription
on the plan's result topic. Planning is driven by a deterministic mock
planner so that identical intents under the same seed produce byte-identical
plan documents.

The planner also expands metaprompts into bounded trees of focused
sub-prompts and emits small knob programs for tool synthesis; synthesized
tools only enter the catalog after the deployment guard accepts them in a
sandbox.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

from .errors import (
    DepthExceeded,
    NoEligibleModel,
    PlanningFailed,
    SandboxRejected,
    SynthesisFailed,
    TaskFailed,
)
from .fabric import (
    KIND_DATA,
    KIND_INFERENCE_RESULT,
    AuditOp,
    Fabric,
    MessageEnvelope,
    Selector,
    Subscription,
    SubscriptionKind,
    SubscriptionMode,
    TokenState,
)
from .guard import Guard, GuardedProgram, NamedInvariant, min_total_throughput
from .registry import ModelRegistry
from .simnet import ADMISSION_KNOB
from .trace import TraceEvent

_STREAM_TOKEN = re.compile(r"[a-z0-9*._-]+(?:/[a-z0-9*._-]+)+")

# First stem that occurs in the lowered intent text wins; order is fixed.
VERB_STEMS = (
    ("compar", "compare"),
    ("summar", "summarize"),
    ("optimi", "optimize"),
    ("predict", "predict"),
)

ASPECTS = ("signal-quality", "resource-utilization", "configuration-drift")


@dataclass(frozen=True)
class Intent:
    text: str
    issuer: str
    target_domain: str | None = None
    constraints: dict = field(default_factory=dict)


class TaskKind(str, Enum):
    INGEST = "ingest"
    TRANSFORM = "transform"
    INFER = "infer"
    AGGREGATE = "aggregate"
    SUBSCRIBE_BINDING = "subscribe-binding"
    TOOL_INVOKE = "tool-invoke"


@dataclass(frozen=True)
class Task:
    task_id: str
    kind: TaskKind
    inputs: tuple[str, ...] = ()  # prior task ids or "stream:<topic>"
    capability: str | None = None
    assigned_model: str | None = None
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TaskPlan:
    plan_id: str
    tasks: tuple[Task, ...]
    subscriptions: tuple[str, ...]  # subscription ids held open for results
    provenance: str
    result_topic: str
    issuer: str
    domain_hint: str | None = None

    def to_document(self) -> bytes:
        doc = {
            "planId": self.plan_id,
            "provenance": self.provenance,
            "resultTopic": self.result_topic,
            "issuer": self.issuer,
            "domainHint": self.domain_hint,
            "tasks": [
                {
                    "taskId": t.task_id,
                    "kind": t.kind.value,
                    "inputs": list(t.inputs),
                    "capability": t.capability,
                    "assignedModel": t.assigned_model,
                    "params": dict(sorted(t.params.items())),
                }
                for t in self.tasks
            ],
            "subscriptions": list(self.subscriptions),
        }
        return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")

    @staticmethod
    def from_document(raw: bytes) -> "TaskPlan":
        doc = json.loads(raw.decode("utf-8"))
        tasks = tuple(
            Task(
                task_id=entry["taskId"],
                kind=TaskKind(entry["kind"]),
                inputs=tuple(entry["inputs"]),
                capability=entry["capability"],
                assigned_model=entry["assignedModel"],
                params=dict(entry["params"]),
            )
            for entry in doc["tasks"]
        )
        plan = TaskPlan(
            plan_id=doc["planId"],
            tasks=tasks,
            subscriptions=tuple(doc["subscriptions"]),
            provenance=doc["provenance"],
            result_topic=doc["resultTopic"],
            issuer=doc["issuer"],
            domain_hint=doc["domainHint"],
        )
        validate_plan(plan)
        return plan


def validate_plan(plan: TaskPlan) -> None:
    """Tasks must form a forward-referencing DAG over known inputs."""
    seen: set[str] = set()
    for task in plan.tasks:
        if task.task_id in seen:
            raise PlanningFailed(f"duplicate task id {task.task_id}")
        for ref in task.inputs:
            if ref.startswith("stream:"):
                continue
            if ref not in seen:
                raise PlanningFailed(
                    f"task {task.task_id} references {ref} before it exists"
                )
        seen.add(task.task_id)
    if not plan.tasks:
        raise PlanningFailed("plan has no tasks")


@dataclass(frozen=True)
class PlannerAction:
    thought: str
    action: str
    payload: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Metaprompt:
    text: str
    parent: int | None  # index of the parent in the returned list, None at roots


@dataclass(frozen=True)
class ToolSpec:
    tool_id: str
    interface_signature: str
    body: GuardedProgram
    origin: str  # registered | synthesized


@dataclass(frozen=True)
class SynthesizeDirective:
    """Returned by tool selection when nothing in the catalog fits."""

    task: Task


class MockPlanner:
    """Deterministic stand-in for a reasoning model.

    Every output is a pure function of (seed, inputs): episodes enumerate
    thought/action pairs, metaprompt expansion walks a fixed aspect list, and
    tool programs come from a template. The seed only feeds provenance
    strings and plan ids, never control flow, so replays are stable.
    """

    def __init__(self, seed: int = 0, *, max_steps: int = 64, fanout: int = 3,
                 max_depth: int = 5):
        self.seed = seed
        self.max_steps = max_steps
        self.fanout = fanout
        self.max_depth = max_depth

    def detect_verb(self, text: str) -> str | None:
        lowered = text.lower()
        for stem, capability in VERB_STEMS:
            if stem in lowered:
                return capability
        return None

    def episode(self, capability: str, streams: list[str]) -> list[PlannerAction]:
        """Enumerate the reasoning steps for one decomposition."""
        actions = [
            PlannerAction(f"bind stream {s}", "emit-task",
                          {"kind": "ingest", "source": s})
            for s in streams
        ]
        actions.append(
            PlannerAction(f"apply a {capability} model", "emit-task",
                          {"kind": "infer", "capability": capability})
        )
        if len(streams) >= 2:
            actions.append(
                PlannerAction("combine the inferences", "emit-task",
                              {"kind": "aggregate"})
            )
        actions.append(PlannerAction("notify the issuer", "emit-subscription", {}))
        actions.append(PlannerAction("plan complete", "finish", {}))
        if len(actions) > self.max_steps:
            raise PlanningFailed(
                f"episode needs {len(actions)} steps, budget is {self.max_steps}"
            )
        return actions

    def expand_metaprompt(self, prompt: str, depth: int) -> list[Metaprompt]:
        """Breadth-first aspect tree under the prompt; bounded depth."""
        if depth < 1 or depth > self.max_depth:
            raise DepthExceeded(f"depth {depth} outside 1..{self.max_depth}")
        nodes: list[Metaprompt] = []
        frontier: list[tuple[int | None, str]] = [(None, prompt)]
        for _ in range(depth):
            next_frontier: list[tuple[int, str]] = []
            for parent_index, parent_text in frontier:
                for aspect in ASPECTS[: self.fanout]:
                    node = Metaprompt(
                        text=f"{parent_text} / focus:{aspect}", parent=parent_index
                    )
                    nodes.append(node)
                    next_frontier.append((len(nodes) - 1, node.text))
            frontier = next_frontier
        return nodes

    def emit_tool_program(self, target_node: str, purpose: str) -> str:
        return "\n".join(
            [
                f"# tool for {purpose}",
                f"limit {target_node} {ADMISSION_KNOB} 0 1",
                f"scale {target_node} {ADMISSION_KNOB} 9/10",
            ]
        )


@dataclass
class PlanResult:
    status: str  # Completed | Failed
    per_task: dict
    trace: tuple[TraceEvent, ...] = ()
    final_payload: bytes | None = None


def _digest(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()[:12]


class TaskBroker:
    """Decomposes intents into plans and drives them over the fabric."""

    def __init__(
        self,
        fabric: Fabric,
        registry: ModelRegistry,
        *,
        guard: Guard | None = None,
        planner: MockPlanner | None = None,
    ):
        self._fabric = fabric
        self._registry = registry
        self._guard = guard
        self.planner = planner if planner is not None else MockPlanner()
        self.plans: dict[str, TaskPlan] = {}
        self.catalog: list[ToolSpec] = []
        self.tool_invariants: tuple[NamedInvariant, ...] = (
            min_total_throughput(Fraction(0)),
        )
        self._tool_cache: dict[str, ToolSpec] = {}

    def attach(self) -> None:
        """Plan automatically whenever an inference subscription lands."""
        self._fabric.on_inference_subscription = self.plan_for_subscription

    # -- planning ----------------------------------------------------------

    def _streams_from(self, intent: Intent) -> list[str]:
        declared = intent.constraints.get("streams")
        if declared:
            tokens = [s.strip() for s in declared.split(",") if s.strip()]
        else:
            tokens = _STREAM_TOKEN.findall(intent.text.lower())
        streams: list[str] = []
        for token in tokens:
            if token not in streams:
                streams.append(token)
        if not streams:
            raise PlanningFailed("intent names no data streams")
        for stream in streams:
            if not self._fabric.has_topic(stream):
                raise PlanningFailed(f"unknown stream {stream}")
        return streams

    def decompose_intent(self, intent: Intent) -> TaskPlan:
        capability = self.planner.detect_verb(intent.text)
        if capability is None:
            raise PlanningFailed("intent carries no actionable verb")
        streams = self._streams_from(intent)
        actions = self.planner.episode(capability, streams)
        candidates = self._registry.query_by_capability(
            {capability}, domain_hint=intent.target_domain
        )
        if not candidates:
            raise NoEligibleModel(f"no registered model offers {capability}")
        model = candidates[0]

        seed = self.planner.seed
        digest_input = f"{seed}|{intent.text}|{intent.issuer}|{','.join(streams)}"
        plan_id = "plan-" + hashlib.sha256(digest_input.encode("utf-8")).hexdigest()[:12]
        result_topic = f"plans/{plan_id}/result"

        tasks: list[Task] = []
        ingest_ids: list[str] = []
        counter = 0
        for action in actions:
            if action.action != "emit-task":
                continue
            counter += 1
            task_id = f"t{counter}"
            kind = action.payload["kind"]
            if kind == "ingest":
                tasks.append(
                    Task(task_id, TaskKind.INGEST,
                         inputs=(f"stream:{action.payload['source']}",))
                )
                ingest_ids.append(task_id)
            elif kind == "infer":
                tasks.append(
                    Task(
                        task_id,
                        TaskKind.INFER,
                        inputs=tuple(ingest_ids),
                        capability=capability,
                        assigned_model=model.model_id,
                    )
                )
            elif kind == "aggregate":
                tasks.append(Task(task_id, TaskKind.AGGREGATE, inputs=(tasks[-1].task_id,)))

        self._fabric.create_topic(result_topic)
        sub_id = self._fabric.subscribe(
            Subscription(
                selector=Selector.parse(result_topic),
                subscriber_node=intent.issuer,
                mode=SubscriptionMode.DURABLE,
                kind=SubscriptionKind.DATA,
            )
        )
        plan = TaskPlan(
            plan_id=plan_id,
            tasks=tuple(tasks),
            subscriptions=(sub_id,),
            provenance=f"mock-planner seed={seed} steps={len(actions)}",
            result_topic=result_topic,
            issuer=intent.issuer,
            domain_hint=intent.target_domain,
        )
        validate_plan(plan)
        self.plans[plan_id] = plan
        self._fabric.audit(AuditOp.PLAN, actor=intent.issuer, model_id=model.model_id)
        return plan

    def plan_for_subscription(self, subscription: Subscription) -> TaskPlan:
        """Treat a semantics-bearing subscription as an intent."""
        prompt = subscription.params.get("prompt")
        if not prompt:
            raise PlanningFailed("inference subscription carries no prompt")
        pattern = Selector(subscription.selector.topic_pattern, ())
        streams = [t for t in self._fabric.topics() if pattern.matches(t, {})]
        if not streams:
            raise PlanningFailed("selector matches no streams")
        intent = Intent(
            text=prompt,
            issuer=subscription.subscriber_node,
            target_domain=subscription.params.get("domain"),
            constraints={"streams": ",".join(sorted(streams))},
        )
        return self.decompose_intent(intent)

    # -- tools ---------------------------------------------------------------

    def select_tool(self, task: Task) -> ToolSpec | SynthesizeDirective:
        wanted = task.params.get("signature", "")
        for tool in self.catalog:
            if tool.interface_signature == wanted:
                return tool
        return SynthesizeDirective(task)

    def _task_shape(self, task: Task) -> str:
        doc = {
            "kind": task.kind.value,
            "capability": task.capability,
            "inputs": list(task.inputs),
            "params": dict(sorted(task.params.items())),
        }
        return hashlib.sha256(
            json.dumps(doc, sort_keys=True).encode("utf-8")
        ).hexdigest()[:16]

    def synthesize_tool(self, task: Task) -> ToolSpec:
        """Generate, sandbox, and (if accepted) catalog a knob program."""
        if self._guard is None:
            raise SynthesisFailed("no deployment guard attached")
        target = task.params.get("target-node")
        if not target:
            raise SynthesisFailed("tool synthesis needs a target-node param")
        shape = self._task_shape(task)
        cached = self._tool_cache.get(shape)
        if cached is not None:
            return cached
        purpose = task.capability or task.params.get("signature") or "tool"
        source = self.planner.emit_tool_program(target, purpose)
        program = GuardedProgram(
            program_id=f"prog-{shape[:8]}",
            source=source,
            declared_effects=(ADMISSION_KNOB,),
            author=f"planner-{self.planner.seed}",
        )
        verdict = self._guard.sandbox_run(program, self.tool_invariants)
        if not verdict.accepted:
            raise SandboxRejected(verdict.reason or "rejected")
        tool = ToolSpec(
            tool_id=f"tool-{shape[:8]}",
            interface_signature=task.params.get("signature", ""),
            body=program,
            origin="synthesized",
        )
        self.catalog.append(tool)
        self._tool_cache[shape] = tool
        self._fabric.create_topic("broker/insights")
        self._fabric.publish(
            self._fabric.envelope(
                "broker/insights",
                f"tool {tool.tool_id} for {purpose}",
                kind=KIND_DATA,
                session="broker",
                origin="broker",
                detail=f"tool {tool.tool_id} ready",
            )
        )
        return tool

    # -- execution -----------------------------------------------------------

    def execute_plan(
        self,
        plan: TaskPlan,
        *,
        settle=None,
        settle_budget: int = 64,
    ) -> PlanResult:
        """Run tasks in order; `settle` advances the world between polls."""
        validate_plan(plan)
        mark = len(self._fabric.journal.events)
        outputs: dict[str, bytes] = {}
        outcomes: dict[str, str] = {}

        def fail(task_id: str, cause: str) -> TaskFailed:
            outcomes[task_id] = f"error({cause})"
            partial = PlanResult(
                status="Failed",
                per_task=dict(outcomes),
                trace=tuple(self._fabric.journal.events[mark:]),
            )
            return TaskFailed(task_id, cause, result=partial)

        self._fabric.create_topic(plan.result_topic)
        last_payload = b""
        for task in plan.tasks:
            resolved: list[bytes] = []
            for ref in task.inputs:
                if ref.startswith("stream:"):
                    topic = ref[len("stream:"):]
                    envelope = self._fabric.last_envelope(topic)
                    if envelope is None:
                        raise fail(task.task_id, f"no data on stream {topic}")
                    resolved.append(envelope.payload)
                else:
                    if ref not in outputs:
                        raise fail(task.task_id, f"missing upstream {ref}")
                    resolved.append(outputs[ref])

            if task.kind is TaskKind.INGEST:
                output = resolved[0]
            elif task.kind is TaskKind.TRANSFORM:
                output = json.dumps(
                    {"transformed": _digest(b"".join(resolved))},
                    sort_keys=True,
                ).encode("utf-8")
            elif task.kind is TaskKind.INFER:
                output = self._run_infer(plan, task, resolved, settle, settle_budget, fail)
            elif task.kind is TaskKind.AGGREGATE:
                output = json.dumps(
                    {
                        "combined": {ref: _digest(outputs[ref]) for ref in task.inputs},
                        "count": len(task.inputs),
                    },
                    sort_keys=True,
                ).encode("utf-8")
            elif task.kind is TaskKind.SUBSCRIBE_BINDING:
                sub_id = self._fabric.subscribe(
                    Subscription(
                        selector=Selector.parse(task.params["selector"]),
                        subscriber_node=task.params.get("subscriber", plan.issuer),
                    )
                )
                output = sub_id.encode("utf-8")
            elif task.kind is TaskKind.TOOL_INVOKE:
                output = self._run_tool(task, fail)
            else:  # pragma: no cover - TaskKind is closed
                raise fail(task.task_id, f"unsupported kind {task.kind}")
            outputs[task.task_id] = output
            outcomes[task.task_id] = "ok"
            last_payload = output

        self._fabric.publish(
            self._fabric.envelope(
                plan.result_topic,
                last_payload,
                kind=KIND_INFERENCE_RESULT,
                session=plan.plan_id,
                origin="broker",
                detail=f"result {plan.plan_id}",
            )
        )
        self._fabric.audit(AuditOp.EXECUTE, actor=plan.issuer)
        return PlanResult(
            status="Completed",
            per_task=dict(outcomes),
            trace=tuple(self._fabric.journal.events[mark:]),
            final_payload=last_payload,
        )

    def _run_infer(self, plan, task, resolved, settle, settle_budget, fail) -> bytes:
        request = json.dumps(
            {
                "plan": plan.plan_id,
                "task": task.task_id,
                "inputs": {
                    ref: _digest(payload)
                    for ref, payload in zip(task.inputs, resolved)
                },
            },
            sort_keys=True,
        ).encode("utf-8")
        work_topic = f"plans/{plan.plan_id}/work"
        self._fabric.create_topic(work_topic)
        carrier = self._fabric.envelope(
            work_topic,
            request,
            kind=KIND_DATA,
            session=plan.plan_id,
            origin=plan.issuer,
        )
        session_meta = {"session": plan.plan_id}
        if task.capability:
            session_meta["capability"] = task.capability
        if plan.domain_hint:
            session_meta["domain"] = plan.domain_hint
        token = self._fabric.participate_inference(carrier, session_meta)
        budget = settle_budget
        while token.state is TokenState.PENDING and settle is not None and budget > 0:
            settle()
            budget -= 1
        if token.state is TokenState.PENDING:
            token.fail("no reply within settle budget")
        if token.state is TokenState.FAILED:
            raise fail(task.task_id, token.failure or "inference failed")
        return token.result.payload

    def _run_tool(self, task, fail) -> bytes:
        selected = self.select_tool(task)
        if isinstance(selected, SynthesizeDirective):
            raise fail(task.task_id, "no tool in catalog for signature")
        if self._guard is None:
            raise fail(task.task_id, "no deployment guard attached")
        verdict = self._guard.sandbox_run(selected.body, self.tool_invariants)
        if not verdict.accepted:
            raise fail(task.task_id, f"tool rejected: {verdict.reason}")
        deltas = {k: str(v) for k, v in sorted(verdict.metric_deltas.items())}
        return json.dumps(
            {"tool": selected.tool_id, "deltas": deltas}, sort_keys=True
        ).encode("utf-8")
