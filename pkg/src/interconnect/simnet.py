"""Deterministic simulated network under the fabric.

The world is a discrete-event system: stepping it advances a tick counter and
runs node handlers in node-id order, so runs are reproducible given the same
construction sequence and seed. Nodes with a load model publish one telemetry
envelope per tick; model-host nodes drain their request queues and reply with
inference results; every node accepts control envelopes on
managed/<nodeId>/knobs that set knobs (clamped to their declared ranges).

All trace-visible values are integers or exact rationals rendered as
fraction strings; there are no floats anywhere in the state. The optional
telemetry jitter draws from the world's single seeded generator and is off
by default.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

from .errors import DuplicateNode
from .fabric import (
    KIND_CONTROL,
    KIND_DATA,
    KIND_INFERENCE_RESULT,
    Fabric,
    MessageEnvelope,
    Selector,
    Subscription,
    SubscriptionKind,
    SubscriptionMode,
)

log = logging.getLogger(__name__)

ADMISSION_KNOB = "admission-rate"
RATE_LIMIT_KNOB = "rate-limit"

DEFAULT_KNOB_RANGES: dict[str, tuple[Fraction, Fraction]] = {
    ADMISSION_KNOB: (Fraction(0), Fraction(1)),
    RATE_LIMIT_KNOB: (Fraction(0), Fraction(1000)),
    "probe-rate": (Fraction(0), Fraction(1)),
}


class NodeKind(str, Enum):
    NWDAF = "nwdaf"
    RIC = "ric"
    UE_GEN = "ue-gen"
    MODEL_HOST = "model-host"
    APP = "app"


@dataclass
class LoadModel:
    """M/M/1-flavoured load summary: enough to expose utilization pressure."""

    offered_load: Fraction
    service_rate: Fraction = Fraction(1)
    queue_depth: int = 0


@dataclass
class NodeState:
    """The managed, snapshot-able part of a node."""

    knobs: dict[str, Fraction] = field(default_factory=dict)
    knob_ranges: dict[str, tuple[Fraction, Fraction]] = field(default_factory=dict)
    load: LoadModel | None = None


class WorldState:
    """Pure state container the guard interpreter and MAPE-K act upon."""

    def __init__(self) -> None:
        self.nodes: dict[str, NodeState] = {}

    def has_node(self, node_id: str) -> bool:
        return node_id in self.nodes

    def get_knob(self, node_id: str, knob: str) -> Fraction:
        node = self.nodes[node_id]
        if knob not in node.knobs:
            raise KeyError(f"node {node_id!r} declares no knob {knob!r}")
        return node.knobs[knob]

    def set_knob(self, node_id: str, knob: str, value: Fraction) -> Fraction:
        """Assign a knob, clamped into its declared range; returns the value set."""
        node = self.nodes[node_id]
        if knob not in node.knobs:
            raise KeyError(f"node {node_id!r} declares no knob {knob!r}")
        lo, hi = node.knob_ranges.get(knob, (None, None))
        if lo is not None:
            value = max(lo, min(hi, value))
        node.knobs[knob] = Fraction(value)
        return node.knobs[knob]

    def shift_load(self, src: str, dst: str, fraction: Fraction) -> Fraction:
        """Move a fraction of offered load between nodes; returns the amount."""
        source, target = self.nodes[src], self.nodes[dst]
        if source.load is None or target.load is None:
            raise KeyError("both reroute endpoints need a load model")
        fraction = max(Fraction(0), min(Fraction(1), fraction))
        moved = source.load.offered_load * fraction
        source.load.offered_load -= moved
        target.load.offered_load += moved
        return moved

    def utilization(self, node_id: str) -> Fraction:
        node = self.nodes[node_id]
        if node.load is None:
            return Fraction(0)
        admission = node.knobs.get(ADMISSION_KNOB, Fraction(1))
        return node.load.offered_load * admission / node.load.service_rate

    def throughput(self, node_id: str) -> Fraction:
        node = self.nodes[node_id]
        if node.load is None:
            return Fraction(0)
        admission = node.knobs.get(ADMISSION_KNOB, Fraction(1))
        served = min(node.load.offered_load * admission, node.load.service_rate)
        if RATE_LIMIT_KNOB in node.knobs:
            served = min(served, node.knobs[RATE_LIMIT_KNOB])
        return served

    def total_throughput(self) -> Fraction:
        return sum((self.throughput(n) for n in self.nodes), Fraction(0))

    def metrics(self) -> dict[str, Fraction]:
        """Named rational metrics for sandbox delta reporting."""
        out: dict[str, Fraction] = {}
        for node_id in sorted(self.nodes):
            out[f"utilization.{node_id}"] = self.utilization(node_id)
            out[f"throughput.{node_id}"] = self.throughput(node_id)
        out["throughput.total"] = self.total_throughput()
        return out

    def config_hash(self) -> str:
        """Hash of all knob settings (the managed configuration)."""
        lines = []
        for node_id in sorted(self.nodes):
            for knob in sorted(self.nodes[node_id].knobs):
                lines.append(f"{node_id}/{knob}={self.nodes[node_id].knobs[knob]}")
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]

    def state_hash(self) -> str:
        """Hash of knobs plus load state; sandbox runs must never change it."""
        lines = []
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            for knob in sorted(node.knobs):
                lines.append(f"{node_id}/{knob}={node.knobs[knob]}")
            if node.load is not None:
                lines.append(
                    f"{node_id}/load={node.load.offered_load}:{node.load.service_rate}"
                    f":{node.load.queue_depth}"
                )
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]


@dataclass
class _NodeRuntime:
    node_id: str
    kind: NodeKind
    hosted: dict[str, str] = field(default_factory=dict)  # model id -> request sub id
    jitter: bool = False
    fail_requests: int = 0


class SimWorld:
    """Nodes plus the fabric they talk over, stepped tick by tick."""

    def __init__(self, fabric: Fabric, seed: int = 0):
        self.fabric = fabric
        self.state = WorldState()
        self.rng = random.Random(seed)
        self.tick_no = 0
        self._runtimes: dict[str, _NodeRuntime] = {}
        self._snapshots: dict[str, WorldState] = {}
        self._snap_count = 0

    # -- construction ---------------------------------------------------------

    def spawn_node(
        self,
        node_id: str,
        kind: NodeKind,
        *,
        knobs: dict[str, Fraction] | None = None,
        knob_ranges: dict[str, tuple[Fraction, Fraction]] | None = None,
        load: LoadModel | None = None,
        hosted_models: tuple[str, ...] = (),
        jitter: bool = False,
    ) -> None:
        """Add a node; registers it with the fabric and wires its topics."""
        if node_id in self._runtimes:
            raise DuplicateNode(f"node {node_id!r} already exists")
        ranges = dict(DEFAULT_KNOB_RANGES)
        if knob_ranges:
            ranges.update(knob_ranges)
        node_state = NodeState(
            knobs={k: Fraction(v) for k, v in (knobs or {}).items()},
            knob_ranges={k: ranges[k] for k in (knobs or {}) if k in ranges},
            load=load,
        )
        runtime = _NodeRuntime(node_id=node_id, kind=kind, jitter=jitter)
        self.fabric.register_node(node_id)
        self.state.nodes[node_id] = node_state
        self._runtimes[node_id] = runtime

        control_topic = f"managed/{node_id}/knobs"
        self.fabric.create_topic(control_topic)
        self.fabric.subscribe(
            Subscription(
                selector=Selector(control_topic),
                subscriber_node=node_id,
                mode=SubscriptionMode.DURABLE,
                kind=SubscriptionKind.DATA,
            ),
            handler=lambda env, nid=node_id: self._apply_control(nid, env),
        )
        if load is not None:
            self.fabric.create_topic(f"telemetry/{node_id}/load")
        for model_id in hosted_models:
            runtime.hosted[model_id] = self.fabric.host_model(model_id, node_id)

    def node_kind(self, node_id: str) -> NodeKind:
        return self._runtimes[node_id].kind

    def node_ids(self) -> list[str]:
        return sorted(self._runtimes)

    def fail_next_requests(self, node_id: str, count: int) -> None:
        """Make a model host answer its next requests with an error."""
        self._runtimes[node_id].fail_requests = count

    # -- control & stepping -----------------------------------------------------

    def _apply_control(self, node_id: str, envelope: MessageEnvelope) -> None:
        for assignment in envelope.payload.decode("utf-8").split(";"):
            assignment = assignment.strip()
            if not assignment:
                continue
            knob, _, raw = assignment.partition("=")
            try:
                self.state.set_knob(node_id, knob.strip(), Fraction(raw.strip()))
            except (KeyError, ValueError, ZeroDivisionError):
                log.warning("ignored bad control assignment %r for %s", assignment, node_id)

    def step(self, ticks: int = 1) -> None:
        """Advance the world; handlers run per tick in node-id order."""
        for _ in range(ticks):
            self.tick_no += 1
            for node_id in sorted(self._runtimes):
                runtime = self._runtimes[node_id]
                node = self.state.nodes[node_id]
                if node.load is not None:
                    self._emit_telemetry(node_id, runtime)
                if runtime.hosted:
                    self._serve_requests(runtime)

    def _emit_telemetry(self, node_id: str, runtime: _NodeRuntime) -> None:
        value = self.state.utilization(node_id)
        if runtime.jitter:
            value *= 1 + Fraction(self.rng.randint(-10, 10), 1000)
        self.fabric.publish(
            self.fabric.envelope(
                f"telemetry/{node_id}/load",
                str(value),
                kind=KIND_DATA,
                session="telemetry",
                origin=node_id,
                tags="load",
                detail=str(value),
            )
        )

    def _serve_requests(self, runtime: _NodeRuntime) -> None:
        for model_id in sorted(runtime.hosted):
            for request in self.fabric.drain(runtime.hosted[model_id]):
                self._reply(runtime, model_id, request)

    def _reply(self, runtime: _NodeRuntime, model_id: str, request: MessageEnvelope) -> None:
        result_topic = request.metadata.get("result-topic")
        if not result_topic:
            log.warning("request %s carries no result-topic; dropped", request.id)
            return
        self.fabric.create_topic(result_topic)
        session = request.metadata["session"]
        if runtime.fail_requests > 0:
            runtime.fail_requests -= 1
            self.fabric.publish(
                self.fabric.envelope(
                    result_topic,
                    b"{}",
                    kind=KIND_INFERENCE_RESULT,
                    session=session,
                    origin=runtime.node_id,
                    model_id=model_id,
                    detail=f"error {model_id}",
                    extra={"error": "model-unavailable"},
                )
            )
            return
        digest = hashlib.sha256(request.payload).hexdigest()[:12]
        payload = json.dumps(
            {"model": model_id, "input-digest": digest, "status": "complete"},
            sort_keys=True,
        )
        self.fabric.publish(
            self.fabric.envelope(
                result_topic,
                payload,
                kind=KIND_INFERENCE_RESULT,
                session=session,
                origin=runtime.node_id,
                model_id=model_id,
                detail=f"reply {model_id}",
            )
        )

    # -- snapshots ---------------------------------------------------------------

    def snapshot(self) -> str:
        """Deep-copy the world state; returns a snapshot id for restore()."""
        self._snap_count += 1
        snap_id = f"snap-{self._snap_count}"
        self._snapshots[snap_id] = copy.deepcopy(self.state)
        return snap_id

    def restore(self, snapshot_id: str) -> None:
        """Replace live state with a stored snapshot, exactly."""
        if snapshot_id not in self._snapshots:
            raise ValueError(f"unknown snapshot {snapshot_id!r}")
        self.state = copy.deepcopy(self._snapshots[snapshot_id])

    def state_view(self) -> WorldState:
        """Detached copy of the state for sandbox runs."""
        return copy.deepcopy(self.state)

    def config_hash(self) -> str:
        return self.state.config_hash()

    def state_hash(self) -> str:
        return self.state.state_hash()
