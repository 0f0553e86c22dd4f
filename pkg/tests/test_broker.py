"""Task broker: intent decomposition, plan documents, tools, execution."""

import json
from fractions import Fraction

import pytest

from interconnect.broker import (
    Intent,
    MockPlanner,
    SynthesizeDirective,
    Task,
    TaskBroker,
    TaskKind,
    TaskPlan,
    validate_plan,
)
from interconnect.errors import (
    DepthExceeded,
    NoEligibleModel,
    PlanningFailed,
    SandboxRejected,
    SynthesisFailed,
    TaskFailed,
)
from interconnect.fabric import Fabric, Selector, Subscription, SubscriptionKind
from interconnect.guard import Guard
from interconnect.registry import ModelRegistry, parse_descriptor
from interconnect.simnet import LoadModel, NodeKind, SimWorld


def descriptor(model_id, capability="predict", domains=("traffic",)):
    return parse_descriptor(
        json.dumps(
            {
                "modelId": model_id,
                "modelType": "analytics",
                "version": "1.0.0",
                "category": "Specialized",
                "architecture": {"family": "transformer", "parameterScaleLabel": "small"},
                "capabilities": [{"name": capability}],
                "domains": list(domains),
                "performance": {
                    "rateLimitPerTick": 4,
                    "latencyTicks": 1,
                    "throughputPerTick": 4,
                    "maxConcurrent": 2,
                },
                "security": {
                    "authMethods": ["token"],
                    "encryption": ["tls"],
                    "privacyPolicy": "local-only",
                },
            }
        )
    )


def make_stack(**broker_kwargs):
    fabric = Fabric()
    world = SimWorld(fabric, seed=0)
    registry = ModelRegistry(fabric)
    registry.register(descriptor("forecaster"))
    world.spawn_node("edge-1", NodeKind.MODEL_HOST, hosted_models=("forecaster",))
    world.spawn_node("app-1", NodeKind.APP)
    for topic in ("net/cell-a/load", "net/cell-b/load"):
        fabric.create_topic(topic)
    broker = TaskBroker(fabric, registry, **broker_kwargs)
    return fabric, world, registry, broker


def feed_streams(fabric):
    for topic, payload in (("net/cell-a/load", b"41/50"), ("net/cell-b/load", b"7/10")):
        fabric.publish(
            fabric.envelope(topic, payload, kind="data", session="feed", origin="app-1")
        )


INTENT_TEXT = "predict the next load window from net/cell-a/load and net/cell-b/load"


def make_intent(text=INTENT_TEXT, issuer="app-1", **kwargs):
    return Intent(text=text, issuer=issuer, **kwargs)


# -- planner primitives ------------------------------------------------------------


def test_detect_verb_first_stem_wins():
    planner = MockPlanner()
    assert planner.detect_verb("Compare and summarize these") == "compare"
    assert planner.detect_verb("SUMMARIZE the area") == "summarize"
    assert planner.detect_verb("optimise vs optimize") == "optimize"
    assert planner.detect_verb("predictive maintenance") == "predict"
    assert planner.detect_verb("delete everything") is None


def test_episode_respects_step_budget():
    planner = MockPlanner(max_steps=5)
    with pytest.raises(PlanningFailed):
        planner.episode("predict", ["s/a", "s/b"])
    assert len(MockPlanner().episode("predict", ["s/a"])) == 4


def test_expand_metaprompt_tree_shape():
    planner = MockPlanner()
    nodes = planner.expand_metaprompt("tune the cell", depth=2)
    assert len(nodes) == 12
    assert [n.parent for n in nodes[:3]] == [None, None, None]
    assert [n.parent for n in nodes[3:6]] == [0, 0, 0]
    assert nodes[0].text == "tune the cell / focus:signal-quality"
    assert nodes[3].text == "tune the cell / focus:signal-quality / focus:signal-quality"
    assert nodes[11].parent == 2


def test_expand_metaprompt_fanout_and_depth_bounds():
    assert len(MockPlanner(fanout=2).expand_metaprompt("p", depth=1)) == 2
    planner = MockPlanner()
    with pytest.raises(DepthExceeded):
        planner.expand_metaprompt("p", depth=0)
    with pytest.raises(DepthExceeded):
        planner.expand_metaprompt("p", depth=6)


def test_emit_tool_program_template():
    source = MockPlanner().emit_tool_program("ran-1", "relieve-congestion")
    assert source.splitlines() == [
        "# tool for relieve-congestion",
        "limit ran-1 admission-rate 0 1",
        "scale ran-1 admission-rate 9/10",
    ]


# -- decomposition ------------------------------------------------------------------


def test_decompose_builds_the_expected_task_graph():
    fabric, world, registry, broker = make_stack()
    plan = broker.decompose_intent(make_intent())
    kinds = [t.kind for t in plan.tasks]
    assert kinds == [TaskKind.INGEST, TaskKind.INGEST, TaskKind.INFER, TaskKind.AGGREGATE]
    ingest_a, ingest_b, infer, aggregate = plan.tasks
    assert ingest_a.inputs == ("stream:net/cell-a/load",)
    assert ingest_b.inputs == ("stream:net/cell-b/load",)
    assert infer.inputs == (ingest_a.task_id, ingest_b.task_id)
    assert infer.capability == "predict"
    assert infer.assigned_model == "forecaster"
    assert aggregate.inputs == (infer.task_id,)
    assert plan.result_topic == f"plans/{plan.plan_id}/result"
    assert fabric.has_topic(plan.result_topic)
    assert len(plan.subscriptions) == 1
    assert broker.plans[plan.plan_id] is plan
    (audit,) = fabric.audit_query(ops=["plan"])
    assert (audit.actor, audit.model_id) == ("app-1", "forecaster")


def test_single_stream_plan_skips_aggregation():
    fabric, world, registry, broker = make_stack()
    plan = broker.decompose_intent(make_intent("predict load on net/cell-a/load"))
    assert [t.kind for t in plan.tasks] == [TaskKind.INGEST, TaskKind.INFER]


def test_decompose_failure_modes():
    fabric, world, registry, broker = make_stack()
    with pytest.raises(PlanningFailed, match="verb"):
        broker.decompose_intent(make_intent("look at net/cell-a/load"))
    with pytest.raises(PlanningFailed, match="streams"):
        broker.decompose_intent(make_intent("predict the weather"))
    with pytest.raises(PlanningFailed, match="unknown stream"):
        broker.decompose_intent(make_intent("predict load on net/ghost/load"))
    with pytest.raises(NoEligibleModel):
        broker.decompose_intent(make_intent("summarize net/cell-a/load"))


def test_constraints_override_text_stream_detection():
    fabric, world, registry, broker = make_stack()
    plan = broker.decompose_intent(
        make_intent(
            "predict without naming streams inline",
            constraints={"streams": "net/cell-b/load, net/cell-a/load"},
        )
    )
    assert plan.tasks[0].inputs == ("stream:net/cell-b/load",)
    assert plan.tasks[1].inputs == ("stream:net/cell-a/load",)


def test_plan_ids_are_deterministic_per_seed():
    def build(seed):
        fabric, world, registry, broker = make_stack(planner=MockPlanner(seed))
        plan = broker.decompose_intent(make_intent())
        return plan.plan_id, plan.to_document()

    id_a, doc_a = build(0)
    id_b, doc_b = build(0)
    id_c, doc_c = build(1)
    assert id_a == id_b and doc_a == doc_b
    assert id_a != id_c


def test_domain_hint_steers_model_choice():
    fabric, world, registry, broker = make_stack()
    registry.register(descriptor("agro-predict", domains=("agriculture",)))
    world.spawn_node("edge-agro", NodeKind.MODEL_HOST, hosted_models=("agro-predict",))
    plan = broker.decompose_intent(
        make_intent(target_domain="agriculture")
    )
    assert plan.tasks[2].assigned_model == "agro-predict"
    assert plan.domain_hint == "agriculture"


# -- plan documents --------------------------------------------------------------------


def test_plan_document_round_trip():
    fabric, world, registry, broker = make_stack()
    plan = broker.decompose_intent(make_intent())
    body = plan.to_document()
    assert body.endswith(b"\n")
    assert TaskPlan.from_document(body) == plan
    assert TaskPlan.from_document(body).to_document() == body


def test_plan_document_rejects_broken_graphs():
    fabric, world, registry, broker = make_stack()
    plan = broker.decompose_intent(make_intent())
    doc = json.loads(plan.to_document())

    forward = json.loads(json.dumps(doc))
    forward["tasks"][0]["inputs"] = ["t99"]
    with pytest.raises(PlanningFailed, match="before it exists"):
        TaskPlan.from_document(json.dumps(forward).encode())

    dupes = json.loads(json.dumps(doc))
    dupes["tasks"][1]["taskId"] = dupes["tasks"][0]["taskId"]
    with pytest.raises(PlanningFailed, match="duplicate"):
        TaskPlan.from_document(json.dumps(dupes).encode())

    empty = json.loads(json.dumps(doc))
    empty["tasks"] = []
    with pytest.raises(PlanningFailed, match="no tasks"):
        TaskPlan.from_document(json.dumps(empty).encode())


def test_validate_plan_accepts_stream_refs_only_at_any_point():
    plan = TaskPlan(
        plan_id="plan-x",
        tasks=(
            Task("t1", TaskKind.INGEST, inputs=("stream:a/b",)),
            Task("t2", TaskKind.INFER, inputs=("t1", "stream:c/d")),
        ),
        subscriptions=(),
        provenance="test",
        result_topic="plans/plan-x/result",
        issuer="app-1",
    )
    validate_plan(plan)


# -- subscription-driven planning ----------------------------------------------------------


def agri_stack():
    fabric, world, registry, broker = make_stack()
    registry.register(descriptor("agro-insight", capability="compare", domains=("agriculture",)))
    world.spawn_node("edge-agro", NodeKind.MODEL_HOST, hosted_models=("agro-insight",))
    fabric.register_node("agri-app")
    for topic in ("farm/soil/north", "farm/soil/south"):
        fabric.create_topic(topic)
    return fabric, world, registry, broker


def test_plan_for_subscription_builds_sorted_stream_set():
    fabric, world, registry, broker = agri_stack()
    subscription = Subscription(
        selector=Selector.parse("farm/soil/* kind=data"),
        subscriber_node="agri-app",
        kind=SubscriptionKind.INFERENCE,
        params={"prompt": "compare soil moisture", "domain": "agriculture"},
    )
    plan = broker.plan_for_subscription(subscription)
    assert [t.inputs for t in plan.tasks[:2]] == [
        ("stream:farm/soil/north",),
        ("stream:farm/soil/south",),
    ]
    assert plan.issuer == "agri-app"
    assert plan.tasks[2].assigned_model == "agro-insight"


def test_plan_for_subscription_requires_prompt_and_streams():
    fabric, world, registry, broker = agri_stack()
    bare = Subscription(
        selector=Selector.parse("farm/soil/*"),
        subscriber_node="agri-app",
        kind=SubscriptionKind.INFERENCE,
    )
    with pytest.raises(PlanningFailed, match="prompt"):
        broker.plan_for_subscription(bare)
    lost = Subscription(
        selector=Selector.parse("ocean/*"),
        subscriber_node="agri-app",
        kind=SubscriptionKind.INFERENCE,
        params={"prompt": "compare tides"},
    )
    with pytest.raises(PlanningFailed, match="no streams"):
        broker.plan_for_subscription(lost)


def test_attach_hooks_inference_subscriptions():
    fabric, world, registry, broker = agri_stack()
    broker.attach()
    fabric.subscribe(
        Subscription(
            selector=Selector.parse("farm/soil/*"),
            subscriber_node="agri-app",
            kind=SubscriptionKind.INFERENCE,
            params={"prompt": "compare soil moisture"},
        )
    )
    assert len(broker.plans) == 1
    (plan,) = broker.plans.values()
    assert plan.issuer == "agri-app"


# -- tool synthesis --------------------------------------------------------------------------


def guarded_stack(load=True):
    fabric = Fabric()
    world = SimWorld(fabric, seed=0)
    registry = ModelRegistry(fabric)
    world.spawn_node(
        "ran-1",
        NodeKind.RIC,
        knobs={"admission-rate": Fraction(1)},
        load=LoadModel(offered_load=Fraction(4, 5)) if load else None,
    )
    guard = Guard(fabric, world)
    broker = TaskBroker(fabric, registry, guard=guard)
    return fabric, world, guard, broker


def tool_task(signature="relieve-congestion", target="ran-1"):
    return Task(
        "t1",
        TaskKind.TOOL_INVOKE,
        params={"signature": signature, "target-node": target},
    )


def test_select_tool_falls_back_to_synthesis_directive():
    fabric, world, guard, broker = guarded_stack()
    selected = broker.select_tool(tool_task())
    assert isinstance(selected, SynthesizeDirective)


def test_synthesize_tool_catalogs_accepted_programs():
    fabric, world, guard, broker = guarded_stack()
    tool = broker.synthesize_tool(tool_task())
    assert tool.origin == "synthesized"
    assert broker.catalog == [tool]
    assert broker.select_tool(tool_task()) is tool
    assert fabric.last_envelope("broker/insights").metadata["detail"].startswith("tool ")
    assert guard.verdict_for(tool.body.program_id).accepted


def test_synthesize_tool_caches_by_task_shape():
    fabric, world, guard, broker = guarded_stack()
    first = broker.synthesize_tool(tool_task())
    second = broker.synthesize_tool(tool_task())
    assert first is second
    assert len(fabric.audit_query(ops=["sandbox"])) == 1
    other = broker.synthesize_tool(tool_task(signature="other-purpose"))
    assert other is not first
    assert len(broker.catalog) == 2


def test_synthesize_tool_requires_guard_and_target():
    fabric = Fabric()
    broker = TaskBroker(fabric, ModelRegistry(fabric))
    with pytest.raises(SynthesisFailed, match="guard"):
        broker.synthesize_tool(tool_task())
    fabric2, world2, guard2, broker2 = guarded_stack()
    with pytest.raises(SynthesisFailed, match="target-node"):
        broker2.synthesize_tool(Task("t1", TaskKind.TOOL_INVOKE, params={"signature": "x"}))


def test_synthesize_tool_surfaces_sandbox_rejection():
    fabric, world, guard, broker = guarded_stack(load=False)
    with pytest.raises(SandboxRejected, match="InvariantViolation"):
        broker.synthesize_tool(tool_task())
    assert broker.catalog == []


# -- execution --------------------------------------------------------------------------------


def test_execute_plan_completes_end_to_end():
    fabric, world, registry, broker = make_stack()
    feed_streams(fabric)
    plan = broker.decompose_intent(make_intent())
    result = broker.execute_plan(plan, settle=lambda: world.step(1))
    assert result.status == "Completed"
    assert set(result.per_task.values()) == {"ok"}
    combined = json.loads(result.final_payload)
    assert combined["count"] == 1

    (delivery,) = fabric.drain(plan.subscriptions[0])
    assert delivery.metadata["detail"] == f"result {plan.plan_id}"
    assert delivery.payload == result.final_payload
    assert fabric.last_envelope(f"plans/{plan.plan_id}/work") is None
    (execute,) = fabric.audit_query(ops=["execute"])
    assert execute.actor == "app-1"


def test_execute_plan_fails_on_empty_stream():
    fabric, world, registry, broker = make_stack()
    plan = broker.decompose_intent(make_intent())
    with pytest.raises(TaskFailed) as err:
        broker.execute_plan(plan, settle=lambda: world.step(1))
    assert err.value.task_id == "t1"
    assert "no data on stream" in err.value.cause
    partial = err.value.result
    assert partial.status == "Failed"
    assert partial.per_task == {"t1": "error(no data on stream net/cell-a/load)"}


def test_execute_plan_fails_when_model_errors():
    fabric, world, registry, broker = make_stack()
    feed_streams(fabric)
    world.fail_next_requests("edge-1", 1)
    plan = broker.decompose_intent(make_intent())
    with pytest.raises(TaskFailed) as err:
        broker.execute_plan(plan, settle=lambda: world.step(1))
    assert err.value.task_id == "t3"
    assert err.value.cause == "model-unavailable"
    partial = err.value.result
    assert partial.per_task["t1"] == "ok"
    assert partial.per_task["t3"] == "error(model-unavailable)"


def test_execute_plan_without_settle_times_out():
    fabric, world, registry, broker = make_stack()
    feed_streams(fabric)
    plan = broker.decompose_intent(make_intent())
    with pytest.raises(TaskFailed) as err:
        broker.execute_plan(plan)
    assert err.value.cause == "no reply within settle budget"


def test_execute_plan_runs_cataloged_tools():
    fabric, world, guard, broker = guarded_stack()
    broker.synthesize_tool(tool_task())
    fabric.register_node("ops-1")
    plan = TaskPlan(
        plan_id="plan-tool",
        tasks=(tool_task(),),
        subscriptions=(),
        provenance="test",
        result_topic="plans/plan-tool/result",
        issuer="ops-1",
    )
    result = broker.execute_plan(plan)
    assert result.status == "Completed"
    body = json.loads(result.final_payload)
    assert body["tool"].startswith("tool-")
    assert Fraction(body["deltas"]["utilization.ran-1"]) < 0
    assert world.state.get_knob("ran-1", "admission-rate") == Fraction(1)


def test_execute_plan_tool_missing_from_catalog_fails():
    fabric, world, guard, broker = guarded_stack()
    fabric.register_node("ops-1")
    plan = TaskPlan(
        plan_id="plan-tool",
        tasks=(tool_task(),),
        subscriptions=(),
        provenance="test",
        result_topic="plans/plan-tool/result",
        issuer="ops-1",
    )
    with pytest.raises(TaskFailed, match="no tool in catalog"):
        broker.execute_plan(plan)
