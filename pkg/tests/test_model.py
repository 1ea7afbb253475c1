"""Meta-model validation and graph queries."""

from __future__ import annotations

import itertools
import random

import pytest

from conftest import load_process
from scenario_gen import deploy_chain
from txdeploy import model
from txdeploy.model import (
    ActivityDef,
    ActivityKind,
    Criticality,
    DataflowDef,
    PROCESS_START,
    PortChannel,
    PortDef,
    PortDirection,
    ProcessDefinition,
    ProductTypeDef,
    SavepointRef,
    SnapshotScope,
    UncompensatableChain,
)


def minimal_process() -> ProcessDefinition:
    return ProcessDefinition(
        name="p",
        activities=[ActivityDef(
            "Install", action="install",
            ports=[PortDef("err", PortDirection.OUT, PortChannel.KO, "ExceptionInfo")],
        )],
        product_types=[ProductTypeDef("ExceptionInfo")],
        entry_activity="Install",
    )


def chain(n: int, savepoints: tuple[int, ...] = (), compensations: tuple[int, ...] = (),
          criticalities: dict[int, Criticality] | None = None) -> ProcessDefinition:
    """Linear chain a1 -> a2 -> ... with recovery wiring by position (1-based)."""
    types = [ProductTypeDef("ExceptionInfo"), ProductTypeDef("Token")]
    acts = []
    flows = []
    for i in range(1, n + 1):
        ports = [PortDef("err", PortDirection.OUT, PortChannel.KO, "ExceptionInfo")]
        if i < n:
            ports.append(PortDef("out", PortDirection.OUT, PortChannel.OK, "Token"))
        if i > 1:
            ports.append(PortDef("in", PortDirection.IN, PortChannel.OK, "Token"))
        acts.append(ActivityDef(
            f"a{i}", action="transfer",
            criticality=(criticalities or {}).get(i, Criticality.CRITICAL),
            savepoint=SnapshotScope.SITE_STATE if i in savepoints else None,
            ports=ports,
        ))
        if i > 1:
            flows.append(DataflowDef(f"a{i-1}", "out", f"a{i}", "in"))
    for i in compensations:
        acts.append(ActivityDef(
            f"c{i}", action="uninstall", compensation_of=f"a{i}",
            ports=[PortDef("err", PortDirection.OUT, PortChannel.KO, "ExceptionInfo")],
        ))
    return ProcessDefinition("chain", acts, flows, types, entry_activity="a1")


class TestValidate:
    def test_minimal_process_is_valid(self):
        assert model.validate(minimal_process()) == []

    def test_validate_is_idempotent(self):
        p = load_process("install.dproc")
        assert model.validate(p) == []
        assert model.validate(p) == []

    def test_flow_into_out_port_is_reported(self):
        p = minimal_process()
        p.activities.append(ActivityDef(
            "Other", action="install",
            ports=[PortDef("err", PortDirection.OUT, PortChannel.KO, "ExceptionInfo"),
                   PortDef("out", PortDirection.OUT, PortChannel.OK, "ExceptionInfo")],
        ))
        p.activities[0].ports.append(PortDef("out2", PortDirection.OUT, PortChannel.OK, "ExceptionInfo"))
        p.dataflows.append(DataflowDef("Install", "out2", "Other", "out"))
        messages = [v.message for v in model.validate(p)]
        assert "dataflow target must be an in port" in messages

    def test_all_violations_reported_not_just_first(self):
        p = minimal_process()
        p.activities[0].ports = []  # loses the ko port
        p.activities.append(ActivityDef("Install", action="install", ports=[]))  # duplicate id
        p.entry_activity = "Missing"
        violations = model.validate(p)
        assert len(violations) >= 3

    def test_duplicate_ids_and_reserved_name(self):
        p = minimal_process()
        p.activities.append(ActivityDef(
            PROCESS_START, action="install",
            ports=[PortDef("err", PortDirection.OUT, PortChannel.KO, "ExceptionInfo")]))
        messages = " ".join(v.message for v in model.validate(p))
        assert "reserved" in messages

    def test_composite_rules(self):
        p = minimal_process()
        p.activities.append(ActivityDef("Group", kind=ActivityKind.COMPOSITE, children=[]))
        messages = [v.message for v in model.validate(p)]
        assert any("at least one child" in m for m in messages)

    def test_simple_needs_action_and_single_ko_port(self):
        p = minimal_process()
        p.activities[0].action = None
        p.activities[0].ports.append(
            PortDef("err2", PortDirection.OUT, PortChannel.KO, "ExceptionInfo"))
        messages = [v.message for v in model.validate(p)]
        assert any("must have an action" in m for m in messages)
        assert any("exactly one out/ko port" in m for m in messages)

    def test_recovery_nesting_is_rejected(self):
        p = chain(2)
        p.activities.append(ActivityDef(
            "c2", action="uninstall", compensation_of="a2",
            ports=[PortDef("err", PortDirection.OUT, PortChannel.KO, "ExceptionInfo")]))
        p.activities.append(ActivityDef(
            "cc2", action="uninstall", compensation_of="c2",
            ports=[PortDef("err", PortDirection.OUT, PortChannel.KO, "ExceptionInfo")]))
        messages = [v.message for v in model.validate(p)]
        assert any("itself a recovery activity" in m for m in messages)

    def test_two_contingencies_for_one_target_rejected(self):
        p = chain(2)
        for cid in ("r1", "r2"):
            p.activities.append(ActivityDef(
                cid, action="transfer", contingency_of="a2",
                ports=[PortDef("err", PortDirection.OUT, PortChannel.KO, "ExceptionInfo")]))
        messages = [v.message for v in model.validate(p)]
        assert any("already has a contingency" in m for m in messages)

    def test_cycle_is_reported(self):
        p = chain(2)
        p.activities[0].ports.append(PortDef("in2", PortDirection.IN, PortChannel.OK, "Token"))
        p.activities[1].ports.append(PortDef("out2", PortDirection.OUT, PortChannel.OK, "Token"))
        p.dataflows.append(DataflowDef("a2", "out2", "a1", "in2"))
        messages = [v.message for v in model.validate(p)]
        assert any("cycle" in m for m in messages)

    def test_unreachable_activity_reported(self):
        p = minimal_process()
        p.activities.append(ActivityDef(
            "Stray", action="install",
            ports=[PortDef("err", PortDirection.OUT, PortChannel.KO, "ExceptionInfo")]))
        messages = [str(v) for v in model.validate(p)]
        assert any("Stray" in m and "not reachable" in m for m in messages)

    def test_critical_without_recovery_path_reported(self):
        # a1 (effectful, no compensation, no contingency) blocks a2's rollback
        p = chain(2)
        messages = [str(v) for v in model.validate(p)]
        assert any("a2" in m and "neither a contingency nor a compensation path" in m
                   for m in messages)

    def test_critical_with_compensated_span_is_fine(self):
        p = chain(2, compensations=(1,))
        assert model.validate(p) == []

    def test_channel_mismatch_reported(self):
        p = chain(2)
        p.activities[1].ports.append(PortDef("exc_in", PortDirection.IN, PortChannel.KO, "ExceptionInfo"))
        p.dataflows.append(DataflowDef("a1", "out", "a2", "exc_in"))
        messages = [v.message for v in model.validate(p)]
        assert any("share a channel" in m for m in messages)

    def test_fed_twice_reported(self):
        p = chain(3, compensations=(1, 2))
        p.activities[0].ports.append(PortDef("out_b", PortDirection.OUT, PortChannel.OK, "Token"))
        p.dataflows.append(DataflowDef("a1", "out_b", "a3", "in"))
        messages = [v.message for v in model.validate(p)]
        assert any("fed by more than one dataflow" in m for m in messages)

    def test_shipped_install_process_shape(self):
        p = load_process("install.dproc")
        assert model.validate(p) == []
        mains = [a for a in p.activities if not a.is_recovery]
        recovery = [a for a in p.activities if a.is_recovery]
        assert len(mains) == 4
        assert len(recovery) == 4


class TestExecutionOrder:
    def test_shipped_chain_order(self):
        p = load_process("install.dproc")
        assert model.execution_order(p) == [
            "SearchControlPackage", "DependenciesResolve", "Transfert", "Install"]

    def test_independent_activities_tie_break_by_id(self):
        p = ProcessDefinition(
            "p",
            activities=[
                ActivityDef("b", action="install",
                            ports=[PortDef("err", PortDirection.OUT, PortChannel.KO, "E")]),
                ActivityDef("a", action="install",
                            ports=[PortDef("err", PortDirection.OUT, PortChannel.KO, "E")]),
            ],
            product_types=[ProductTypeDef("E")],
            entry_activity="a",
        )
        # reachability violation aside, the order query still works
        assert model.execution_order(p) == ["a", "b"]

    @staticmethod
    def brute_force_least_order(nodes: list[str], edges: set[tuple[str, str]]) -> list[str]:
        candidates = []
        for perm in itertools.permutations(nodes):
            pos = {n: i for i, n in enumerate(perm)}
            if all(pos[x] < pos[y] for x, y in edges):
                candidates.append(list(perm))
        return min(candidates)

    def diamond(self) -> ProcessDefinition:
        types = [ProductTypeDef("E"), ProductTypeDef("T")]
        def node(aid, ins, outs):
            ports = [PortDef("err", PortDirection.OUT, PortChannel.KO, "E")]
            ports += [PortDef(f"i{i}", PortDirection.IN, PortChannel.OK, "T") for i in range(ins)]
            ports += [PortDef(f"o{i}", PortDirection.OUT, PortChannel.OK, "T") for i in range(outs)]
            return ActivityDef(aid, action="install", ports=ports)
        acts = [node("a", 0, 2), node("b", 1, 1), node("c", 1, 1), node("d", 2, 0)]
        flows = [
            DataflowDef("a", "o0", "b", "i0"),
            DataflowDef("a", "o1", "c", "i0"),
            DataflowDef("b", "o0", "d", "i0"),
            DataflowDef("c", "o0", "d", "i1"),
        ]
        return ProcessDefinition("diamond", acts, flows, types, entry_activity="a")

    def test_diamond_matches_brute_force(self):
        p = self.diamond()
        expected = self.brute_force_least_order(
            ["a", "b", "c", "d"],
            {("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")})
        assert model.execution_order(p) == expected == ["a", "b", "c", "d"]

    def test_random_dags_match_brute_force(self):
        rng = random.Random(4242)
        for _ in range(40):
            n = rng.randint(2, 6)
            nodes = [f"n{i}" for i in range(n)]
            edges = set()
            for i in range(n):
                for j in range(i + 1, n):
                    if rng.random() < 0.4:
                        edges.add((nodes[i], nodes[j]))
            types = [ProductTypeDef("E"), ProductTypeDef("T")]
            acts = {}
            for node in nodes:
                acts[node] = ActivityDef(node, action="install", ports=[
                    PortDef("err", PortDirection.OUT, PortChannel.KO, "E")])
            flows = []
            for k, (x, y) in enumerate(sorted(edges)):
                acts[x].ports.append(PortDef(f"o{k}", PortDirection.OUT, PortChannel.OK, "T"))
                acts[y].ports.append(PortDef(f"i{k}", PortDirection.IN, PortChannel.OK, "T"))
                flows.append(DataflowDef(x, f"o{k}", y, f"i{k}"))
            p = ProcessDefinition("r", list(acts.values()), flows, types, entry_activity=nodes[0])
            assert model.execution_order(p) == self.brute_force_least_order(nodes, edges)

    def test_composite_expands_children_in_declared_order(self):
        types = [ProductTypeDef("E")]
        acts = [
            ActivityDef("group", kind=ActivityKind.COMPOSITE, children=["z_step", "a_step"]),
            ActivityDef("z_step", action="search_package",
                        ports=[PortDef("err", PortDirection.OUT, PortChannel.KO, "E")]),
            ActivityDef("a_step", action="install",
                        ports=[PortDef("err", PortDirection.OUT, PortChannel.KO, "E")]),
        ]
        p = ProcessDefinition("comp", acts, [], types, entry_activity="group")
        assert model.validate(p) == []
        assert model.execution_order(p) == ["z_step", "a_step"]

    def test_order_respects_every_ok_edge(self):
        p = load_process("word-optional.dproc")
        order = model.execution_order(p)
        pos = {aid: i for i, aid in enumerate(order)}
        by_id = {a.id: a for a in p.activities}
        for f in p.dataflows:
            src = by_id[f.from_activity]
            if src.port(f.from_port).channel is PortChannel.OK and not src.is_recovery:
                assert pos[f.from_activity] < pos[f.to_activity]

    def test_cycle_detected_raises(self):
        p = chain(2)
        p.activities[0].ports.append(PortDef("in2", PortDirection.IN, PortChannel.OK, "Token"))
        p.activities[1].ports.append(PortDef("out2", PortDirection.OUT, PortChannel.OK, "Token"))
        p.dataflows.append(DataflowDef("a2", "out2", "a1", "in2"))
        with pytest.raises(model.CycleDetected):
            model.execution_order(p)


class TestNearestSavepoint:
    def test_shipped_savepoint_before_install(self):
        p = load_process("install.dproc")
        ref = model.nearest_savepoint(p, "Install")
        assert ref.activity == "DependenciesResolve"

    def test_no_savepoints_falls_back_to_process_start(self):
        p = chain(3, compensations=(1, 2))
        ref = model.nearest_savepoint(p, "a3")
        assert ref.is_process_start

    def test_brute_force_scan_on_five_chain(self):
        p = chain(5, savepoints=(1, 3), compensations=(1, 2, 3, 4))
        order = model.execution_order(p)

        def brute(failed: str) -> str:
            idx = order.index(failed)
            best = PROCESS_START
            for aid in order[:idx]:
                if p.activity(aid).savepoint is not None:
                    best = aid
            return best

        assert model.nearest_savepoint(p, "a4").activity == brute("a4") == "a3"
        assert model.nearest_savepoint(p, "a2").activity == brute("a2") == "a1"
        assert model.nearest_savepoint(p, "a1").activity == PROCESS_START

    def test_savepoint_on_failed_activity_itself_is_excluded(self):
        p = chain(3, savepoints=(2,), compensations=(1, 2))
        assert model.nearest_savepoint(p, "a2").is_process_start

    def test_unknown_activity_raises(self):
        p = chain(2, compensations=(1,))
        with pytest.raises(ValueError):
            model.nearest_savepoint(p, "nope")


class TestCompensationChain:
    def test_reverse_slice_with_compensations(self):
        p = chain(4, savepoints=(1,), compensations=(2, 3))
        sp = model.nearest_savepoint(p, "a4")
        assert sp.activity == "a1"
        assert model.compensation_chain(p, "a4", sp) == ["c3", "c2"]

    def test_failure_right_after_savepoint_is_empty(self):
        p = chain(3, savepoints=(1,), compensations=(2,))
        sp = model.nearest_savepoint(p, "a2")
        assert model.compensation_chain(p, "a2", sp) == []

    def test_shipped_transfer_compensation(self):
        p = load_process("install.dproc")
        sp = model.nearest_savepoint(p, "Install")
        assert model.compensation_chain(p, "Install", sp) == ["DeletePartialPackage"]

    def test_noncritical_without_compensation_skipped(self):
        p = chain(4, savepoints=(1,), compensations=(3,),
                  criticalities={2: Criticality.NON_CRITICAL})
        assert model.compensation_chain(p, "a4", model.nearest_savepoint(p, "a4")) == ["c3"]

    def test_critical_effectful_without_compensation_raises(self):
        p = chain(4, savepoints=(1,), compensations=(3,))
        with pytest.raises(UncompensatableChain) as exc:
            model.compensation_chain(p, "a4", model.nearest_savepoint(p, "a4"))
        assert exc.value.activity_id == "a2"

    def test_effectful_narrowing_unblocks_chain(self):
        p = chain(4, savepoints=(1,), compensations=(3,))
        chain_ids = model.compensation_chain(
            p, "a4", model.nearest_savepoint(p, "a4"), effectful={"a3"})
        assert chain_ids == ["c3"]

    def test_read_only_actions_do_not_block(self):
        p = chain(3, compensations=())
        p.activity("a1").action = "search_package"
        p.activity("a2").action = "resolve_dependencies"
        assert model.compensation_chain(p, "a3", SavepointRef(PROCESS_START)) == []

    def test_full_rollback_spans_everything(self):
        p = chain(3, compensations=(1, 2, 3))
        assert model.compensation_chain(p, None, SavepointRef(PROCESS_START)) == ["c3", "c2", "c1"]

    def test_savepoint_after_failure_point_rejected(self):
        p = chain(3, savepoints=(3,), compensations=(1, 2))
        with pytest.raises(ValueError):
            model.compensation_chain(p, "a2", SavepointRef("a3", SnapshotScope.SITE_STATE))

    def test_chain_members_lie_between_savepoint_and_failure(self):
        rng = random.Random(99)
        for _ in range(25):
            n = rng.randint(2, 6)
            savepoints = tuple(i for i in range(1, n + 1) if rng.random() < 0.3)
            compensations = tuple(i for i in range(1, n + 1) if rng.random() < 0.8)
            crits = {i: Criticality.NON_CRITICAL for i in range(1, n + 1) if rng.random() < 0.3}
            p = chain(n, savepoints=savepoints, compensations=compensations, criticalities=crits)
            order = model.execution_order(p)
            failed = rng.choice(order)
            sp = model.nearest_savepoint(p, failed)
            try:
                chain_ids = model.compensation_chain(p, failed, sp)
            except UncompensatableChain:
                continue
            lo = -1 if sp.is_process_start else order.index(sp.activity)
            hi = order.index(failed)
            targets = [p.activity(cid).compensation_of for cid in chain_ids]
            positions = [order.index(t) for t in targets]
            assert positions == sorted(positions, reverse=True)
            assert all(lo < pos < hi for pos in positions)


def test_deploy_chain_builder_is_valid():
    assert model.validate(deploy_chain()) == []
    assert model.validate(deploy_chain(savepoints=("resolve",), transfer_contingency=True,
                                       activate=True)) == []
