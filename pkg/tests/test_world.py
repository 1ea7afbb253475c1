"""Simulated environment: actions, faults, effect log, snapshots."""

from __future__ import annotations

import math
import random

import pytest

from conftest import load_world
from scenario_gen import basic_world
from txdeploy import consistency, world as wm
from txdeploy.world import (
    ActionContext,
    Component,
    Dependency,
    EffectKind,
    FailureKind,
    FaultEntry,
    PackageDescriptor,
    Server,
    SiteState,
    Subject,
    World,
)


class NullRecorder:
    """Stand-in for the engine's trace recorder."""

    def __init__(self):
        self.events = []

    @property
    def clock(self) -> int:
        return len(self.events)

    def emit(self, kind, activity, /, **payload):
        self.events.append((kind, activity, payload))


def ctx_for(world: World, action: str, activity: str | None = None,
            attempt: str = "t#0", **inputs) -> ActionContext:
    return ActionContext(world, activity or action, action, attempt, inputs, NullRecorder())


def run_action(world: World, action: str, attempt: str = "t#0", activity: str | None = None,
               **inputs):
    ctx = ctx_for(world, action, activity=activity, attempt=attempt, **inputs)
    world.begin_attempt(attempt)
    outcome = wm.perform(action, ctx)
    if outcome.done:
        world.end_attempt(attempt)
    return outcome


class TestSearch:
    def test_lowest_id_up_server_wins(self):
        world = basic_world(servers=("B", "A"))
        outcome = run_action(world, "search_package", app_name="app-x", version="1.0")
        assert outcome.done and outcome.outputs["server"] == "A"

    def test_only_down_servers_raise_no_reachable(self):
        world = basic_world(servers=("A",))
        world.servers["A"].up = False
        outcome = run_action(world, "search_package", app_name="app-x", version="1.0")
        assert not outcome.done
        assert outcome.kind is FailureKind.SERVER_DOWN
        assert "no reachable server" in outcome.detail

    def test_unknown_package_raises_not_found(self):
        world = basic_world()
        outcome = run_action(world, "search_package", app_name="ghost", version="9.9")
        assert not outcome.done
        assert outcome.kind is FailureKind.ACTION_ERROR
        assert "package not found" in outcome.detail


class TestResolve:
    def test_no_dependencies_yields_single_entry(self):
        world = basic_world()
        outcome = run_action(world, "resolve_dependencies", app_name="app-x", version="1.0")
        assert outcome.done
        assert outcome.outputs["install_list"] == "app-x@1.0"

    def test_dependency_ordered_before_dependent(self):
        dep = PackageDescriptor("lib-b", "1.0", (Component("runtime", True, 1),))
        world = basic_world(depends=(("lib-b", ">=1.0"),), extra_packages=(dep,),
                            preinstalled=())
        outcome = run_action(world, "resolve_dependencies", app_name="app-x", version="1.0")
        assert outcome.done
        assert outcome.outputs["install_list"] == "lib-b@1.0,app-x@1.0"

    def test_installed_versions_filtered_out(self):
        dep = PackageDescriptor("lib-b", "1.0", (Component("runtime", True, 1),))
        world = basic_world(depends=(("lib-b", ">=1.0"),), extra_packages=(dep,),
                            preinstalled=(("lib-b", "1.0", "runtime", False),))
        outcome = run_action(world, "resolve_dependencies", app_name="app-x", version="1.0")
        assert outcome.outputs["install_list"] == "app-x@1.0"

    def test_pinned_older_version_conflicts(self):
        world = basic_world(depends=(("lib-c", ">=2.0"),),
                            preinstalled=(("lib-c", "1.0", "runtime", True),))
        outcome = run_action(world, "resolve_dependencies", app_name="app-x", version="1.0")
        assert not outcome.done
        assert outcome.kind is FailureKind.DEPENDENCY_CONFLICT
        assert "site has 1.0" in outcome.detail

    def test_cycle_is_a_conflict(self):
        a = PackageDescriptor("p-a", "1.0", (Component("c", True, 1),),
                              (Dependency("p-b", "1.0"),))
        b = PackageDescriptor("p-b", "1.0", (Component("c", True, 1),),
                              (Dependency("p-a", "1.0"),))
        world = World("w", [Server("S", [a, b])], [SiteState(id="site1")], default_site="site1")
        outcome = run_action(world, "resolve_dependencies", app_name="p-a", version="1.0")
        assert not outcome.done
        assert "cycle" in outcome.detail

    def test_random_dags_match_brute_force_closure(self):
        rng = random.Random(515)
        for _ in range(30):
            n = rng.randint(1, 8)
            names = [f"pkg{i}" for i in range(n)]
            deps: dict[str, list[str]] = {x: [] for x in names}
            for i in range(n):
                for j in range(i + 1, n):
                    if rng.random() < 0.35:
                        deps[names[i]].append(names[j])
            descriptors = [
                PackageDescriptor(x, "1.0", (Component("c", True, 1),),
                                  tuple(Dependency(d, "1.0") for d in deps[x]))
                for x in names
            ]
            world = World("w", [Server("S", descriptors)], [SiteState(id="site1")],
                          default_site="site1")
            outcome = run_action(world, "resolve_dependencies", app_name="pkg0", version="1.0")
            assert outcome.done
            got = [item.split("@")[0] for item in outcome.outputs["install_list"].split(",")]
            # closure by brute force
            closure = set()
            frontier = ["pkg0"]
            while frontier:
                x = frontier.pop()
                if x in closure:
                    continue
                closure.add(x)
                frontier.extend(deps[x])
            assert set(got) == closure
            pos = {x: i for i, x in enumerate(got)}
            for x in got:
                for d in deps[x]:
                    assert pos[d] < pos[x]


class TestTransfer:
    def test_fault_free_transfer_stages_everything(self):
        world = basic_world(components=(("core", True, 10),))
        outcome = run_action(world, "transfer", app_name="app-x", version="1.0", server="A")
        assert outcome.done
        assert outcome.context_updates["progress_fraction"] == 1.0
        assert len(world.sites["site1"].staged) == 10

    @pytest.mark.parametrize("fraction,expected_units", [(0.8, 8), (0.1, 1)])
    def test_fault_fraction_is_exact(self, fraction, expected_units):
        fault = FaultEntry("after_fraction", action_ref="transfer", fraction=fraction,
                           fault="server_down", target="A")
        world = basic_world(components=(("core", True, 10),), faults=(fault,))
        outcome = run_action(world, "transfer", app_name="app-x", version="1.0", server="A")
        assert not outcome.done
        assert outcome.kind is FailureKind.NETWORK_FAILURE
        assert outcome.context_updates["progress_fraction"] == fraction
        assert len(world.sites["site1"].staged) == expected_units
        assert expected_units == math.ceil(fraction * 10)

    def test_progress_is_monotone_within_attempt(self):
        world = basic_world(components=(("core", True, 7),))
        ctx = ctx_for(world, "transfer", app_name="app-x", version="1.0", server="A")
        world.begin_attempt("t#0")
        wm.perform("transfer", ctx)
        staged_seq = [e[2]["seq"] for e in ctx.recorder.events]
        assert staged_seq == sorted(staged_seq)

    def test_link_down_mid_transfer(self):
        fault = FaultEntry("after_fraction", action_ref="transfer", fraction=0.5,
                           fault="link_down", target="site1")
        world = basic_world(components=(("core", True, 4),), faults=(fault,))
        outcome = run_action(world, "transfer", app_name="app-x", version="1.0", server="A")
        assert not outcome.done
        assert outcome.kind is FailureKind.NETWORK_FAILURE
        assert "link to site site1" in outcome.detail


class TestInstall:
    def _staged_world(self, **kwargs) -> World:
        world = basic_world(**kwargs)
        outcome = run_action(world, "transfer", attempt="t#s",
                             app_name="app-x", version="1.0", server="A")
        assert outcome.done
        return world

    def test_install_after_full_staging(self):
        world = self._staged_world()
        outcome = run_action(world, "install", app_name="app-x", version="1.0")
        assert outcome.done
        assert ("app-x", "1.0", "core", False) in world.sites["site1"].installed

    def test_missing_platform_tag_is_incompatible(self):
        world = self._staged_world(requires_tags=("osgi-r4",))
        world.sites["site1"].platform_tags.discard("osgi-r4")
        outcome = run_action(world, "install", app_name="app-x", version="1.0")
        assert not outcome.done
        assert outcome.kind is FailureKind.PLATFORM_INCOMPATIBLE
        assert "osgi-r4" in outcome.detail

    def test_empty_staging_is_an_error(self):
        world = basic_world()
        outcome = run_action(world, "install", app_name="app-x", version="1.0")
        assert not outcome.done
        assert "incomplete staging" in outcome.detail

    def test_component_subset(self):
        world = self._staged_world(components=(("editor", True, 6), ("dictionary", False, 4)))
        outcome = run_action(world, "install", app_name="app-x", version="1.0",
                             components="editor")
        assert outcome.done and outcome.outputs["installed_count"] == 1
        installed = world.sites["site1"].installed
        assert ("app-x", "1.0", "editor", False) in installed
        assert not any(e[2] == "dictionary" for e in installed)


class TestUninstallAndRollback:
    def test_uninstall_restores_preinstall_inventory(self):
        world = basic_world(components=(("a", True, 1), ("b", False, 1)))
        before = set(world.sites["site1"].installed)
        run_action(world, "transfer", attempt="t#s", app_name="app-x", version="1.0", server="A")
        run_action(world, "install", attempt="t#i", app_name="app-x", version="1.0")
        outcome = run_action(world, "uninstall", attempt="t#u", app_name="app-x", version="1.0")
        assert outcome.done and outcome.outputs["removed_count"] == 2
        assert set(world.sites["site1"].installed) == before
        oracle = consistency.replay_oracle(world.sites["site1"].effect_log)
        assert oracle.installed == before

    def test_uninstall_missing_component_raises(self):
        world = basic_world()
        outcome = run_action(world, "uninstall", app_name="app-x", version="1.0",
                             components="core")
        assert not outcome.done
        assert "component not installed" in outcome.detail

    def test_rollback_removes_exactly_attempt_effects(self):
        fault = FaultEntry("after_fraction", action_ref="transfer", fraction=0.8,
                           fault="server_down", target="A")
        world = basic_world(components=(("core", True, 10),), faults=(fault,))
        site = world.sites["site1"]
        base_len = len(site.effect_log)
        ctx = ctx_for(world, "transfer", attempt="t#f",
                      app_name="app-x", version="1.0", server="A")
        world.begin_attempt("t#f")
        outcome = wm.perform("transfer", ctx)
        assert not outcome.done
        assert len(site.effect_log) == base_len + 8
        removed = world.rollback_action("t#f")
        assert removed == 8
        assert len(site.effect_log) == base_len
        assert site.staged == set()

    def test_rollback_is_idempotent_and_noop_without_effects(self):
        world = basic_world()
        world.begin_attempt("t#n")
        assert world.rollback_action("t#n") == 0
        assert world.rollback_action("t#n") == 0


class TestSnapshots:
    def test_snapshot_then_immediate_check(self):
        world = basic_world()
        snap = world.snapshot("site1")
        assert world.restore_check("site1", snap) is True

    def test_install_then_compensate_reaches_snapshot(self):
        world = basic_world(components=(("core", True, 2),))
        snap = world.snapshot("site1")
        run_action(world, "transfer", attempt="t#1", app_name="app-x", version="1.0", server="A")
        run_action(world, "install", attempt="t#2", app_name="app-x", version="1.0")
        assert world.restore_check("site1", snap) is False
        run_action(world, "uninstall", attempt="t#3", app_name="app-x", version="1.0")
        run_action(world, "delete_staged", attempt="t#4", app_name="app-x", version="1.0")
        assert world.restore_check("site1", snap) is True
        oracle = consistency.replay_oracle(world.sites["site1"].effect_log)
        assert oracle.installed == world.sites["site1"].installed
        assert oracle.staged == set()

    def test_unknown_snapshot_raises(self):
        world = basic_world()
        with pytest.raises(wm.UnknownSnapshot):
            world.restore_check("site1", "not-a-snapshot")

    def test_snapshot_id_is_content_hash(self):
        w1 = basic_world()
        w2 = basic_world()
        assert w1.snapshot("site1") == w2.snapshot("site1")


class TestActivation:
    def test_activate_and_deactivate_flip_flags(self):
        world = basic_world(components=(("core", True, 1),))
        run_action(world, "transfer", attempt="t#1", app_name="app-x", version="1.0", server="A")
        run_action(world, "install", attempt="t#2", app_name="app-x", version="1.0")
        outcome = run_action(world, "activate", attempt="t#3", app_name="app-x", version="1.0")
        assert outcome.done
        assert ("app-x", "1.0", "core", True) in world.sites["site1"].installed
        outcome = run_action(world, "deactivate", attempt="t#4", app_name="app-x", version="1.0")
        assert outcome.done
        assert ("app-x", "1.0", "core", False) in world.sites["site1"].installed

    def test_activate_without_install_raises(self):
        world = basic_world()
        outcome = run_action(world, "activate", app_name="app-x", version="1.0")
        assert not outcome.done


class TestEffectLogSoundness:
    def test_random_action_sequences_replay_exactly(self):
        rng = random.Random(31337)
        for case in range(60):
            world = basic_world(components=(("a", True, 2), ("b", False, 1)),
                                verify_replay=True)
            actions = ["transfer", "install", "uninstall", "delete_staged",
                       "activate", "deactivate"]
            for step in range(rng.randint(1, 8)):
                action = rng.choice(actions)
                run_action(world, action, attempt=f"t#{case}-{step}",
                           app_name="app-x", version="1.0", server="A")
            site = world.sites["site1"]
            oracle = consistency.replay_oracle(site.effect_log)
            assert oracle.installed == site.installed
            assert oracle.staged == site.staged


class TestFaultDeterminism:
    def test_same_script_fires_identically(self):
        def run_one():
            fault = FaultEntry("after_fraction", action_ref="transfer", fraction=0.5,
                               fault="server_down", target="A")
            world = basic_world(components=(("core", True, 4),), faults=(fault,))
            ctx = ctx_for(world, "transfer", app_name="app-x", version="1.0", server="A")
            world.begin_attempt("t#0")
            wm.perform("transfer", ctx)
            return [(k, a, dict(p)) for k, a, p in ctx.recorder.events]

        assert run_one() == run_one()

    def test_during_action_matches_activity_id(self):
        fault = FaultEntry("during_action", action_ref="SpecificStep", place="site1",
                           fault="action_error", detail="targeted")
        world = basic_world(faults=(fault,))
        ok = run_action(world, "install", activity="OtherStep",
                        app_name="app-x", version="1.0")
        assert "incomplete staging" in ok.detail  # fault did not fire for OtherStep
        hit = run_action(world, "install", activity="SpecificStep",
                         app_name="app-x", version="1.0")
        assert hit.detail == "targeted"

    def test_at_clock_trigger_fires_on_first_check_past_clock(self):
        fault = FaultEntry("at_clock", at_clock=2, fault="action_error", detail="late")
        world = basic_world(components=(("core", True, 5),), faults=(fault,))
        ctx = ctx_for(world, "transfer", app_name="app-x", version="1.0", server="A")
        world.begin_attempt("t#0")
        outcome = wm.perform("transfer", ctx)
        assert not outcome.done and outcome.detail == "late"
        assert outcome.context_updates["progress_fraction"] < 1.0


class TestWorldFiles:
    def test_shipped_worlds_load(self):
        for name in ["install-ok.world", "mirror-break-late.world", "backup-gateway.world",
                     "word-optional.world", "thousand-sites.world", "failsafe.world",
                     "unsafe-compensation.world"]:
            world = load_world(name)
            assert world.sites and world.servers

    def test_preinstalled_entries_seed_the_effect_log(self):
        world = load_world("install-ok.world")
        site = world.sites["site1"]
        oracle = consistency.replay_oracle(site.effect_log)
        assert oracle.installed == site.installed
        assert ("old-tool", "1.0", "main", True) in site.installed

    def test_site_range_generates_padded_ids(self):
        world = load_world("thousand-sites.world")
        assert len(world.sites) == 1000
        assert "gw-0001" in world.sites and "gw-1000" in world.sites

    def test_split_per_site_is_disjoint(self):
        world = load_world("backup-gateway.world")
        parts = world.split_per_site()
        assert [w.default_site for w in parts] == ["gw-primary", "gw-reserve"]
        parts[0].servers["depot"].up = False
        assert parts[1].servers["depot"].up is True

    def test_unknown_hosts_reference_is_error(self):
        result = wm.parse_world("world w\n  server S\n    hosts ghost 1.0\n  site s1\n")
        assert not result.ok
        assert any("unknown package" in str(d) for d in result.diagnostics)

    def test_package_without_mandatory_component_is_error(self):
        result = wm.parse_world(
            "world w\n  package p 1.0\n    component c optional 1\n  site s1\n")
        assert not result.ok
        assert any("mandatory component" in str(d) for d in result.diagnostics)

    def test_empty_world_file_error(self):
        result = wm.parse_world("")
        assert not result.ok
        assert any("expected world header" in str(d) for d in result.diagnostics)
