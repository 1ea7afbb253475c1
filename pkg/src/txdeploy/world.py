"""Simulated deployment environment: package servers, target sites, faults.

State changes on a site are recorded in an append-only effect log, which is
the ground truth for rollback and safety checking: replaying the log from an
empty site always reproduces the live inventory.  A failed action attempt is
physically rolled back (its log suffix is truncated, as if it never ran);
effects of completed actions are durable and can only be undone semantically
by compensation actions appending inverse effects.

Transfers advance in discrete size units so fraction-based fault triggers
fire at exact progress values.  There is no wall-clock time anywhere: fault
triggers are functions of the run's logical clock and of action progress.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum

from . import pml
from .pml import FLOAT_RE, INT_RE, Line, ParseDiagnostic, Severity, SourceSpan, _Reader


class FailureKind(str, Enum):
    NETWORK_FAILURE = "NetworkFailure"
    SERVER_DOWN = "ServerDown"
    DEPENDENCY_CONFLICT = "DependencyConflict"
    PLATFORM_INCOMPATIBLE = "PlatformIncompatible"
    ACTION_ERROR = "ActionError"


class EffectKind(str, Enum):
    FILE_STAGED = "FileStaged"
    COMPONENT_INSTALLED = "ComponentInstalled"
    COMPONENT_REMOVED = "ComponentRemoved"
    ACTIVATED = "Activated"
    DEACTIVATED = "Deactivated"


@dataclass(frozen=True)
class Subject:
    """What an effect touched: a component or a staged transfer unit."""

    app: str
    version: str
    item: str
    unit: bool = False

    def __str__(self) -> str:
        tag = "unit" if self.unit else "comp"
        return f"{self.app}@{self.version}#{tag}:{self.item}"


@dataclass(frozen=True)
class Effect:
    seq: int
    kind: EffectKind
    subject: Subject


@dataclass(frozen=True)
class Component:
    id: str
    mandatory: bool
    size_units: int


@dataclass(frozen=True)
class Dependency:
    app_name: str
    constraint: str  # "1.0" (exact) or ">=1.0" (minimum)


@dataclass(frozen=True)
class PackageDescriptor:
    app_name: str
    version: str
    components: tuple[Component, ...]
    depends_on: tuple[Dependency, ...] = ()
    requires_tags: frozenset[str] = frozenset()

    @property
    def total_units(self) -> int:
        return sum(c.size_units for c in self.components)

    def component(self, component_id: str) -> Component | None:
        for c in self.components:
            if c.id == component_id:
                return c
        return None


@dataclass
class Server:
    id: str
    hosted: list[PackageDescriptor] = field(default_factory=list)
    up: bool = True

    def hosts(self, app: str, version: str) -> bool:
        return any(p.app_name == app and p.version == version for p in self.hosted)


# installed entries are (app, version, component, active)
Installed = tuple[str, str, str, bool]


@dataclass
class SiteState:
    id: str
    installed: set[Installed] = field(default_factory=set)
    staged: set[tuple[str, str, str]] = field(default_factory=set)
    effect_log: list[Effect] = field(default_factory=list)
    platform_tags: set[str] = field(default_factory=set)

    def installed_entry(self, app: str, version: str, component: str) -> Installed | None:
        for e in self.installed:
            if e[0] == app and e[1] == version and e[2] == component:
                return e
        return None

    def installed_version(self, app: str) -> str | None:
        for e in self.installed:
            if e[0] == app:
                return e[1]
        return None


def apply_effect(site: SiteState, kind: EffectKind, subject: Subject) -> None:
    """Fold one effect into the live inventory (forward direction only)."""
    if kind is EffectKind.FILE_STAGED:
        site.staged.add((subject.app, subject.version, subject.item))
    elif kind is EffectKind.COMPONENT_INSTALLED:
        site.installed.add((subject.app, subject.version, subject.item, False))
    elif kind is EffectKind.COMPONENT_REMOVED:
        if subject.unit:
            site.staged.discard((subject.app, subject.version, subject.item))
        else:
            entry = site.installed_entry(subject.app, subject.version, subject.item)
            if entry is not None:
                site.installed.discard(entry)
    elif kind is EffectKind.ACTIVATED:
        entry = site.installed_entry(subject.app, subject.version, subject.item)
        if entry is not None:
            site.installed.discard(entry)
            site.installed.add((subject.app, subject.version, subject.item, True))
    elif kind is EffectKind.DEACTIVATED:
        entry = site.installed_entry(subject.app, subject.version, subject.item)
        if entry is not None:
            site.installed.discard(entry)
            site.installed.add((subject.app, subject.version, subject.item, False))


@dataclass
class FaultEntry:
    """One scripted perturbation: a deterministic trigger plus a fault."""

    trigger: str  # "at_clock" | "during_action" | "after_fraction"
    action_ref: str | None = None  # action name or activity id
    place: str | None = None  # site or server id (during_action)
    at_clock: int | None = None
    fraction: float | None = None
    fault: str = "action_error"  # "server_down" | "link_down" | "action_error"
    target: str | None = None  # server or site the fault hits
    detail: str = ""
    fired: bool = False

    def matches(self, point: "CheckPoint") -> bool:
        if self.fired:
            return False
        if self.trigger == "at_clock":
            return point.clock >= (self.at_clock or 0)
        if self.trigger == "during_action":
            if self.action_ref not in (point.action, point.activity):
                return False
            return self.place in (point.site, point.server)
        if self.trigger == "after_fraction":
            if self.action_ref not in (point.action, point.activity):
                return False
            return point.progress is not None and self.fraction is not None and point.progress >= self.fraction
        return False


@dataclass
class FaultScript:
    entries: list[FaultEntry] = field(default_factory=list)

    def copy(self) -> "FaultScript":
        return FaultScript([replace(e) for e in self.entries])


@dataclass(frozen=True)
class CheckPoint:
    """Where an action consults the fault script."""

    clock: int
    action: str
    activity: str
    site: str | None
    server: str | None
    progress: float | None


@dataclass
class ActionOutcome:
    """Result of one action attempt.

    ``outputs`` feed the activity's out ports; ``context_updates`` reflect
    observable progress even when the attempt raised.
    """

    status: str  # "done" | "raised"
    kind: FailureKind | None = None
    detail: str = ""
    context_updates: dict[str, object] = field(default_factory=dict)
    outputs: dict[str, object] = field(default_factory=dict)

    @property
    def done(self) -> bool:
        return self.status == "done"


def done(outputs: dict[str, object] | None = None, **context) -> ActionOutcome:
    return ActionOutcome("done", outputs=outputs or {}, context_updates=context)


def raised(kind: FailureKind, detail: str, **context) -> ActionOutcome:
    return ActionOutcome("raised", kind=kind, detail=detail, context_updates=context)


@dataclass(frozen=True)
class SiteSnapshot:
    site: str
    installed: frozenset[Installed]
    staged: frozenset[tuple[str, str, str]]
    log_length: int
    log_hash: str

    @property
    def id(self) -> str:
        payload = json.dumps(
            {
                "site": self.site,
                "installed": sorted(self.installed),
                "staged": sorted(self.staged),
                "log_length": self.log_length,
                "log_hash": self.log_hash,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


class UnknownSnapshot(KeyError):
    pass


class World:
    """One simulated environment: servers, sites, links, fault script."""

    def __init__(
        self,
        name: str = "world",
        servers: list[Server] | None = None,
        sites: list[SiteState] | None = None,
        fault_script: FaultScript | None = None,
        default_site: str | None = None,
        verify_replay: bool = False,
    ):
        self.name = name
        self.servers: dict[str, Server] = {s.id: s for s in (servers or [])}
        self.sites: dict[str, SiteState] = {s.id: s for s in (sites or [])}
        self.fault_script = fault_script or FaultScript()
        self.links_down: set[str] = set()
        self.default_site = default_site or (sorted(self.sites)[0] if self.sites else None)
        self.verify_replay = verify_replay
        self._snapshots: dict[str, SiteSnapshot] = {}
        self._attempt_marks: dict[str, dict[str, int]] = {}

    # -- catalog ------------------------------------------------------------

    def catalog(self) -> dict[tuple[str, str], PackageDescriptor]:
        """Union of all hosted descriptors, lowest server id winning ties."""
        out: dict[tuple[str, str], PackageDescriptor] = {}
        for sid in sorted(self.servers):
            for p in self.servers[sid].hosted:
                out.setdefault((p.app_name, p.version), p)
        return out

    def descriptor(self, app: str, version: str) -> PackageDescriptor | None:
        return self.catalog().get((app, version))

    def site(self, site_id: str | None) -> SiteState:
        sid = site_id or self.default_site
        if sid is None or sid not in self.sites:
            raise KeyError(f"unknown site {sid!r}")
        return self.sites[sid]

    def split_per_site(self) -> list["World"]:
        """One disjoint single-site world per site, for multi-site runs."""
        out = []
        for sid in sorted(self.sites):
            src = self.sites[sid]
            site = SiteState(
                id=src.id,
                installed=set(src.installed),
                staged=set(src.staged),
                effect_log=list(src.effect_log),
                platform_tags=set(src.platform_tags),
            )
            servers = [Server(s.id, list(s.hosted), s.up) for s in self.servers.values()]
            out.append(World(f"{self.name}/{sid}", servers, [site], self.fault_script.copy(), sid,
                             verify_replay=self.verify_replay))
        return out

    # -- effects and attempts ------------------------------------------------

    def append_effect(self, ctx: "ActionContext", site_id: str, kind: EffectKind, subject: Subject) -> Effect:
        site = self.site(site_id)
        eff = Effect(len(site.effect_log), kind, subject)
        site.effect_log.append(eff)
        apply_effect(site, kind, subject)
        ctx.effect_recorded(site.id, eff)
        if self.verify_replay:
            self._assert_replay(site)
        return eff

    def _assert_replay(self, site: SiteState) -> None:
        fresh = SiteState(id=site.id)
        for eff in site.effect_log:
            apply_effect(fresh, eff.kind, eff.subject)
        if fresh.installed != site.installed or fresh.staged != site.staged:
            raise AssertionError(f"effect log of site {site.id!r} does not reproduce the live inventory")

    def begin_attempt(self, attempt_id: str) -> None:
        self._attempt_marks[attempt_id] = {sid: len(s.effect_log) for sid, s in self.sites.items()}

    def rollback_action(self, attempt_id: str) -> int:
        """Physically undo one attempt: truncate its log suffix on every site.

        Idempotent; returns the number of effects removed.  Safe because the
        engine is single-threaded: an attempt's effects are contiguous.
        """
        marks = self._attempt_marks.pop(attempt_id, None)
        if marks is None:
            return 0
        removed = 0
        for sid, mark in marks.items():
            site = self.sites[sid]
            if len(site.effect_log) <= mark:
                continue
            removed += len(site.effect_log) - mark
            del site.effect_log[mark:]
            rebuilt = SiteState(id=site.id)
            for eff in site.effect_log:
                apply_effect(rebuilt, eff.kind, eff.subject)
            site.installed = rebuilt.installed
            site.staged = rebuilt.staged
        return removed

    def end_attempt(self, attempt_id: str) -> None:
        self._attempt_marks.pop(attempt_id, None)

    # -- snapshots ------------------------------------------------------------

    def snapshot(self, site_id: str) -> str:
        site = self.site(site_id)
        log_payload = json.dumps(
            [(e.seq, e.kind.value, str(e.subject)) for e in site.effect_log], sort_keys=True
        )
        snap = SiteSnapshot(
            site=site.id,
            installed=frozenset(site.installed),
            staged=frozenset(site.staged),
            log_length=len(site.effect_log),
            log_hash=hashlib.sha256(log_payload.encode()).hexdigest()[:16],
        )
        self._snapshots[snap.id] = snap
        return snap.id

    def snapshot_all(self) -> str:
        """Composite snapshot over every site; id is a content hash."""
        parts = [self.snapshot(sid) for sid in sorted(self.sites)]
        combined = hashlib.sha256(":".join(parts).encode()).hexdigest()[:16]
        self._snapshots[combined] = None  # marker; parts are addressable
        self._composites = getattr(self, "_composites", {})
        self._composites[combined] = parts
        return combined

    def restore_check(self, site_id: str, snapshot_id: str) -> bool:
        """True iff the site's current state equals the snapshot.

        Equality is deep: installed set, staged set, and the snapshot-length
        prefix of the effect log must all match.  Compensation must *reach*
        the snapshot by appending inverse effects, never teleport to it.
        """
        snap = self._snapshots.get(snapshot_id)
        if snap is None and snapshot_id not in getattr(self, "_composites", {}):
            raise UnknownSnapshot(snapshot_id)
        if snap is None:
            return all(
                self.restore_check(self._snapshots[part].site, part)
                for part in self._composites[snapshot_id]
            )
        site = self.site(snap.site)
        if set(snap.installed) != site.installed or set(snap.staged) != site.staged:
            return False
        if len(site.effect_log) < snap.log_length:
            return False
        prefix = site.effect_log[: snap.log_length]
        log_payload = json.dumps([(e.seq, e.kind.value, str(e.subject)) for e in prefix], sort_keys=True)
        return hashlib.sha256(log_payload.encode()).hexdigest()[:16] == snap.log_hash

    def restore_diff(self, snapshot_id: str) -> list[str]:
        """Human-readable residue description when restore_check fails."""
        out: list[str] = []
        parts = getattr(self, "_composites", {}).get(snapshot_id, [snapshot_id])
        for part in parts:
            snap = self._snapshots.get(part)
            if snap is None:
                continue
            site = self.site(snap.site)
            for entry in sorted(site.installed - set(snap.installed)):
                out.append(f"{snap.site}: unexpected component {entry[0]}@{entry[1]}#{entry[2]}")
            for entry in sorted(set(snap.installed) - site.installed):
                out.append(f"{snap.site}: missing component {entry[0]}@{entry[1]}#{entry[2]}")
            for unit in sorted(site.staged - set(snap.staged)):
                out.append(f"{snap.site}: leftover staged unit {unit[0]}@{unit[1]}#{unit[2]}")
            for unit in sorted(set(snap.staged) - site.staged):
                out.append(f"{snap.site}: missing staged unit {unit[0]}@{unit[1]}#{unit[2]}")
        return out

    # -- fault script -----------------------------------------------------------

    def consult_faults(self, point: CheckPoint) -> FaultEntry | None:
        """Fire every due trigger; return an entry that demands a raise, if any."""
        raising: FaultEntry | None = None
        for entry in self.fault_script.entries:
            if not entry.matches(point):
                continue
            entry.fired = True
            if entry.fault == "server_down" and entry.target in self.servers:
                self.servers[entry.target].up = False
            elif entry.fault == "link_down" and entry.target is not None:
                self.links_down.add(entry.target)
            elif entry.fault == "action_error" and raising is None:
                raising = entry
        return raising


@dataclass
class ActionContext:
    """Everything one action attempt needs from the engine."""

    world: World
    activity: str
    action: str
    attempt_id: str
    inputs: dict[str, object]
    recorder: object  # duck-typed: .clock property, .emit(kind, activity, **payload)

    def target_site(self) -> str | None:
        site = self.inputs.get("site")
        return str(site) if site else self.world.default_site

    def checkpoint(self, site: str | None, server: str | None, progress: float | None) -> CheckPoint:
        return CheckPoint(self.recorder.clock, self.action, self.activity, site, server, progress)

    def effect_recorded(self, site_id: str, eff: Effect) -> None:
        self.recorder.emit(
            "SiteEffect", self.activity,
            site=site_id, seq=eff.seq, effect=eff.kind.value, subject=str(eff.subject),
        )


# --- actions -----------------------------------------------------------------


def _package_inputs(ctx: ActionContext) -> tuple[str, str]:
    app = str(ctx.inputs.get("app_name", ""))
    version = str(ctx.inputs.get("version", ""))
    return app, version


def search_package(ctx: ActionContext) -> ActionOutcome:
    """Find the lowest-id reachable server hosting the requested package."""
    world = ctx.world
    app, version = _package_inputs(ctx)
    fault = world.consult_faults(ctx.checkpoint(None, None, None))
    if fault is not None:
        return raised(FailureKind.ACTION_ERROR, fault.detail or "injected action error")
    hosting = [s for s in sorted(world.servers) if world.servers[s].hosts(app, version)]
    if not hosting:
        return raised(FailureKind.ACTION_ERROR, f"package not found: {app} {version}")
    up = [s for s in hosting if world.servers[s].up]
    if not up:
        return raised(FailureKind.SERVER_DOWN, f"no reachable server hosts {app} {version}")
    return done({"server": up[0]})


def _constraint_ok(installed_version: str, constraint: str) -> bool:
    def key(v: str) -> tuple:
        return tuple(int(p) if p.isdigit() else p for p in v.split("."))

    if constraint.startswith(">="):
        return key(installed_version) >= key(constraint[2:])
    return installed_version == constraint


def resolve_dependencies(ctx: ActionContext) -> ActionOutcome:
    """Topologically ordered closure of missing dependencies, root last."""
    world = ctx.world
    app, version = _package_inputs(ctx)
    fault = world.consult_faults(ctx.checkpoint(ctx.target_site(), None, None))
    if fault is not None:
        return raised(FailureKind.ACTION_ERROR, fault.detail or "injected action error")
    site = world.site(ctx.target_site())
    catalog = world.catalog()
    root = catalog.get((app, version))
    if root is None:
        return raised(FailureKind.ACTION_ERROR, f"package not found: {app} {version}")

    order: list[tuple[str, str]] = []
    visiting: list[tuple[str, str]] = []
    settled: set[tuple[str, str]] = set()

    def visit(pkg: PackageDescriptor) -> ActionOutcome | None:
        key = (pkg.app_name, pkg.version)
        if key in settled:
            return None
        if key in visiting:
            cycle = " -> ".join(f"{a}@{v}" for a, v in visiting + [key])
            return raised(FailureKind.DEPENDENCY_CONFLICT, f"dependency cycle: {cycle}")
        visiting.append(key)
        for dep in sorted(pkg.depends_on, key=lambda d: d.app_name):
            have = site.installed_version(dep.app_name)
            if have is not None:
                if not _constraint_ok(have, dep.constraint):
                    return raised(
                        FailureKind.DEPENDENCY_CONFLICT,
                        f"{pkg.app_name} requires {dep.app_name} {dep.constraint}, site has {have}",
                    )
                continue
            candidates = sorted(
                (a, v) for (a, v) in catalog if a == dep.app_name and _constraint_ok(v, dep.constraint)
            )
            if not candidates:
                return raised(
                    FailureKind.DEPENDENCY_CONFLICT,
                    f"no package satisfies {dep.app_name} {dep.constraint}",
                )
            failure = visit(catalog[candidates[-1]])
            if failure is not None:
                return failure
        visiting.pop()
        settled.add(key)
        order.append(key)
        return None

    failure = visit(root)
    if failure is not None:
        return failure
    install_list = ",".join(f"{a}@{v}" for a, v in order)
    return done({"install_list": install_list}, resolved_count=len(order))


def transfer(ctx: ActionContext) -> ActionOutcome:
    """Stage a package's size units one by one, consulting faults each step."""
    world = ctx.world
    app, version = _package_inputs(ctx)
    server_id = str(ctx.inputs.get("server", ""))
    site_id = ctx.target_site()
    server = world.servers.get(server_id)
    if server is None:
        return raised(FailureKind.ACTION_ERROR, f"unknown server {server_id!r}", progress_fraction=0.0)
    pkg = world.descriptor(app, version)
    if pkg is None or not server.hosts(app, version):
        return raised(FailureKind.ACTION_ERROR, f"server {server_id} does not host {app} {version}",
                      progress_fraction=0.0)
    total = pkg.total_units
    staged = 0

    def health(progress: float) -> ActionOutcome | None:
        if not server.up:
            return raised(FailureKind.NETWORK_FAILURE, f"server {server_id} went down during transfer",
                          progress_fraction=progress)
        if site_id in world.links_down:
            return raised(FailureKind.NETWORK_FAILURE, f"link to site {site_id} is down",
                          progress_fraction=progress)
        return None

    fault = world.consult_faults(ctx.checkpoint(site_id, server_id, 0.0))
    if fault is not None:
        return raised(FailureKind.ACTION_ERROR, fault.detail or "injected action error", progress_fraction=0.0)
    failure = health(0.0)
    if failure is not None:
        return failure

    for unit in range(1, total + 1):
        world.append_effect(ctx, site_id, EffectKind.FILE_STAGED, Subject(app, version, f"{unit}/{total}", unit=True))
        staged = unit
        progress = staged / total
        fault = world.consult_faults(ctx.checkpoint(site_id, server_id, progress))
        if fault is not None:
            return raised(FailureKind.ACTION_ERROR, fault.detail or "injected action error",
                          progress_fraction=progress)
        failure = health(progress)
        if failure is not None:
            return failure
    return done({"site": site_id, "staged_units": total}, progress_fraction=1.0)


def _staged_units(site: SiteState, app: str, version: str) -> list[str]:
    return sorted((item for a, v, item in site.staged if a == app and v == version),
                  key=lambda s: int(s.split("/")[0]))


def _components_input(ctx: ActionContext, pkg: PackageDescriptor) -> list[Component]:
    raw = ctx.inputs.get("components")
    if not raw:
        return list(pkg.components)
    wanted = [c.strip() for c in str(raw).split(",") if c.strip()]
    return [c for cid in wanted for c in [pkg.component(cid)] if c is not None]


def install(ctx: ActionContext) -> ActionOutcome:
    """Install the package's components from fully staged units."""
    world = ctx.world
    app, version = _package_inputs(ctx)
    site_id = ctx.target_site()
    site = world.site(site_id)
    fault = world.consult_faults(ctx.checkpoint(site_id, None, None))
    if fault is not None:
        return raised(FailureKind.ACTION_ERROR, fault.detail or "injected action error")
    pkg = world.descriptor(app, version)
    if pkg is None:
        return raised(FailureKind.ACTION_ERROR, f"package not found: {app} {version}")
    missing_tags = sorted(pkg.requires_tags - site.platform_tags)
    if missing_tags:
        return raised(FailureKind.PLATFORM_INCOMPATIBLE,
                      f"site {site_id} lacks platform tags: {', '.join(missing_tags)}")
    if len(_staged_units(site, app, version)) < pkg.total_units:
        return raised(FailureKind.ACTION_ERROR,
                      f"incomplete staging: {len(_staged_units(site, app, version))}/{pkg.total_units} units")
    components = _components_input(ctx, pkg)
    for comp in components:
        if site.installed_entry(app, version, comp.id) is None:
            world.append_effect(ctx, site_id, EffectKind.COMPONENT_INSTALLED, Subject(app, version, comp.id))
    return done({"site": site_id, "installed_count": len(components)})


def uninstall(ctx: ActionContext) -> ActionOutcome:
    """Remove installed components; the usual compensation for install."""
    world = ctx.world
    app, version = _package_inputs(ctx)
    site_id = ctx.target_site()
    site = world.site(site_id)
    fault = world.consult_faults(ctx.checkpoint(site_id, None, None))
    if fault is not None:
        return raised(FailureKind.ACTION_ERROR, fault.detail or "injected action error")
    raw = ctx.inputs.get("components")
    if raw:
        wanted = [c.strip() for c in str(raw).split(",") if c.strip()]
        for cid in wanted:
            if site.installed_entry(app, version, cid) is None:
                return raised(FailureKind.ACTION_ERROR, f"component not installed: {app}@{version}#{cid}")
    else:
        wanted = sorted(e[2] for e in site.installed if e[0] == app and e[1] == version)
    for cid in wanted:
        world.append_effect(ctx, site_id, EffectKind.COMPONENT_REMOVED, Subject(app, version, cid))
    return done({"site": site_id, "removed_count": len(wanted)})


def delete_staged(ctx: ActionContext) -> ActionOutcome:
    """Drop every staged unit of a package; the compensation for transfer."""
    world = ctx.world
    app, version = _package_inputs(ctx)
    site_id = ctx.target_site()
    site = world.site(site_id)
    fault = world.consult_faults(ctx.checkpoint(site_id, None, None))
    if fault is not None:
        return raised(FailureKind.ACTION_ERROR, fault.detail or "injected action error")
    units = _staged_units(site, app, version)
    for item in units:
        world.append_effect(ctx, site_id, EffectKind.COMPONENT_REMOVED, Subject(app, version, item, unit=True))
    return done({"site": site_id, "removed_count": len(units)})


def activate(ctx: ActionContext) -> ActionOutcome:
    world = ctx.world
    app, version = _package_inputs(ctx)
    site_id = ctx.target_site()
    site = world.site(site_id)
    fault = world.consult_faults(ctx.checkpoint(site_id, None, None))
    if fault is not None:
        return raised(FailureKind.ACTION_ERROR, fault.detail or "injected action error")
    entries = sorted(e for e in site.installed if e[0] == app and e[1] == version)
    if not entries:
        return raised(FailureKind.ACTION_ERROR, f"nothing installed for {app} {version}")
    for entry in entries:
        if not entry[3]:
            world.append_effect(ctx, site_id, EffectKind.ACTIVATED, Subject(app, version, entry[2]))
    return done({"site": site_id, "activated_count": len(entries)})


def deactivate(ctx: ActionContext) -> ActionOutcome:
    world = ctx.world
    app, version = _package_inputs(ctx)
    site_id = ctx.target_site()
    site = world.site(site_id)
    fault = world.consult_faults(ctx.checkpoint(site_id, None, None))
    if fault is not None:
        return raised(FailureKind.ACTION_ERROR, fault.detail or "injected action error")
    entries = sorted(e for e in site.installed if e[0] == app and e[1] == version and e[3])
    for entry in entries:
        world.append_effect(ctx, site_id, EffectKind.DEACTIVATED, Subject(app, version, entry[2]))
    return done({"site": site_id, "deactivated_count": len(entries)})


ACTIONS = {
    "search_package": search_package,
    "resolve_dependencies": resolve_dependencies,
    "transfer": transfer,
    "install": install,
    "uninstall": uninstall,
    "delete_staged": delete_staged,
    "activate": activate,
    "deactivate": deactivate,
}


class UnknownAction(KeyError):
    pass


def perform(action: str, ctx: ActionContext) -> ActionOutcome:
    fn = ACTIONS.get(action)
    if fn is None:
        raise UnknownAction(action)
    return fn(ctx)


# --- world files (.world) ------------------------------------------------------


@dataclass
class WorldLoadResult:
    world: World | None
    diagnostics: list[ParseDiagnostic] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.world is not None


def _seed_preinstalled(site: SiteState, entries: list[tuple[str, str, str, bool]]) -> None:
    for app, version, comp, active in entries:
        eff = Effect(len(site.effect_log), EffectKind.COMPONENT_INSTALLED, Subject(app, version, comp))
        site.effect_log.append(eff)
        apply_effect(site, eff.kind, eff.subject)
        if active:
            eff = Effect(len(site.effect_log), EffectKind.ACTIVATED, Subject(app, version, comp))
            site.effect_log.append(eff)
            apply_effect(site, eff.kind, eff.subject)


def parse_world(source: str, file: str = "<string>") -> WorldLoadResult:
    """Parse `.world` text; same block syntax and diagnostics as `.dproc`."""
    reader = _Reader(source, file)
    roots = reader.read_tree()
    if not roots:
        reader.error(SourceSpan(file, 1, 1, 0), "expected world header")
        return WorldLoadResult(None, reader.diags)
    head = roots[0]
    if head.key != "world" or len(head.tokens) != 2:
        reader.error(head.span(file), "expected world header: world <name>")
        return WorldLoadResult(None, reader.diags)
    for extra in roots[1:]:
        reader.error(extra.span(file), "content after the world block")

    name = head.tokens[1].text
    packages: dict[tuple[str, str], PackageDescriptor] = {}
    servers: list[Server] = []
    sites: list[SiteState] = []
    script = FaultScript()
    default_site: str | None = None
    hosts_refs: list[tuple[Server, str, str, Line]] = []

    guard = pml._DuplicateGuard(reader)
    for line in head.children:
        key = line.key
        if key == "default_site":
            if guard.check(line) and pml._arity(reader, line, 2):
                default_site = line.tokens[1].text
        elif key == "package":
            if pml._arity(reader, line, 3):
                pkg = _parse_package(reader, line)
                if (pkg.app_name, pkg.version) in packages:
                    reader.error(line.span(file), f"duplicate package {pkg.app_name} {pkg.version}")
                packages[(pkg.app_name, pkg.version)] = pkg
        elif key == "server":
            if pml._arity(reader, line, 2):
                servers.append(_parse_server(reader, line, hosts_refs))
        elif key == "site":
            if pml._arity(reader, line, 2):
                sites.append(_parse_site(reader, line))
        elif key == "site_range":
            if pml._arity(reader, line, 4):
                sites.extend(_parse_site_range(reader, line))
        elif key == "fault":
            entry = _parse_fault(reader, line)
            if entry is not None:
                script.entries.append(entry)
        else:
            reader.warning(line.span(file), f"unknown key {key!r} ignored")

    for server, app, version, line in hosts_refs:
        pkg = packages.get((app, version))
        if pkg is None:
            reader.error(line.span(file), f"hosts references unknown package {app} {version}")
        else:
            server.hosted.append(pkg)

    if any(d.severity is Severity.ERROR for d in reader.diags):
        return WorldLoadResult(None, reader.diags)
    world = World(name, servers, sites, script, default_site)
    if default_site is not None and default_site not in world.sites:
        reader.error(head.span(file), f"default_site {default_site!r} does not exist")
        return WorldLoadResult(None, reader.diags)
    return WorldLoadResult(world, reader.diags)


def _parse_package(reader: _Reader, line: Line) -> PackageDescriptor:
    app, version = line.tokens[1].text, line.tokens[2].text
    components: list[Component] = []
    depends: list[Dependency] = []
    tags: set[str] = set()
    for child in line.children:
        if child.key == "component" and pml._arity(reader, child, 4):
            mandatory_tok = child.tokens[2].text
            if mandatory_tok not in ("mandatory", "optional"):
                reader.error(child.tokens[2].span(reader.file), "expected 'mandatory' or 'optional'")
                continue
            if not INT_RE.match(child.tokens[3].text) or int(child.tokens[3].text) < 1:
                reader.error(child.tokens[3].span(reader.file), "size must be a positive integer")
                continue
            components.append(Component(child.tokens[1].text, mandatory_tok == "mandatory",
                                        int(child.tokens[3].text)))
        elif child.key == "depends" and pml._arity(reader, child, 3):
            depends.append(Dependency(child.tokens[1].text, child.tokens[2].text))
        elif child.key == "requires_tag" and pml._arity(reader, child, 2):
            tags.add(child.tokens[1].text)
        elif child.key not in ("component", "depends", "requires_tag"):
            reader.warning(child.span(reader.file), f"unknown key {child.key!r} ignored")
    if not any(c.mandatory for c in components):
        reader.error(line.span(reader.file), f"package {app} {version} needs at least one mandatory component")
    ids = [c.id for c in components]
    if len(ids) != len(set(ids)):
        reader.error(line.span(reader.file), f"package {app} {version} has duplicate component ids")
    return PackageDescriptor(app, version, tuple(components), tuple(depends), frozenset(tags))


def _parse_server(reader: _Reader, line: Line, hosts_refs: list) -> Server:
    server = Server(line.tokens[1].text)
    for child in line.children:
        if child.key == "hosts" and pml._arity(reader, child, 3):
            hosts_refs.append((server, child.tokens[1].text, child.tokens[2].text, child))
        elif child.key == "up" and pml._arity(reader, child, 2):
            server.up = child.tokens[1].text == "true"
        elif child.key not in ("hosts", "up"):
            reader.warning(child.span(reader.file), f"unknown key {child.key!r} ignored")
    return server


def _parse_site_body(reader: _Reader, children: list[Line], site: SiteState) -> None:
    pre: list[tuple[str, str, str, bool]] = []
    for child in children:
        if child.key == "platform_tag" and pml._arity(reader, child, 2):
            site.platform_tags.add(child.tokens[1].text)
        elif child.key == "installed":
            if len(child.tokens) not in (4, 5):
                reader.error(child.span(reader.file), "installed expects: installed <app> <version> <component> [active]")
                continue
            active = len(child.tokens) == 5 and child.tokens[4].text == "active"
            pre.append((child.tokens[1].text, child.tokens[2].text, child.tokens[3].text, active))
        elif child.key not in ("platform_tag", "installed"):
            reader.warning(child.span(reader.file), f"unknown key {child.key!r} ignored")
    _seed_preinstalled(site, pre)


def _parse_site(reader: _Reader, line: Line) -> SiteState:
    site = SiteState(id=line.tokens[1].text)
    _parse_site_body(reader, line.children, site)
    return site


def _parse_site_range(reader: _Reader, line: Line) -> list[SiteState]:
    prefix = line.tokens[1].text
    if not INT_RE.match(line.tokens[2].text) or not INT_RE.match(line.tokens[3].text):
        reader.error(line.span(reader.file), "site_range expects: site_range <prefix> <start> <count>")
        return []
    start, count = int(line.tokens[2].text), int(line.tokens[3].text)
    width = len(str(start + count - 1))
    sites = []
    for i in range(start, start + count):
        site = SiteState(id=f"{prefix}-{i:0{width}d}")
        _parse_site_body(reader, line.children, site)
        sites.append(site)
    return sites


def _parse_fault(reader: _Reader, line: Line) -> FaultEntry | None:
    toks = line.tokens[1:]
    if not toks:
        reader.error(line.span(reader.file), "fault expects a trigger and a fault")
        return None
    entry = FaultEntry(trigger=toks[0].text)
    i = 1
    if entry.trigger == "at_clock":
        if len(toks) < 2 or not INT_RE.match(toks[1].text):
            reader.error(line.span(reader.file), "at_clock expects an integer clock")
            return None
        entry.at_clock = int(toks[1].text)
        i = 2
    elif entry.trigger == "during_action":
        if len(toks) < 3:
            reader.error(line.span(reader.file), "during_action expects: during_action <action|activity> <site|server>")
            return None
        entry.action_ref, entry.place = toks[1].text, toks[2].text
        i = 3
    elif entry.trigger == "after_fraction":
        if len(toks) < 3 or not (FLOAT_RE.match(toks[2].text) or INT_RE.match(toks[2].text)):
            reader.error(line.span(reader.file), "after_fraction expects: after_fraction <action|activity> <fraction>")
            return None
        entry.action_ref, entry.fraction = toks[1].text, float(toks[2].text)
        i = 3
    else:
        reader.error(toks[0].span(reader.file), f"unknown fault trigger {entry.trigger!r}")
        return None
    if len(toks) <= i:
        reader.error(line.span(reader.file), "fault is missing its fault kind")
        return None
    entry.fault = toks[i].text
    if entry.fault in ("server_down", "link_down"):
        if len(toks) != i + 2:
            reader.error(line.span(reader.file), f"{entry.fault} expects a target id")
            return None
        entry.target = toks[i + 1].text
    elif entry.fault == "action_error":
        if len(toks) != i + 2:
            reader.error(line.span(reader.file), "action_error expects a detail string")
            return None
        entry.detail = toks[i + 1].text
    else:
        reader.error(toks[i].span(reader.file), f"unknown fault kind {entry.fault!r}")
        return None
    return entry


def load_world(path: str, verify_replay: bool = False) -> WorldLoadResult:
    with open(path, encoding="utf-8") as fh:
        result = parse_world(fh.read(), file=path)
    if result.world is not None:
        result.world.verify_replay = verify_replay
    return result
