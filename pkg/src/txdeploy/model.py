"""Process meta-model: activities, ports, dataflows, savepoints, recovery bindings.

A deployment process is a graph of typed activities exchanging typed products
through ports.  Recovery behaviour is declared statically: activities are
critical or not, may carry a savepoint, and may be the target of one
contingency and one compensation activity.  This module holds the validated
in-memory form plus the graph queries the engine needs (execution order,
nearest savepoint, compensation chain).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum

# Reserved name for the implicit savepoint taken before the first activity.
PROCESS_START = "process-start"

# Actions that never touch site state.  Anything not listed is treated as
# effectful when deciding whether an uncompensated activity blocks rollback.
READ_ONLY_ACTIONS = frozenset({"search_package", "resolve_dependencies"})


class ActivityKind(str, Enum):
    SIMPLE = "simple"
    COMPOSITE = "composite"


class Criticality(str, Enum):
    CRITICAL = "critical"
    NON_CRITICAL = "non_critical"


class PortDirection(str, Enum):
    IN = "in"
    OUT = "out"


class PortChannel(str, Enum):
    OK = "ok"
    KO = "ko"


class ScalarKind(str, Enum):
    TEXT = "text"
    INTEGER = "integer"
    FRACTION = "fraction"
    BINARY_REF = "binary_ref"


class SnapshotScope(str, Enum):
    SITE_STATE = "site_state"
    SITE_STATE_AND_PRODUCTS = "site_state_and_products"


class MultiSiteMode(str, Enum):
    ALL_OR_NOTHING = "all_or_nothing"
    BEST_EFFORT = "best_effort"


@dataclass
class PortDef:
    """A named, directed, typed connection point on an activity."""

    id: str
    direction: PortDirection
    channel: PortChannel
    product_type: str


@dataclass
class ContextVarDef:
    """Runtime variable observable at failure time (e.g. transfer progress)."""

    name: str
    kind: ScalarKind
    updated_by: str


@dataclass
class ProductTypeDef:
    name: str
    fields: dict[str, ScalarKind] = field(default_factory=dict)


@dataclass
class Product:
    """A typed value bundle flowing between activities."""

    type: str
    values: dict[str, object] = field(default_factory=dict)


@dataclass
class DataflowDef:
    from_activity: str
    from_port: str
    to_activity: str
    to_port: str

    def key(self) -> tuple[str, str, str, str]:
        return (self.from_activity, self.from_port, self.to_activity, self.to_port)


@dataclass(frozen=True)
class SavepointRef:
    """A rollback target: either an activity's savepoint or the process start."""

    activity: str
    snapshot_scope: SnapshotScope = SnapshotScope.SITE_STATE

    @property
    def is_process_start(self) -> bool:
        return self.activity == PROCESS_START


PROCESS_START_SAVEPOINT = SavepointRef(PROCESS_START, SnapshotScope.SITE_STATE)


@dataclass
class MultiSitePolicy:
    mode: MultiSiteMode
    min_success_fraction: float | None = None
    retry_list_output: bool = False


@dataclass
class ActivityDef:
    """One unit of deployment work, plus its recovery declarations.

    ``contingency_of`` / ``compensation_of`` mark this activity as a recovery
    activity bound to a main-flow target; such activities never appear in the
    execution order and run only when the engine decides to.
    """

    id: str
    kind: ActivityKind = ActivityKind.SIMPLE
    children: list[str] = field(default_factory=list)
    role: str = ""
    attributes: dict[str, object] = field(default_factory=dict)
    criticality: Criticality = Criticality.CRITICAL
    ports: list[PortDef] = field(default_factory=list)
    action: str | None = None
    savepoint: SnapshotScope | None = None
    contingency_of: str | None = None
    compensation_of: str | None = None
    context_vars: list[ContextVarDef] = field(default_factory=list)

    @property
    def is_recovery(self) -> bool:
        return self.contingency_of is not None or self.compensation_of is not None

    @property
    def is_critical(self) -> bool:
        return self.criticality is Criticality.CRITICAL

    def port(self, port_id: str) -> PortDef | None:
        for p in self.ports:
            if p.id == port_id:
                return p
        return None

    def ko_port(self) -> PortDef | None:
        for p in self.ports:
            if p.direction is PortDirection.OUT and p.channel is PortChannel.KO:
                return p
        return None

    def declared_var(self, name: str) -> ContextVarDef | None:
        for v in self.context_vars:
            if v.name == name:
                return v
        return None


@dataclass
class ProcessDefinition:
    name: str
    activities: list[ActivityDef] = field(default_factory=list)
    dataflows: list[DataflowDef] = field(default_factory=list)
    product_types: list[ProductTypeDef] = field(default_factory=list)
    entry_activity: str | None = None
    multi_site_policy: MultiSitePolicy | None = None

    def activity(self, activity_id: str) -> ActivityDef | None:
        for a in self.activities:
            if a.id == activity_id:
                return a
        return None

    def product_type(self, name: str) -> ProductTypeDef | None:
        for t in self.product_types:
            if t.name == name:
                return t
        return None

    def contingency_for(self, target_id: str) -> ActivityDef | None:
        for a in self.activities:
            if a.contingency_of == target_id:
                return a
        return None

    def compensation_for(self, target_id: str) -> ActivityDef | None:
        for a in self.activities:
            if a.compensation_of == target_id:
                return a
        return None

    def savepoint_ref(self, activity_id: str) -> SavepointRef | None:
        a = self.activity(activity_id)
        if a is None or a.savepoint is None:
            return None
        return SavepointRef(activity_id, a.savepoint)


@dataclass
class Violation:
    """One well-formedness failure, anchored to the offending element."""

    element: str
    message: str

    def __str__(self) -> str:
        return f"{self.element}: {self.message}"


class CycleDetected(Exception):
    """The OK-flow graph has a cycle; impossible after a clean validate()."""


class UncompensatableChain(Exception):
    """A critical, effectful activity inside a rollback span has no compensation."""

    def __init__(self, activity_id: str):
        super().__init__(f"no compensation bound for critical activity {activity_id!r}")
        self.activity_id = activity_id


def _is_effectful_static(activity: ActivityDef) -> bool:
    return activity.action not in READ_ONLY_ACTIONS


def validate(process: ProcessDefinition) -> list[Violation]:
    """Check every meta-model invariant; return all violations found.

    An empty list means the definition is well-formed.  Validation never
    raises for content problems and never stops at the first finding.
    """
    v: list[Violation] = []
    seen_ids: set[str] = set()
    for a in process.activities:
        if a.id in seen_ids:
            v.append(Violation(a.id, "duplicate activity id"))
        seen_ids.add(a.id)
        if a.id == PROCESS_START:
            v.append(Violation(a.id, f"activity id {PROCESS_START!r} is reserved"))

    by_id = {a.id: a for a in process.activities}

    if process.entry_activity is None:
        v.append(Violation(process.name, "process has no entry activity"))
    elif process.entry_activity not in by_id:
        v.append(Violation(process.name, f"entry activity {process.entry_activity!r} does not exist"))

    type_names: set[str] = set()
    for t in process.product_types:
        if t.name in type_names:
            v.append(Violation(t.name, "duplicate product type"))
        type_names.add(t.name)

    child_parent: dict[str, str] = {}
    for a in process.activities:
        v.extend(_check_activity(a, by_id, type_names))
        if a.kind is ActivityKind.COMPOSITE:
            for c in a.children:
                if c in child_parent:
                    v.append(Violation(a.id, f"child {c!r} already belongs to composite {child_parent[c]!r}"))
                child_parent[c] = a.id

    v.extend(_check_recovery_bindings(process, by_id))
    v.extend(_check_dataflows(process, by_id))

    if not any(x.message == "duplicate activity id" for x in v):
        v.extend(_check_graph(process, by_id))
    return v


def _check_activity(a: ActivityDef, by_id: dict[str, ActivityDef], type_names: set[str]) -> list[Violation]:
    v: list[Violation] = []
    if a.kind is ActivityKind.COMPOSITE:
        if not a.children:
            v.append(Violation(a.id, "composite activity must have at least one child"))
        if a.action is not None:
            v.append(Violation(a.id, "composite activity cannot have an action"))
        if a.ports:
            v.append(Violation(a.id, "composite activity cannot declare ports"))
        if a.savepoint is not None:
            v.append(Violation(a.id, "savepoints attach to simple activities only"))
        if a.criticality is not Criticality.CRITICAL:
            v.append(Violation(a.id, "criticality attaches to simple activities only"))
        for c in a.children:
            if c not in by_id:
                v.append(Violation(a.id, f"child {c!r} does not exist"))
            elif by_id[c].is_recovery:
                v.append(Violation(a.id, f"child {c!r} is a recovery activity"))
    else:
        if a.children:
            v.append(Violation(a.id, "simple activity cannot have children"))
        if a.action is None:
            v.append(Violation(a.id, "simple activity must have an action"))
        ko = [p for p in a.ports if p.direction is PortDirection.OUT and p.channel is PortChannel.KO]
        if len(ko) != 1:
            v.append(Violation(a.id, f"activity must have exactly one out/ko port, found {len(ko)}"))

    port_ids: set[str] = set()
    for p in a.ports:
        if p.id in port_ids:
            v.append(Violation(f"{a.id}.{p.id}", "duplicate port id"))
        port_ids.add(p.id)
        if p.product_type not in type_names:
            v.append(Violation(f"{a.id}.{p.id}", f"unknown product type {p.product_type!r}"))

    var_names: set[str] = set()
    for cv in a.context_vars:
        if cv.name in var_names:
            v.append(Violation(a.id, f"duplicate context var {cv.name!r}"))
        var_names.add(cv.name)
    return v


def _check_recovery_bindings(process: ProcessDefinition, by_id: dict[str, ActivityDef]) -> list[Violation]:
    v: list[Violation] = []
    contingency_targets: set[str] = set()
    compensation_targets: set[str] = set()
    for a in process.activities:
        if a.contingency_of is not None and a.compensation_of is not None:
            v.append(Violation(a.id, "contingency_of and compensation_of are mutually exclusive"))
        for attr, target in (("contingency_of", a.contingency_of), ("compensation_of", a.compensation_of)):
            if target is None:
                continue
            if a.kind is ActivityKind.COMPOSITE:
                v.append(Violation(a.id, "recovery activities must be simple"))
            if target not in by_id:
                v.append(Violation(a.id, f"{attr} target {target!r} does not exist"))
                continue
            if by_id[target].is_recovery:
                v.append(Violation(a.id, f"{attr} target {target!r} is itself a recovery activity"))
        if a.contingency_of is not None:
            if a.contingency_of in contingency_targets:
                v.append(Violation(a.id, f"activity {a.contingency_of!r} already has a contingency"))
            contingency_targets.add(a.contingency_of)
        if a.compensation_of is not None:
            if a.compensation_of in compensation_targets:
                v.append(Violation(a.id, f"activity {a.compensation_of!r} already has a compensation"))
            compensation_targets.add(a.compensation_of)
    return v


def _check_dataflows(process: ProcessDefinition, by_id: dict[str, ActivityDef]) -> list[Violation]:
    v: list[Violation] = []
    seen_targets: set[tuple[str, str]] = set()
    for f in process.dataflows:
        label = f"{f.from_activity}.{f.from_port}->{f.to_activity}.{f.to_port}"
        src = by_id.get(f.from_activity)
        dst = by_id.get(f.to_activity)
        if src is None:
            v.append(Violation(label, f"unknown activity {f.from_activity!r}"))
        if dst is None:
            v.append(Violation(label, f"unknown activity {f.to_activity!r}"))
        if src is None or dst is None:
            continue
        sp = src.port(f.from_port)
        dp = dst.port(f.to_port)
        if sp is None:
            v.append(Violation(label, f"unknown port {f.from_port!r} on {f.from_activity!r}"))
        if dp is None:
            v.append(Violation(label, f"unknown port {f.to_port!r} on {f.to_activity!r}"))
        if sp is None or dp is None:
            continue
        if sp.direction is not PortDirection.OUT:
            v.append(Violation(label, "dataflow source must be an out port"))
        if dp.direction is not PortDirection.IN:
            v.append(Violation(label, "dataflow target must be an in port"))
        if sp.channel is not dp.channel:
            v.append(Violation(label, "dataflow endpoints must share a channel (ok->ok or ko->ko)"))
        if sp.product_type != dp.product_type:
            v.append(Violation(label, f"product type mismatch: {sp.product_type!r} vs {dp.product_type!r}"))
        tgt = (f.to_activity, f.to_port)
        if tgt in seen_targets:
            v.append(Violation(label, f"in port {f.to_activity}.{f.to_port} is fed by more than one dataflow"))
        seen_targets.add(tgt)
    return v


def _ok_flow_edges(process: ProcessDefinition, by_id: dict[str, ActivityDef]) -> list[tuple[str, str]]:
    """Directed edges of the forward execution graph, over main activities."""
    edges: list[tuple[str, str]] = []
    for f in process.dataflows:
        src = by_id.get(f.from_activity)
        dst = by_id.get(f.to_activity)
        if src is None or dst is None:
            continue
        sp = src.port(f.from_port)
        if sp is None or sp.channel is not PortChannel.OK:
            continue
        if src.is_recovery or dst.is_recovery:
            continue
        edges.append((f.from_activity, f.to_activity))
    for a in process.activities:
        if a.kind is ActivityKind.COMPOSITE:
            pairs = zip(a.children, a.children[1:])
            edges.extend((x, y) for x, y in pairs if x in by_id and y in by_id)
    return edges


def _check_graph(process: ProcessDefinition, by_id: dict[str, ActivityDef]) -> list[Violation]:
    v: list[Violation] = []
    edges = _ok_flow_edges(process, by_id)
    cycle = _find_cycle([a.id for a in process.activities if not a.is_recovery], edges)
    if cycle:
        v.append(Violation(" -> ".join(cycle), "ok-flow graph has a cycle"))

    if process.entry_activity in by_id:
        reachable = _reachable_from(process, by_id, process.entry_activity)
        for a in process.activities:
            if a.id not in reachable:
                v.append(Violation(a.id, "not reachable from entry activity"))

    if not cycle:
        try:
            order = execution_order(process)
        except CycleDetected:
            order = []
        pos = {aid: i for i, aid in enumerate(order)}
        for a in process.activities:
            if a.is_recovery or a.kind is ActivityKind.COMPOSITE or not a.is_critical:
                continue
            if a.id not in pos:
                continue
            if process.contingency_for(a.id) is not None:
                continue
            sp = nearest_savepoint(process, a.id)
            try:
                compensation_chain(process, a.id, sp)
            except UncompensatableChain as exc:
                v.append(Violation(
                    a.id,
                    "critical activity has neither a contingency nor a compensation path "
                    f"to a savepoint (blocked at {exc.activity_id!r})",
                ))
    return v


def _find_cycle(nodes: list[str], edges: list[tuple[str, str]]) -> list[str]:
    adj: dict[str, list[str]] = {n: [] for n in nodes}
    for x, y in edges:
        if x in adj and y in adj:
            adj[x].append(y)
    WHITE, GREY, BLACK = 0, 1, 2
    colour = {n: WHITE for n in nodes}
    stack: list[str] = []

    def visit(n: str) -> list[str]:
        colour[n] = GREY
        stack.append(n)
        for m in adj[n]:
            if colour[m] == GREY:
                return stack[stack.index(m):] + [m]
            if colour[m] == WHITE:
                found = visit(m)
                if found:
                    return found
        stack.pop()
        colour[n] = BLACK
        return []

    for n in nodes:
        if colour[n] == WHITE:
            found = visit(n)
            if found:
                return found
    return []


def _reachable_from(process: ProcessDefinition, by_id: dict[str, ActivityDef], entry: str) -> set[str]:
    """Reachability over ok flows, ko flows, composite children and recovery bindings."""
    adj: dict[str, set[str]] = {a.id: set() for a in process.activities}
    for f in process.dataflows:
        if f.from_activity in adj and f.to_activity in adj:
            adj[f.from_activity].add(f.to_activity)
    for a in process.activities:
        if a.kind is ActivityKind.COMPOSITE:
            adj[a.id].update(c for c in a.children if c in adj)
        target = a.contingency_of or a.compensation_of
        if target is not None and target in adj:
            adj[target].add(a.id)
    seen = {entry}
    frontier = [entry]
    while frontier:
        n = frontier.pop()
        for m in sorted(adj.get(n, ())):
            if m not in seen:
                seen.add(m)
                frontier.append(m)
    return seen


def execution_order(process: ProcessDefinition) -> list[str]:
    """Deterministic topological order of the main flow's simple activities.

    Composite activities expand to their children in declared order; recovery
    activities are excluded (they run only on the engine's decision).  Ties are
    broken by ascending activity id, which makes the order the
    lexicographically least topological sort.
    """
    by_id = {a.id: a for a in process.activities}
    mains = [a for a in process.activities if not a.is_recovery]
    simple = [a.id for a in mains if a.kind is ActivityKind.SIMPLE]
    edges = _ok_flow_edges(process, by_id)

    # Lift composite endpoints: an edge touching a composite applies to its
    # first/last child so expansion preserves declared sequencing.
    def expand(node: str, head: bool) -> list[str]:
        a = by_id[node]
        if a.kind is ActivityKind.SIMPLE:
            return [node]
        if not a.children:
            return []
        return expand(a.children[0] if head else a.children[-1], head)

    simple_edges: set[tuple[str, str]] = set()
    for x, y in edges:
        for sx in expand(x, head=False):
            for sy in expand(y, head=True):
                if sx != sy:
                    simple_edges.add((sx, sy))

    indeg = {n: 0 for n in simple}
    adj: dict[str, list[str]] = {n: [] for n in simple}
    for x, y in sorted(simple_edges):
        if x in indeg and y in indeg:
            adj[x].append(y)
            indeg[y] += 1
    heap = [n for n, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order: list[str] = []
    while heap:
        n = heapq.heappop(heap)
        order.append(n)
        for m in adj[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(heap, m)
    if len(order) != len(simple):
        raise CycleDetected(f"cycle among activities of process {process.name!r}")
    return order


def nearest_savepoint(process: ProcessDefinition, failed_activity: str) -> SavepointRef:
    """Latest savepoint strictly before the failed activity in execution order.

    Falls back to the implicit process-start savepoint, which always exists.
    """
    order = execution_order(process)
    if failed_activity not in order:
        raise ValueError(f"activity {failed_activity!r} is not in the main flow")
    idx = order.index(failed_activity)
    for aid in reversed(order[:idx]):
        ref = process.savepoint_ref(aid)
        if ref is not None:
            return ref
    return PROCESS_START_SAVEPOINT


def compensation_chain(
    process: ProcessDefinition,
    from_activity: str | None,
    to: SavepointRef,
    effectful: set[str] | None = None,
) -> list[str]:
    """Compensation activities undoing the span between a savepoint and a failure.

    The span covers activities strictly after the savepoint's activity and
    strictly before ``from_activity`` (``None`` means "after the last
    activity", i.e. full rollback of a completed run), in reverse execution
    order.  Activities without a compensation binding are skipped when they are
    non-critical or when they are not effectful; a critical effectful activity
    without one raises :class:`UncompensatableChain`.

    ``effectful`` narrows "effectful" to a known set of activity ids (the
    engine passes those that actually changed site state); by default any
    activity whose action is not read-only counts.
    """
    order = execution_order(process)
    if from_activity is None:
        end = len(order)
    else:
        if from_activity not in order:
            raise ValueError(f"activity {from_activity!r} is not in the main flow")
        end = order.index(from_activity)
    if to.is_process_start:
        start = 0
    else:
        if to.activity not in order:
            raise ValueError(f"savepoint activity {to.activity!r} is not in the main flow")
        start = order.index(to.activity) + 1
        if start > end:
            raise ValueError(f"savepoint {to.activity!r} does not precede {from_activity!r}")

    chain: list[str] = []
    for aid in reversed(order[start:end]):
        a = process.activity(aid)
        comp = process.compensation_for(aid)
        if comp is not None:
            chain.append(comp.id)
            continue
        is_effectful = aid in effectful if effectful is not None else _is_effectful_static(a)
        if a.is_critical and is_effectful:
            raise UncompensatableChain(aid)
    return chain
