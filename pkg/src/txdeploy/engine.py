"""Deterministic execution engine with forward and backward recovery.

A run drives the main activities of a validated process against one world.
On failure the engine decides, in order: ignore (non-critical), run the bound
contingency (forward recovery), or compensate back to the nearest savepoint
(backward recovery), falling back to a full rollback when the chain cannot be
compensated.  The run keeps durability and site consistency; global atomicity
and isolation are deliberately not provided.

Everything is traced: one event per step with a gapless logical clock, so the
same (process, world script, policy, seed) always produces a byte-identical
trace.  The logical clock is the only notion of time.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum

from . import model, world as world_mod
from .model import (
    ActivityDef,
    PROCESS_START_SAVEPOINT,
    ProcessDefinition,
    Product,
    SavepointRef,
    SnapshotScope,
    UncompensatableChain,
)
from .world import ActionContext, ActionOutcome, FailureKind, World


class InternalInconsistency(RuntimeError):
    """An engine invariant broke; never expected on validated inputs."""


class InvalidProcess(ValueError):
    def __init__(self, violations: list[model.Violation]):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = violations


class ActivityStatus(str, Enum):
    PENDING = "Pending"
    RUNNING = "Running"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    SKIPPED = "Skipped"
    COMPENSATED = "Compensated"
    CONTINGENCY_SUCCEEDED = "ContingencySucceeded"


_S = ActivityStatus
# Failed -> Compensated is absent on purpose: a failed attempt's partial
# effects are undone by the action-level rollback, not by compensation.
LEGAL_TRANSITIONS: frozenset[tuple[ActivityStatus, ActivityStatus]] = frozenset(
    {
        (_S.PENDING, _S.RUNNING),
        (_S.RUNNING, _S.SUCCEEDED),
        (_S.RUNNING, _S.FAILED),
        (_S.FAILED, _S.SKIPPED),
        (_S.FAILED, _S.CONTINGENCY_SUCCEEDED),
        (_S.SUCCEEDED, _S.COMPENSATED),
        (_S.CONTINGENCY_SUCCEEDED, _S.COMPENSATED),
    }
)

# Back-to-Pending moves exist only for re-runs: the resume-after-compensation
# path and fresh attempts of recovery activities.
RESET_TRANSITIONS: frozenset[tuple[ActivityStatus, ActivityStatus]] = frozenset(
    {
        (_S.FAILED, _S.PENDING),
        (_S.COMPENSATED, _S.PENDING),
        (_S.SUCCEEDED, _S.PENDING),
    }
)

DONE_FORWARD = frozenset({_S.SUCCEEDED, _S.CONTINGENCY_SUCCEEDED, _S.SKIPPED})


class TraceEventKind(str, Enum):
    STARTED = "Started"
    FINISHED = "Finished"
    EXCEPTION_RAISED = "ExceptionRaised"
    ROUTED_TO_KO = "RoutedToKO"
    DECISION_MADE = "DecisionMade"
    SAVEPOINT_TAKEN = "SavepointTaken"
    COMPENSATION_RUN = "CompensationRun"
    CONTINGENCY_RUN = "ContingencyRun"
    SITE_EFFECT = "SiteEffect"


@dataclass(frozen=True)
class TraceEvent:
    clock: int
    kind: TraceEventKind
    activity: str | None
    payload: dict


@dataclass
class ActivityContext:
    activity: str
    vars: dict[str, object] = field(default_factory=dict)
    last_error: "ExceptionRecord | None" = None


@dataclass
class ExceptionRecord:
    activity: str
    kind: FailureKind
    detail: str
    context_snapshot: ActivityContext


class RecoveryChoice(str, Enum):
    IGNORE = "Ignore"
    CONTINGENCY = "Contingency"
    COMPENSATE = "CompensateToSavepoint"
    ABORT = "Abort"


@dataclass
class RecoveryDecision:
    choice: RecoveryChoice
    savepoint: SavepointRef | None = None
    reason: str = ""


@dataclass
class RecoveryPolicy:
    """Knobs for the failure handler.

    ``contingency_threshold`` is the cut-point on the driving context
    variable: at or above it a bound contingency is preferred, below it the
    engine compensates.  ``resume_after_compensation`` re-runs the span after
    a successful rollback, at most once per savepoint.
    """

    contingency_threshold: float = 0.5
    driving_var: str = "progress_fraction"
    max_contingency_attempts: int = 1
    resume_after_compensation: bool = False


class Outcome(str, Enum):
    RUNNING = "Running"
    SUCCEEDED_FULL = "SucceededFull"
    SUCCEEDED_PARTIAL = "SucceededPartial"
    FAILED_SAFE = "FailedSafe"
    FAILED_UNSAFE = "FailedUnsafe"


@dataclass
class ExecutionState:
    """Complete record of one run; also the trace recorder."""

    process: str
    site: str | None = None
    statuses: dict[str, ActivityStatus] = field(default_factory=dict)
    contexts: dict[str, ActivityContext] = field(default_factory=dict)
    products: dict[tuple[str, str], Product] = field(default_factory=dict)
    snapshots: dict[SavepointRef, str] = field(default_factory=dict)
    trace: list[TraceEvent] = field(default_factory=list)
    outcome: Outcome = Outcome.RUNNING
    transitions: list[tuple[str, ActivityStatus, ActivityStatus, int]] = field(default_factory=list)

    _product_snaps: dict[SavepointRef, dict] = field(default_factory=dict, repr=False)
    _provisional: Outcome | None = field(default=None, repr=False)
    _done: bool = field(default=False, repr=False)
    _unsafe_evidence: list[str] = field(default_factory=list, repr=False)

    @property
    def clock(self) -> int:
        return len(self.trace)

    def emit(self, kind: TraceEventKind | str, activity: str | None, /, **payload) -> TraceEvent:
        event = TraceEvent(self.clock, TraceEventKind(kind), activity, payload)
        self.trace.append(event)
        return event

    def set_status(self, activity: str, status: ActivityStatus, reset: bool = False) -> None:
        current = self.statuses.get(activity, ActivityStatus.PENDING)
        allowed = (current, status) in LEGAL_TRANSITIONS or (reset and (current, status) in RESET_TRANSITIONS)
        if not allowed:
            raise InternalInconsistency(
                f"illegal status transition {current.value} -> {status.value} on {activity!r}"
            )
        self.statuses[activity] = status
        self.transitions.append((activity, current, status, self.clock))

    def set_outcome(self, outcome: Outcome, defer: bool = False) -> None:
        if defer:
            self._provisional = outcome
            self._done = True
            return
        if self.outcome is not Outcome.RUNNING:
            raise InternalInconsistency(f"outcome already set to {self.outcome.value}")
        self.outcome = outcome
        self._done = True

    def contingency_attempts(self, activity: str) -> int:
        return sum(
            1
            for e in self.trace
            if e.kind is TraceEventKind.CONTINGENCY_RUN and e.payload.get("of") == activity
        )

    def resumes_at(self, savepoint_label: str) -> int:
        return sum(
            1
            for e in self.trace
            if e.kind is TraceEventKind.DECISION_MADE and e.payload.get("resume") == savepoint_label
        )


def _priority(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _zero_value(kind: model.ScalarKind) -> object:
    if kind is model.ScalarKind.INTEGER:
        return 0
    if kind is model.ScalarKind.FRACTION:
        return 0.0
    return ""


def _savepoint_label(ref: SavepointRef) -> str:
    return ref.activity


def ensure_valid(process: ProcessDefinition) -> None:
    violations = model.validate(process)
    if violations:
        raise InvalidProcess(violations)


class _Run:
    """Single-run driver; owns the scheduling loop and recovery plumbing."""

    def __init__(self, process: ProcessDefinition, world: World, policy: RecoveryPolicy,
                 seed: int, defer_outcome: bool = False):
        self.process = process
        self.world = world
        self.policy = policy
        self.seed = seed
        self.defer_outcome = defer_outcome
        self.state = ExecutionState(process=process.name, site=world.default_site)
        self.state._driver = self
        self.order = model.execution_order(process)
        self.positions = {aid: i for i, aid in enumerate(self.order)}
        self.preds = self._predecessors()
        for a in process.activities:
            self.state.statuses.setdefault(a.id, ActivityStatus.PENDING)

    def _predecessors(self) -> dict[str, set[str]]:
        preds: dict[str, set[str]] = {aid: set() for aid in self.order}
        for x, y in self._simple_edges():
            if y in preds and x in preds:
                preds[y].add(x)
        return preds

    def _simple_edges(self) -> set[tuple[str, str]]:
        by_id = {a.id: a for a in self.process.activities}

        def expand(node: str, head: bool) -> list[str]:
            a = by_id[node]
            if a.kind is model.ActivityKind.SIMPLE:
                return [node]
            if not a.children:
                return []
            return expand(a.children[0] if head else a.children[-1], head)

        out: set[tuple[str, str]] = set()
        for x, y in model._ok_flow_edges(self.process, by_id):
            for sx in expand(x, head=False):
                for sy in expand(y, head=True):
                    if sx != sy:
                        out.add((sx, sy))
        return out

    # -- main loop -----------------------------------------------------------

    def execute(self) -> ExecutionState:
        state = self.state
        snap_id = self.world.snapshot_all()
        state.snapshots[PROCESS_START_SAVEPOINT] = snap_id
        state._product_snaps[PROCESS_START_SAVEPOINT] = {}
        state.emit(TraceEventKind.SAVEPOINT_TAKEN, None,
                   savepoint=model.PROCESS_START, scope=SnapshotScope.SITE_STATE.value, snapshot=snap_id)

        while not state._done:
            ready = [
                aid
                for aid in self.order
                if state.statuses[aid] is ActivityStatus.PENDING
                and all(state.statuses[p] in DONE_FORWARD for p in self.preds[aid])
            ]
            if not ready:
                if all(state.statuses[aid] in DONE_FORWARD for aid in self.order):
                    self._finalize_success()
                    break
                raise InternalInconsistency("scheduler stalled with pending activities")
            aid = min(ready, key=lambda x: (_priority(self.seed, x), x))
            self._run_main_activity(aid)
        return state

    def _finalize_success(self) -> None:
        state = self.state
        critical_ok = all(
            state.statuses[aid] in (ActivityStatus.SUCCEEDED, ActivityStatus.CONTINGENCY_SUCCEEDED)
            for aid in self.order
            if self.process.activity(aid).is_critical
        )
        skipped = any(state.statuses[aid] is ActivityStatus.SKIPPED for aid in self.order)
        if not critical_ok:
            raise InternalInconsistency("forward loop completed with a failed critical activity")
        outcome = Outcome.SUCCEEDED_PARTIAL if skipped else Outcome.SUCCEEDED_FULL
        state.set_outcome(outcome, defer=self.defer_outcome)

    # -- activity execution ----------------------------------------------------

    def _gather_flow_inputs(self, aid: str) -> dict[str, object]:
        inputs: dict[str, object] = {}
        for flow in self.process.dataflows:
            if flow.to_activity != aid:
                continue
            product = self.state.products.get((flow.from_activity, flow.from_port))
            if product is not None:
                inputs.update(product.values)
        return inputs

    def _inputs_for(self, activity: ActivityDef, target: ActivityDef | None = None) -> dict[str, object]:
        inputs = self._gather_flow_inputs(activity.id)
        if target is not None:
            inputs.update(self._gather_flow_inputs(target.id))
            if activity.compensation_of is not None:
                for port in target.ports:
                    if port.direction is model.PortDirection.OUT and port.channel is model.PortChannel.OK:
                        product = self.state.products.get((target.id, port.id))
                        if product is not None:
                            inputs.update(product.values)
        inputs.update(activity.attributes)
        return inputs

    def _attempt_id(self, aid: str) -> str:
        n = sum(1 for e in self.state.trace if e.kind is TraceEventKind.STARTED and e.activity == aid)
        return f"{aid}#{n}"

    def _apply_context_updates(self, activity: ActivityDef, outcome: ActionOutcome) -> None:
        ctx = self.state.contexts[activity.id]
        for name, value in outcome.context_updates.items():
            declared = activity.declared_var(name)
            if declared is None:
                continue
            if declared.kind is model.ScalarKind.FRACTION:
                if not isinstance(value, (int, float)) or not 0.0 <= float(value) <= 1.0:
                    raise InternalInconsistency(f"fraction var {name!r} out of range: {value!r}")
                value = float(value)
            ctx.vars[name] = value

    def _store_outputs(self, activity: ActivityDef, values: dict[str, object],
                       mirror_to: ActivityDef | None = None) -> None:
        for target in filter(None, (activity, mirror_to)):
            for port in target.ports:
                if port.direction is not model.PortDirection.OUT or port.channel is not model.PortChannel.OK:
                    continue
                type_def = self.process.product_type(port.product_type)
                fields = {
                    name: values.get(name, _zero_value(kind))
                    for name, kind in (type_def.fields if type_def else {}).items()
                }
                self.state.products[(target.id, port.id)] = Product(port.product_type, fields)

    def _execute_activity(self, activity: ActivityDef, target: ActivityDef | None = None
                          ) -> tuple[ActionOutcome, dict[str, object], str]:
        """Run one simple activity's action, tracing lifecycle and effects."""
        state = self.state
        attempt = self._attempt_id(activity.id)
        if state.statuses.get(activity.id, ActivityStatus.PENDING) is not ActivityStatus.PENDING:
            state.set_status(activity.id, ActivityStatus.PENDING, reset=True)
        state.set_status(activity.id, ActivityStatus.RUNNING)
        state.contexts[activity.id] = ActivityContext(activity.id)
        payload = {"action": activity.action}
        if target is not None:
            payload["of"] = target.id
        state.emit(TraceEventKind.STARTED, activity.id, **payload)
        inputs = self._inputs_for(activity, target)
        ctx = ActionContext(self.world, activity.id, activity.action, attempt, inputs, state)
        self.world.begin_attempt(attempt)
        result = world_mod.perform(activity.action, ctx)
        self._apply_context_updates(activity, result)
        if result.done:
            self.world.end_attempt(attempt)
        return result, {**inputs, **result.outputs}, attempt

    def _fail_activity(self, activity: ActivityDef, result: ActionOutcome, attempt: str) -> ExceptionRecord:
        """Raise path: trace the exception, route to KO, roll the attempt back."""
        state = self.state
        ctx = state.contexts[activity.id]
        snapshot = ActivityContext(activity.id, dict(ctx.vars))
        exc = ExceptionRecord(activity.id, result.kind, result.detail, snapshot)
        ctx.last_error = exc
        state.emit(
            TraceEventKind.EXCEPTION_RAISED, activity.id,
            kind=result.kind.value, detail=result.detail,
            vars={k: snapshot.vars[k] for k in sorted(snapshot.vars)},
        )
        ko = activity.ko_port()
        if ko is not None:
            type_def = self.process.product_type(ko.product_type)
            available = {"activity": activity.id, "kind": result.kind.value, "detail": result.detail}
            fields = {
                name: available.get(name, _zero_value(kind))
                for name, kind in (type_def.fields if type_def else {}).items()
            }
            state.products[(activity.id, ko.id)] = Product(ko.product_type, fields)
            state.emit(TraceEventKind.ROUTED_TO_KO, activity.id, port=ko.id)
        removed = self.world.rollback_action(attempt)
        if removed:
            state.emit(TraceEventKind.SITE_EFFECT, activity.id, op="rollback", removed=removed, attempt=attempt)
        state.set_status(activity.id, ActivityStatus.FAILED)
        return exc

    def _take_savepoint(self, activity: ActivityDef) -> None:
        if activity.savepoint is None:
            return
        ref = SavepointRef(activity.id, activity.savepoint)
        snap_id = self.world.snapshot_all()
        self.state.snapshots[ref] = snap_id
        if activity.savepoint is SnapshotScope.SITE_STATE_AND_PRODUCTS:
            self.state._product_snaps[ref] = copy.deepcopy(self.state.products)
        self.state.emit(TraceEventKind.SAVEPOINT_TAKEN, activity.id,
                        savepoint=activity.id, scope=activity.savepoint.value, snapshot=snap_id)

    def _run_main_activity(self, aid: str) -> None:
        activity = self.process.activity(aid)
        result, values, attempt = self._execute_activity(activity)
        if result.done:
            self._store_outputs(activity, values)
            self.state.set_status(aid, ActivityStatus.SUCCEEDED)
            self.state.emit(TraceEventKind.FINISHED, aid)
            self._take_savepoint(activity)
            return
        exc = self._fail_activity(activity, result, attempt)
        self._recover(activity, exc)

    # -- recovery ---------------------------------------------------------------

    def _recover(self, activity: ActivityDef, exc: ExceptionRecord) -> None:
        decision = handle_failure(self.state, self.process, self.world, self.policy, exc)
        if decision.choice is RecoveryChoice.IGNORE:
            self.state.set_status(activity.id, ActivityStatus.SKIPPED)
            return
        if decision.choice is RecoveryChoice.CONTINGENCY:
            status = apply_contingency(self.state, self.process, self.world, activity.id)
            if status is ActivityStatus.CONTINGENCY_SUCCEEDED:
                self._take_savepoint(activity)
                return
            sp = model.nearest_savepoint(self.process, activity.id)
            reason = "contingency failed"
            try:
                model.compensation_chain(self.process, activity.id, sp, self._effectful_ids())
            except UncompensatableChain as blocked:
                self._emit_decision(activity.id, RecoveryDecision(
                    RecoveryChoice.ABORT, None,
                    f"{reason}; no compensation for {blocked.activity_id!r} before {_savepoint_label(sp)}"))
                self._compensate(activity.id, PROCESS_START_SAVEPOINT, abort=True)
                return
            self._emit_decision(activity.id, RecoveryDecision(RecoveryChoice.COMPENSATE, sp, reason))
            self._compensate(activity.id, sp)
            return
        if decision.choice is RecoveryChoice.COMPENSATE:
            self._compensate(activity.id, decision.savepoint)
            return
        self._compensate(activity.id, PROCESS_START_SAVEPOINT, abort=True)

    def _effectful_ids(self) -> set[str]:
        state = self.state
        out: set[str] = set()
        for e in state.trace:
            if e.kind is not TraceEventKind.SITE_EFFECT or e.activity is None:
                continue
            if e.payload.get("op") == "rollback":
                continue
            a = self.process.activity(e.activity)
            owner = a.contingency_of if a is not None and a.contingency_of else e.activity
            if state.statuses.get(owner) in (ActivityStatus.SUCCEEDED, ActivityStatus.CONTINGENCY_SUCCEEDED):
                out.add(owner)
        return out

    def _emit_decision(self, aid: str, decision: RecoveryDecision) -> None:
        payload = {"choice": decision.choice.value, "reason": decision.reason}
        if decision.savepoint is not None:
            payload["savepoint"] = _savepoint_label(decision.savepoint)
        self.state.emit(TraceEventKind.DECISION_MADE, aid, **payload)

    def _compensate(self, from_activity: str | None, sp: SavepointRef, abort: bool = False) -> None:
        compensate_to(self.state, self.process, self.world, sp,
                      policy=self.policy, from_activity=from_activity, abort=abort,
                      defer_outcome=self.defer_outcome, run=self)

    # exposed for compensate_to's resume path
    def reset_for_resume(self, sp: SavepointRef) -> None:
        state = self.state
        start = 0 if sp.is_process_start else self.positions[sp.activity] + 1
        reset: list[str] = []
        for aid in self.order[start:]:
            status = state.statuses[aid]
            if status in (ActivityStatus.FAILED, ActivityStatus.COMPENSATED):
                state.set_status(aid, ActivityStatus.PENDING, reset=True)
                reset.append(aid)
                for key in [k for k in state.products if k[0] == aid]:
                    del state.products[key]
        if sp in state._product_snaps:
            state.products = copy.deepcopy(state._product_snaps[sp])
        state.emit(TraceEventKind.DECISION_MADE, None,
                   choice="Resume", resume=_savepoint_label(sp), reset=reset)


def run(process: ProcessDefinition, world: World, policy: RecoveryPolicy | None = None,
        seed: int = 0, _defer_outcome: bool = False, _validated: bool = False) -> ExecutionState:
    """Execute a process against one world and return the finished state."""
    if not _validated:
        ensure_valid(process)
    driver = _Run(process, world, policy or RecoveryPolicy(), seed, defer_outcome=_defer_outcome)
    return driver.execute()


def handle_failure(state: ExecutionState, process: ProcessDefinition, world: World,
                   policy: RecoveryPolicy, exc: ExceptionRecord) -> RecoveryDecision:
    """Decide how to treat a failed activity; the decision is traced.

    Precedence: non-critical failures are ignored outright; otherwise a bound
    contingency runs while attempts remain and the driving variable does not
    argue against it; otherwise compensate to the nearest savepoint, or abort
    to process start when that chain is blocked.
    """
    activity = process.activity(exc.activity)
    if activity is None or state.statuses.get(exc.activity) is not ActivityStatus.FAILED:
        raise InternalInconsistency(f"handle_failure on non-failed activity {exc.activity!r}")

    decision: RecoveryDecision
    if not activity.is_critical:
        decision = RecoveryDecision(RecoveryChoice.IGNORE, None, "activity is non-critical")
    else:
        contingency = process.contingency_for(activity.id)
        attempts = state.contingency_attempts(activity.id)
        value = exc.context_snapshot.vars.get(policy.driving_var)
        if contingency is not None and attempts < policy.max_contingency_attempts:
            if value is None:
                decision = RecoveryDecision(RecoveryChoice.CONTINGENCY, None, "no progress recorded")
            elif float(value) >= policy.contingency_threshold:
                decision = RecoveryDecision(
                    RecoveryChoice.CONTINGENCY, None,
                    f"progress {float(value):.2f} >= {policy.contingency_threshold:.2f}")
            else:
                decision = RecoveryDecision(
                    RecoveryChoice.COMPENSATE, model.nearest_savepoint(process, activity.id),
                    f"progress {float(value):.2f} < {policy.contingency_threshold:.2f}")
        else:
            if contingency is None:
                reason = "no contingency bound"
            else:
                reason = "contingency attempts exhausted"
            decision = RecoveryDecision(RecoveryChoice.COMPENSATE,
                                        model.nearest_savepoint(process, activity.id), reason)

    if decision.choice is RecoveryChoice.COMPENSATE:
        effectful = _effectful_ids_of(state, process)
        try:
            model.compensation_chain(process, activity.id, decision.savepoint, effectful)
        except UncompensatableChain as blocked:
            decision = RecoveryDecision(
                RecoveryChoice.ABORT, None,
                f"{decision.reason}; no compensation for {blocked.activity_id!r} "
                f"before {_savepoint_label(decision.savepoint)}")

    payload = {"choice": decision.choice.value, "reason": decision.reason}
    if decision.savepoint is not None:
        payload["savepoint"] = _savepoint_label(decision.savepoint)
    state.emit(TraceEventKind.DECISION_MADE, exc.activity, **payload)
    return decision


def _effectful_ids_of(state: ExecutionState, process: ProcessDefinition) -> set[str]:
    out: set[str] = set()
    for e in state.trace:
        if e.kind is not TraceEventKind.SITE_EFFECT or e.activity is None:
            continue
        if e.payload.get("op") == "rollback":
            continue
        a = process.activity(e.activity)
        owner = a.contingency_of if a is not None and a.contingency_of else e.activity
        if state.statuses.get(owner) in (ActivityStatus.SUCCEEDED, ActivityStatus.CONTINGENCY_SUCCEEDED):
            out.add(owner)
    return out


def apply_contingency(state: ExecutionState, process: ProcessDefinition, world: World,
                      failed: str) -> ActivityStatus:
    """Run the contingency bound to a failed activity (forward recovery).

    The failed attempt's world effects are rolled back first; on success the
    failed activity becomes ContingencySucceeded and its ok outputs are the
    contingency's outputs.  Returns the failed activity's resulting status.
    """
    driver: _Run = getattr(state, "_driver", None)
    if driver is None:
        raise InternalInconsistency("apply_contingency needs a state produced by run()")
    target = process.activity(failed)
    contingency = process.contingency_for(failed)
    if contingency is None:
        raise InternalInconsistency(f"no contingency bound to {failed!r}")
    # idempotent: the failure path already rolled the attempt back
    last_attempt = f"{failed}#{sum(1 for e in state.trace if e.kind is TraceEventKind.STARTED and e.activity == failed) - 1}"
    world.rollback_action(last_attempt)

    attempt_no = state.contingency_attempts(failed) + 1
    state.emit(TraceEventKind.CONTINGENCY_RUN, contingency.id, of=failed, attempt=attempt_no)
    result, values, attempt = driver._execute_activity(contingency, target=target)
    if result.done:
        driver._store_outputs(contingency, values, mirror_to=target)
        state.set_status(contingency.id, ActivityStatus.SUCCEEDED)
        state.set_status(failed, ActivityStatus.CONTINGENCY_SUCCEEDED)
        state.emit(TraceEventKind.FINISHED, contingency.id, of=failed,
                   target_status=ActivityStatus.CONTINGENCY_SUCCEEDED.value)
        return ActivityStatus.CONTINGENCY_SUCCEEDED
    driver._fail_activity(contingency, result, attempt)
    return ActivityStatus.FAILED


def compensate_to(state: ExecutionState, process: ProcessDefinition, world: World,
                  sp: SavepointRef, policy: RecoveryPolicy | None = None,
                  from_activity: str | None = None, abort: bool = False,
                  defer_outcome: bool = False, run: "_Run | None" = None) -> ExecutionState:
    """Backward recovery: run the compensation chain down to a savepoint.

    After the chain the world must equal the savepoint snapshot exactly; the
    check is performed, never assumed.  On a verified restore the run either
    stops as FailedSafe or, when the policy allows, resumes once per
    savepoint.  Any compensation failure or residual difference makes the
    outcome FailedUnsafe.
    """
    driver: _Run = run or getattr(state, "_driver", None)
    if driver is None:
        raise InternalInconsistency("compensate_to needs a state produced by run()")
    policy = policy or driver.policy
    snap_id = state.snapshots.get(sp)
    if snap_id is None:
        raise InternalInconsistency(f"no snapshot recorded for savepoint {_savepoint_label(sp)!r}")

    effectful = _effectful_ids_of(state, process)
    try:
        chain = model.compensation_chain(process, from_activity, sp, effectful)
        blocked: str | None = None
    except UncompensatableChain as exc:
        if not abort:
            raise
        chain = _best_effort_chain(process, from_activity, sp)
        blocked = exc.activity_id

    for cid in chain:
        comp = process.activity(cid)
        target = comp.compensation_of
        if state.statuses.get(target) not in (ActivityStatus.SUCCEEDED, ActivityStatus.CONTINGENCY_SUCCEEDED):
            continue
        state.emit(TraceEventKind.COMPENSATION_RUN, cid, of=target)
        result, values, attempt = driver._execute_activity(comp, target=process.activity(target))
        if not result.done:
            driver._fail_activity(comp, result, attempt)
            state._unsafe_evidence.append(f"compensation {cid} failed: {result.detail}")
            state.set_outcome(Outcome.FAILED_UNSAFE, defer=defer_outcome)
            return state
        state.set_status(cid, ActivityStatus.SUCCEEDED)
        state.set_status(target, ActivityStatus.COMPENSATED)
        state.emit(TraceEventKind.FINISHED, cid, of=target,
                   target_status=ActivityStatus.COMPENSATED.value)
        for key in [k for k in state.products if k[0] == target]:
            del state.products[key]

    restored = world.restore_check(None, snap_id)
    if not restored:
        evidence = world.restore_diff(snap_id)
        if blocked is not None:
            evidence.insert(0, f"rollback blocked: no compensation for {blocked!r}")
        state._unsafe_evidence.extend(evidence)
        state.set_outcome(Outcome.FAILED_UNSAFE, defer=defer_outcome)
        return state

    label = _savepoint_label(sp)
    if (policy.resume_after_compensation and not abort and from_activity is not None
            and state.resumes_at(label) == 0):
        driver.reset_for_resume(sp)
        return state
    state.set_outcome(Outcome.FAILED_SAFE, defer=defer_outcome)
    return state


def _best_effort_chain(process: ProcessDefinition, from_activity: str | None,
                       sp: SavepointRef) -> list[str]:
    order = model.execution_order(process)
    end = len(order) if from_activity is None else order.index(from_activity)
    start = 0 if sp.is_process_start else order.index(sp.activity) + 1
    out: list[str] = []
    for aid in reversed(order[start:end]):
        comp = process.compensation_for(aid)
        if comp is not None:
            out.append(comp.id)
    return out


# --- multi-site ------------------------------------------------------------------


@dataclass
class MultiSiteResult:
    states: list[ExecutionState]
    sites: list[str]
    retry: list[str]
    aggregate: str  # "Success" | "Failure"
    success_fraction: float


def run_multi_site(process: ProcessDefinition, worlds: list[World],
                   policy: RecoveryPolicy | None = None,
                   multi: model.MultiSitePolicy | None = None,
                   seed: int = 0) -> MultiSiteResult:
    """Run the process once per world, then apply the multi-site policy.

    all_or_nothing: one terminal failure rolls every succeeded site back to
    process start.  best_effort: succeeded sites keep their result; failed
    sites are listed for a later retry, and the aggregate verdict compares
    the success fraction with the policy's minimum.
    """
    ensure_valid(process)
    policy = policy or RecoveryPolicy()
    multi = multi or process.multi_site_policy
    if multi is None:
        raise ValueError("multi-site run requires a multi-site policy")
    if not worlds:
        return MultiSiteResult([], [], [], "Success", 1.0)

    ordered = sorted(worlds, key=lambda w: (_priority(seed, w.default_site or w.name),
                                            w.default_site or w.name))
    defer = multi.mode is model.MultiSiteMode.ALL_OR_NOTHING
    states: list[ExecutionState] = []
    for w in ordered:
        site = w.default_site or w.name
        states.append(run(process, w, policy, derive_seed(seed, site),
                          _defer_outcome=defer, _validated=True))

    sites = [s.site or "" for s in states]
    if multi.mode is model.MultiSiteMode.BEST_EFFORT:
        ok = (Outcome.SUCCEEDED_FULL, Outcome.SUCCEEDED_PARTIAL)
        succeeded = sum(1 for s in states if s.outcome in ok)
        retry = sorted(s.site for s in states if s.outcome not in ok)
        fraction = succeeded / len(states)
        aggregate = "Success" if fraction >= (multi.min_success_fraction or 0.0) else "Failure"
        return MultiSiteResult(states, sites, retry, aggregate, fraction)

    provisional_ok = [s._provisional in (Outcome.SUCCEEDED_FULL, Outcome.SUCCEEDED_PARTIAL) for s in states]
    if all(provisional_ok):
        for s in states:
            s.set_outcome(s._provisional)
        return MultiSiteResult(states, sites, [], "Success", 1.0)
    for s, w, ok in zip(states, ordered, provisional_ok):
        if ok:
            compensate_to(s, process, w, PROCESS_START_SAVEPOINT,
                          policy=RecoveryPolicy(resume_after_compensation=False),
                          from_activity=None, abort=True, run=s._driver)
        else:
            s.set_outcome(s._provisional)
    fraction = 0.0
    return MultiSiteResult(states, sites, [], "Failure", fraction)


# --- trace rendering and auditing ---------------------------------------------------


def render_trace_lines(state: ExecutionState) -> list[str]:
    """One JSON record per event: clock, kind, activity, payload (sorted keys)."""
    lines = []
    for e in state.trace:
        obj = {
            "clock": e.clock,
            "kind": e.kind.value,
            "activity": e.activity,
            "payload": _jsonable(dict(sorted(e.payload.items()))),
        }
        lines.append(json.dumps(obj))
    return lines


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Enum):
        return value.value
    return value


def audit_transitions(events: list[TraceEvent]) -> list[tuple[str, ActivityStatus, ActivityStatus]]:
    """Reconstruct every status transition from a trace and check legality.

    Raises InternalInconsistency on the first illegal transition; returns the
    full transition list otherwise.  This is the trace-level view used by the
    status-machine soundness checks; the engine enforces the same set live.
    """
    statuses: dict[str, ActivityStatus] = {}
    seen: list[tuple[str, ActivityStatus, ActivityStatus]] = []

    def move(activity: str, to: ActivityStatus, reset: bool = False) -> None:
        current = statuses.get(activity, ActivityStatus.PENDING)
        allowed = (current, to) in LEGAL_TRANSITIONS or (reset and (current, to) in RESET_TRANSITIONS)
        if not allowed:
            raise InternalInconsistency(
                f"trace shows illegal transition {current.value} -> {to.value} on {activity!r}")
        statuses[activity] = to
        seen.append((activity, current, to))

    for e in events:
        if e.kind is TraceEventKind.STARTED:
            if statuses.get(e.activity, ActivityStatus.PENDING) is not ActivityStatus.PENDING:
                move(e.activity, ActivityStatus.PENDING, reset=True)
            move(e.activity, ActivityStatus.RUNNING)
        elif e.kind is TraceEventKind.ROUTED_TO_KO:
            move(e.activity, ActivityStatus.FAILED)
        elif e.kind is TraceEventKind.FINISHED:
            move(e.activity, ActivityStatus.SUCCEEDED)
            target_status = e.payload.get("target_status")
            if target_status is not None:
                move(e.payload["of"], ActivityStatus(target_status))
        elif e.kind is TraceEventKind.DECISION_MADE:
            if e.payload.get("choice") == RecoveryChoice.IGNORE.value:
                move(e.activity, ActivityStatus.SKIPPED)
            elif e.payload.get("choice") == "Resume":
                for aid in e.payload.get("reset", []):
                    move(aid, ActivityStatus.PENDING, reset=True)
    return seen
