"""Post-run verdicts: did the deployment succeed, and did it stay safe?

Success looks at the deployed package only: full when every component is
installed, partial when all mandatory components are present but an optional
one is missing.  Safety looks at everything else: components that do not
belong to the deployed package (or to dependencies installed by this run)
must be exactly as they were before the run, active flags included.

``replay_oracle`` is the independent ground-truth fold over effect logs used
by the test suite to cross-check the world's incremental bookkeeping; it is
deliberately separate code from ``world.apply_effect``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .engine import ExecutionState, Outcome
from .world import Effect, EffectKind, Installed, PackageDescriptor, SiteState


class SuccessVerdict(str, Enum):
    FULL = "Full"
    PARTIAL = "Partial"
    NO = "No"


class SafetyVerdict(str, Enum):
    PRESERVED = "Preserved"
    VIOLATED = "Violated"


@dataclass
class ConsistencyReport:
    run_id: str
    site: str
    outcome: Outcome
    success: SuccessVerdict
    safety: SafetyVerdict
    evidence: list[str] = field(default_factory=list)


def check_success(post: SiteState, package: PackageDescriptor,
                  outcome: Outcome | None = None) -> SuccessVerdict:
    """Component-completeness verdict for the deployed package on one site."""
    present = {e[2] for e in post.installed if e[0] == package.app_name and e[1] == package.version}
    missing_mandatory = [c.id for c in package.components if c.mandatory and c.id not in present]
    missing_optional = [c.id for c in package.components if not c.mandatory and c.id not in present]
    if missing_mandatory:
        return SuccessVerdict.NO
    if missing_optional:
        return SuccessVerdict.PARTIAL
    return SuccessVerdict.FULL


def _foreign(installed: frozenset[Installed] | set[Installed],
             own: set[tuple[str, str]]) -> set[Installed]:
    return {e for e in installed if (e[0], e[1]) not in own}


def check_safety(pre, post, deployed: PackageDescriptor,
                 dependencies: tuple[PackageDescriptor, ...] = ()) -> tuple[SafetyVerdict, list[str]]:
    """Compare the foreign slice of two site states; any difference is evidence.

    ``pre`` and ``post`` need an ``installed`` attribute (a live SiteState or
    a snapshot).  Packages in ``dependencies`` were installed by this run and
    therefore do not count as foreign.
    """
    own = {(deployed.app_name, deployed.version)}
    own.update((d.app_name, d.version) for d in dependencies)
    before = _foreign(set(pre.installed), own)
    after = _foreign(set(post.installed), own)
    if before == after:
        return SafetyVerdict.PRESERVED, []
    evidence = []
    for e in sorted(before - after):
        evidence.append(f"foreign component removed or changed: {e[0]}@{e[1]}#{e[2]} (active={e[3]})")
    for e in sorted(after - before):
        evidence.append(f"foreign component added or changed: {e[0]}@{e[1]}#{e[2]} (active={e[3]})")
    return SafetyVerdict.VIOLATED, evidence


@dataclass
class Inventory:
    """Result of folding an effect log from an empty site."""

    installed: set[Installed] = field(default_factory=set)
    staged: set[tuple[str, str, str]] = field(default_factory=set)


class MalformedEffectLog(ValueError):
    pass


def replay_oracle(effects: list[Effect]) -> Inventory:
    """Fold effects from empty state; the reference answer for site inventory.

    Independent of the world's incremental bookkeeping on purpose: tests
    compare the two routes.  Raises on a non-monotonic sequence number.
    """
    inv = Inventory()
    last_seq = -1
    for eff in effects:
        if eff.seq <= last_seq:
            raise MalformedEffectLog(f"non-monotonic effect seq {eff.seq} after {last_seq}")
        last_seq = eff.seq
        app, version, item = eff.subject.app, eff.subject.version, eff.subject.item
        if eff.kind is EffectKind.FILE_STAGED:
            inv.staged.add((app, version, item))
        elif eff.kind is EffectKind.COMPONENT_INSTALLED:
            inv.installed.add((app, version, item, False))
        elif eff.kind is EffectKind.COMPONENT_REMOVED:
            if eff.subject.unit:
                inv.staged.discard((app, version, item))
            else:
                inv.installed = {e for e in inv.installed
                                 if not (e[0] == app and e[1] == version and e[2] == item)}
        elif eff.kind is EffectKind.ACTIVATED:
            inv.installed = {e if not (e[0] == app and e[1] == version and e[2] == item)
                             else (app, version, item, True)
                             for e in inv.installed}
        elif eff.kind is EffectKind.DEACTIVATED:
            inv.installed = {e if not (e[0] == app and e[1] == version and e[2] == item)
                             else (app, version, item, False)
                             for e in inv.installed}
    return inv


def deployment_target(process, world) -> PackageDescriptor | None:
    """The package a process deploys: app_name/version attributes on the
    first main activity that carries both."""
    from . import model

    for aid in model.execution_order(process):
        a = process.activity(aid)
        app = a.attributes.get("app_name")
        version = a.attributes.get("version")
        if app and version:
            return world.descriptor(str(app), str(version))
    return None


def dependency_closure(world, package: PackageDescriptor) -> tuple[PackageDescriptor, ...]:
    catalog = world.catalog()
    seen: set[tuple[str, str]] = {(package.app_name, package.version)}
    frontier = [package]
    out: list[PackageDescriptor] = []
    while frontier:
        pkg = frontier.pop()
        for dep in sorted(pkg.depends_on, key=lambda d: d.app_name):
            for (a, v), desc in sorted(catalog.items()):
                if a == dep.app_name and (a, v) not in seen:
                    seen.add((a, v))
                    out.append(desc)
                    frontier.append(desc)
    return tuple(out)


def effective_site(state: ExecutionState, world, package: PackageDescriptor | None) -> str:
    """Where the deployment landed: the site of the last install effect for the
    target package (a contingency may redirect to another site), else the
    world's default site."""
    from .engine import TraceEventKind

    chosen = world.default_site
    if package is None:
        return chosen
    prefix = f"{package.app_name}@{package.version}#comp:"
    for e in state.trace:
        if (e.kind is TraceEventKind.SITE_EFFECT
                and e.payload.get("effect") == EffectKind.COMPONENT_INSTALLED.value
                and str(e.payload.get("subject", "")).startswith(prefix)):
            chosen = e.payload.get("site", chosen)
    return chosen


def build_report(run_id: str, state: ExecutionState, world, process,
                 pre_installed: dict[str, set[Installed]]) -> ConsistencyReport:
    """Assemble the run's verdict, cross-checking against the engine outcome.

    Success is judged on the site the deployment landed on; safety is judged
    on every site of the world against its pre-run inventory.
    """
    package = deployment_target(process, world)
    evidence: list[str] = list(state._unsafe_evidence)
    site_id = effective_site(state, world, package)
    if package is None:
        return ConsistencyReport(run_id, site_id or "", state.outcome, SuccessVerdict.NO,
                                 SafetyVerdict.PRESERVED, ["no deployment target declared"])

    site = world.site(site_id)
    success = check_success(site, package, state.outcome)

    safety = SafetyVerdict.PRESERVED
    for sid in sorted(world.sites):
        pre = Inventory(installed=set(pre_installed.get(sid, set())))
        # dependencies already present before the run stay foreign; only the
        # ones this run brought in belong to it
        deps = tuple(
            d for d in dependency_closure(world, package)
            if not any(e[0] == d.app_name and e[1] == d.version for e in pre.installed)
        )
        verdict, site_evidence = check_safety(pre, world.sites[sid], package, deps)
        if verdict is SafetyVerdict.VIOLATED:
            safety = SafetyVerdict.VIOLATED
            evidence.extend(f"{sid}: {line}" for line in site_evidence)
    if state.outcome is Outcome.FAILED_UNSAFE and safety is SafetyVerdict.PRESERVED:
        # compensation failed to reach the snapshot even though no foreign
        # component moved; the residue lines above carry the details
        safety = SafetyVerdict.VIOLATED
        if not evidence:
            evidence.append("backward recovery did not reach the savepoint snapshot")

    present = {e[2] for e in site.installed
               if e[0] == package.app_name and e[1] == package.version}
    for c in package.components:
        if c.id not in present:
            kind = "mandatory" if c.mandatory else "optional"
            evidence.append(f"missing {kind} component: {package.app_name}@{package.version}#{c.id}")

    expected = {
        Outcome.SUCCEEDED_FULL: SuccessVerdict.FULL,
        Outcome.SUCCEEDED_PARTIAL: SuccessVerdict.PARTIAL,
    }.get(state.outcome)
    if expected is not None and success is not expected:
        evidence.append(f"checker verdict {success.value} disagrees with engine outcome {state.outcome.value}")
    return ConsistencyReport(run_id, site.id, state.outcome, success, safety, evidence)


def render_table(reports: list[ConsistencyReport], aggregate: str | None = None,
                 retry: list[str] | None = None) -> str:
    """Human-readable per-site table plus optional multi-site summary."""
    header = f"{'site':<12} {'outcome':<18} {'success':<8} {'safety':<10} evidence"
    lines = [header, "-" * len(header)]
    for r in reports:
        first = r.evidence[0] if r.evidence else "-"
        lines.append(f"{r.site:<12} {r.outcome.value:<18} {r.success.value:<8} {r.safety.value:<10} {first}")
        for extra in r.evidence[1:]:
            lines.append(f"{'':<12} {'':<18} {'':<8} {'':<10} {extra}")
    if aggregate is not None:
        lines.append("")
        lines.append(f"aggregate: {aggregate}")
        if retry:
            lines.append(f"retry ({len(retry)} sites): {', '.join(retry)}")
    return "\n".join(lines)


def report_record(report: ConsistencyReport) -> dict:
    """The structured per-site record appended to trace files."""
    return {
        "report": {
            "run": report.run_id,
            "site": report.site,
            "outcome": report.outcome.value,
            "success": report.success.value,
            "safety": report.safety.value,
            "evidence": report.evidence,
        }
    }
