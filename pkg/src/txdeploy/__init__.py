"""txdeploy: a transactional deployment-process engine.

Deployment processes are graphs of activities (search, resolve, transfer,
install, ...) executed against a simulated distributed environment.  Failures
are recovered by skipping non-critical work, running contingency activities,
or compensating back to a savepoint; every run is deterministic and fully
traced, and site consistency is verified afterwards.
"""

from .consistency import (
    ConsistencyReport,
    SafetyVerdict,
    SuccessVerdict,
    check_safety,
    check_success,
    replay_oracle,
)
from .engine import (
    ActivityStatus,
    ExecutionState,
    Outcome,
    RecoveryChoice,
    RecoveryDecision,
    RecoveryPolicy,
    apply_contingency,
    compensate_to,
    handle_failure,
    run,
    run_multi_site,
)
from .model import (
    ActivityDef,
    DataflowDef,
    MultiSitePolicy,
    PortDef,
    ProcessDefinition,
    Product,
    ProductTypeDef,
    SavepointRef,
    compensation_chain,
    execution_order,
    nearest_savepoint,
    validate,
)
from .pml import parse, serialize
from .world import PackageDescriptor, SiteState, World, load_world, parse_world

__version__ = "0.1.0"

__all__ = [
    "ActivityDef",
    "ActivityStatus",
    "ConsistencyReport",
    "DataflowDef",
    "ExecutionState",
    "MultiSitePolicy",
    "Outcome",
    "PackageDescriptor",
    "PortDef",
    "ProcessDefinition",
    "Product",
    "ProductTypeDef",
    "RecoveryChoice",
    "RecoveryDecision",
    "RecoveryPolicy",
    "SafetyVerdict",
    "SavepointRef",
    "SiteState",
    "SuccessVerdict",
    "World",
    "apply_contingency",
    "check_safety",
    "check_success",
    "compensate_to",
    "compensation_chain",
    "execution_order",
    "handle_failure",
    "load_world",
    "nearest_savepoint",
    "parse",
    "parse_world",
    "replay_oracle",
    "run",
    "run_multi_site",
    "serialize",
    "validate",
]
