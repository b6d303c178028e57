"""Sampling-based characterization of almost robustly forward invariant safe sets."""

from almostsafe.covering import (
    CoverLattice,
    DiskGraph,
    ExcludedRegion,
    build_cover,
    critical_band,
    refine,
    remove_cells,
)
from almostsafe.errors import (
    ConfigurationError,
    NumericError,
    PreconditionError,
    ResourceError,
)
from almostsafe.quantifier import (
    DecaySchedule,
    QuantifierConfig,
    SafeSetResult,
    Stage,
    characterize,
    consensus_distance,
    derived_failure_rate,
    quantify,
    required_samples,
    validate_safe_set,
)
from almostsafe.scenario import (
    DomainBox,
    RandomSource,
    RunRecord,
    ScenarioSystem,
    check_step_bound,
    compose_scenario,
    rollout,
)

__all__ = [
    "ConfigurationError",
    "CoverLattice",
    "DecaySchedule",
    "DiskGraph",
    "DomainBox",
    "ExcludedRegion",
    "NumericError",
    "PreconditionError",
    "QuantifierConfig",
    "RandomSource",
    "ResourceError",
    "RunRecord",
    "SafeSetResult",
    "ScenarioSystem",
    "Stage",
    "build_cover",
    "characterize",
    "check_step_bound",
    "compose_scenario",
    "consensus_distance",
    "critical_band",
    "derived_failure_rate",
    "quantify",
    "refine",
    "remove_cells",
    "required_samples",
    "rollout",
    "validate_safe_set",
]
