"""Simulation and verification toolkit for slow/fast delay SDE systems."""

from .errors import (
    ConfigError,
    DataError,
    DegenerateFitError,
    DivergenceError,
    DomainError,
    TwoscaleError,
    UsageError,
)
from .segment import (
    Segment,
    constant_segment,
    exact_steps,
    lipschitz_modulus,
    segment_from_dict,
    segment_from_function,
    segment_to_dict,
    sup_norm,
    value_at,
)
from .noise import AUX, W1, W2, NoiseStream, StreamFactory, fast_increments, gaussian_increments
from .systems import (
    DissipativityReport,
    GrowthReport,
    LinearBenchmarkParams,
    SystemSpec,
    build_system,
    check_dissipativity,
    check_growth_and_lipschitz,
    check_initial_segment,
    linear_benchmark,
    random_point_sampler,
    random_segment_pair_sampler,
    register_system,
    spot_check_purity,
)
from .solver import (
    TimeGrid,
    TrajectoryBundle,
    make_grid,
    simulate_coupled,
    simulate_sdde,
)
from .frozen import (
    AveragedDriftEstimate,
    DecayFit,
    DriftEstimatorBudget,
    LipschitzProbeResult,
    estimate_averaged_drift,
    lipschitz_probe_bbar,
    mixing_decay,
    simulate_frozen,
    wasserstein2_truncated,
)
from .averaging import (
    AuxiliaryPair,
    DeltaSchedule,
    EstimatedDriftSource,
    breakpoint,
    closed_form_drift,
    khasminskii_delta,
    simulate_auxiliary,
    simulate_averaged,
)
from .metrics import (
    MomentEstimate,
    SlopeFit,
    p_moment,
    segment_displacement_moment,
    slope_fit,
    sup_distance,
)
from .harness import ExperimentReport, Scenario, run_scenario

__version__ = "0.1.0"
