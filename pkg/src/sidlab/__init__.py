"""Numerical laboratory for exit times of self-interacting diffusions."""

from .landscape import (
    Landscape,
    preset,
    potential_eval,
    interaction_eval,
    effective_potential,
    estimate_lipschitz,
    check_strong_attraction,
    clamp_landscape,
)
from .geometry import (
    Interval,
    Ball,
    Box,
    Implicit,
    contains,
    detect_crossing,
    sample_boundary,
    inner_normal,
    check_sublevel,
    level_set_min_gradient,
    check_flow_stability,
)
from .measures import ExtendedInit, OccupationMeasure, make_init, w2_discrete_1d
from .dynamics import (
    Path,
    ExitRecord,
    step_sid,
    simulate_sid,
    integrate_deterministic,
    integrate_effective_flow,
    find_attractor,
)
from .action import (
    action_full,
    action_effective,
    action_gradient,
    minimize_action,
    compute_H,
    build_psi,
    frozen_gap_bound,
)
from .harness import (
    ExperimentConfig,
    ExitStats,
    run_exit_campaign,
    kramers_window_fraction,
    estimate_kramers_slope,
    exit_location_mass,
    trace_excursions,
    bvp_mean_exit_1d,
)

__version__ = "0.1.0"
