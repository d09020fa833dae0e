"""Feasibility-enhanced control barrier functions for multi-UAV collision avoidance."""
from .cbf import SafetyParams, barrier_value, pairwise_coefficients, rotation_matrix
from .compatibility import (ConstraintSystem, FarkasOutcome, Verdict, build_centralized_system,
                            farkas_check, nullspace_dim_bounds, sign_consistency_holds)
from .controllers import (ControlDecision, ControllerConfig, ControllerKind, Fallback,
                          drcbf_control, fallback_input, fecbf_control, nominal_input,
                          vocbf_control)
from .kinematics import ControlInput, Fleet, UavLimits, UavState, step
from .qp import QpOutcome, QpProblem, QpStatus, solve
from .sim import MetricsTable, ScenarioKind, ScenarioSpec, TrialResult, generate_scenario, monte_carlo, run_trial

__version__ = "0.1.0"
