"""Self-tuning tube MPC: set-membership identification with
least-squares point estimates feeding a robust tube controller, plus the
simulation and reporting tools around it."""

__version__ = "0.1.0"

from .estimation import (EstimatorState, Parametrization, Schedule,
                         UncertaintyState, ball_in_set, epsilon, lse_point,
                         lse_update, matrix_norm_dist, pe_noise, sigma_t,
                         t_star, update_uncertainty)
from .geometry import (Box, HPolytope, VRep, contains, contractive_margin,
                       contractive_set, intersect, minkowski_sum_box,
                       outer_box_of_ball, prune_redundant, support, vertices,
                       volume, volume_mc)
from .simulation import (ContractViolation, InitialInfeasible, PlantConfig,
                         RunConfig, Trace, check_constraints, run_closed_loop,
                         run_oracle, sample_disturbance, step_plant)
from .solvers import (LpProblem, QpProblem, SolveReport, SolveStatus,
                      UnstablePhi, dlyap, lqr_gain, solve_lp, solve_qp)
from .tube import (AllInfeasible, ControlOutput, Instance, NoiseBounds,
                   RowInfeasible, TubeDesign, VertexCache, VertexData,
                   b_bar, build_problem, compute_Hc, compute_Hj,
                   control_input, design_tube, h_identity_residual,
                   noise_bounds, solve_with_fallback, terminal_cost,
                   vertex_data)

__all__ = [name for name in dir() if not name.startswith("_")]
