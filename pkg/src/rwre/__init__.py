"""Random walks in random environments: quenched exits, ballisticity
criteria, multiscale block classification and local-limit numerics."""

__version__ = "0.1.0"

from .environment import (DirichletSites, Deterministic, Environment, EnvironmentModel,
                          PerturbedSRW, TrapMixture, TrapOverlay, TwoPointMixture, apply_trap,
                          biased, build_environment, derive_seed, model_from_dict,
                          model_from_json, model_to_json, srw)
from .errors import *  # noqa: F401,F403
from .geometry import Block, BoxSpec, Cone, DirectedBox, Free, Slab, region_from_dict
from .walk import (RegenerationRecord, StopReason, Trajectory, check_event_A_N,
                   directional_report, estimate_direction, regeneration_decompose, simulate)
from .solver import block_fields, conditional_exit_stats, rho_of_box, solve_exit
from .multiscale import (LadderParams, annealed_reference, bad_block_census, build_ladder,
                         classify_block, enumerate_blocks, scale_R)
from .criteria import (effective_criterion_evaluate, effective_criterion_search,
                       regeneration_tail, rho_band_decomposition, t_gamma_estimate)
from .exit_stats import (ExitTailQuery, atypical_exit_tail, direction_gap, exit_point_floor,
                         intersection_census, transversal_fluctuation_tail)
from .llt import LatticeLaw, convolve_power, exit_kernel_smoothness, llt_discrepancy_report
