"""Model-free price bounds for multi-asset exotics: classical martingale
transport, its envelope relaxation with capacity bounds, the exact bicausal
bounds by spatial branch-and-bound, and bid/ask-aware marginal calibration."""

from .bicausal_bnb import (BnBConfig, BnBNode, BnBReport, BranchRefusal, branch,
                           repair_incumbent, solve_bicausal)
from .calibration import (CalibrationError, CalibrationInfeasible,
                          CalibrationResult, MarketSlice, OptionQuote,
                          build_calibration_lp, calibrate, feasibility_diagnosis,
                          load_chain_csv, scale_quotes)
from .coupling import (ConvexOrderError, CouplingTensor, ProjectionKey,
                       anticausality_residual, build_martingale_law,
                       causality_residual, coupling_from_dict, coupling_to_dict,
                       independent_martingale_coupling,
                       individual_martingale_residual, martingale_residual,
                       project, testfunction_causality_gap)
from .lp_backend import (LinearProgram, LPError, LPNumericalError, LPSolution,
                         SolverConfig, duality_gap, solve, write_lp_text)
from .marginals import (MarginalLaw, MarginalSystem, SupportGrid,
                        ValidationConfig, ValidationReport, call_value,
                        check_convex_order, load_system, mean, save_system,
                        validate_system)
from .mccormick import (CapacityBounds, McCormickInstance, bounds_from_dict,
                        bounds_to_dict, build_mccormick_lp, default_bounds,
                        envelope_gap, load_bounds, save_bounds, solve_mccormick)
from .mot import (BoundResult, HedgeError, HedgeReport, MotInstance,
                  build_mot_lp, extract_dual_hedge, solve_mot)
from .payoffs import (PayoffSpec, evaluate, load_payoff_table, payoff_from_dict,
                      payoff_to_dict, save_payoff_table, tabulate)

__version__ = "0.1.0"
