"""Neural Lyapunov functions that are positive definite by construction.

Train them with a single hinge risk, certify them on a covering grid,
co-train feedback laws and check regions of attraction by simulation.
"""

from .certify import (Certificate, CertGrid, GridBudgetError, Verdict, accuracy_budget, build_covering_grid,
                      build_grid, certify, lipschitz_bound_M, suggest_margins)
from .dynamics import (ControlLaw, DynamicalSystem, block_concat, closed_loop, curve_tracking,
                       estimate_lipschitz, linear, pendulum, refine_equilibrium, synthetic)
from .model import Augmentation, LyapEval, LyapunovNet, Psi, lyap_eval, orbital_derivative
from .net import Activation, JointEval, Network, clip_params, forward_joint, forward_value, param_grad, xavier_init
from .risk import RiskConfig, RiskValue, SampleSet, risk_clf, risk_dl, risk_ln, risk_nl, sample_uniform
from .roa import RoaEstimate, Trajectory, estimate_roa, rk4_integrate, validate_roa
from .train import AdamState, StopReason, TrainConfig, TrainReport, adam_step, train_clf, train_lyapunov

__version__ = "0.1.0"
