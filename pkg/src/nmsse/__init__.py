"""Monte Carlo for linear non-Markovian stochastic Schrodinger equations driven
by general complex Gaussian noise, with a conditional martingale test of the
squared norm."""

from .ensemble import (BranchParams, ExperimentConfig, compare_to_reference, convergence_study,
                       eta_independence_check, martingale_branch_test, run_ensemble)
from .integrators import propagate
from .models import ModelSpec, amplitude_coupling, dephasing, qbm, spin_boson
from .noise import CorrelationPair, ExpDecay, TimeGrid, White, validate_pair
from .oracles import GKSLSpec, gksl_solve

__version__ = "0.1.0"

__all__ = [
    "BranchParams", "CorrelationPair", "ExpDecay", "ExperimentConfig", "GKSLSpec", "ModelSpec",
    "TimeGrid", "White", "amplitude_coupling", "compare_to_reference", "convergence_study",
    "dephasing", "eta_independence_check", "gksl_solve", "martingale_branch_test", "propagate",
    "qbm", "run_ensemble", "spin_boson", "validate_pair",
]
