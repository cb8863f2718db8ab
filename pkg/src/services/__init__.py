"""
Services Package
"""

from .exact_engine import Trajectory, evolve, evolve_split, tail_risk_exact, tail_risk_upper_bound
from .bounds import bias_risk_bound, variance_risk_bound, lower_bound_diagnostic
from .mc_sim import FullProblem, mc_estimate, mc_run
from .oracles import Verdict, append_verdict

__all__ = [
    'Trajectory', 'evolve', 'evolve_split', 'tail_risk_exact', 'tail_risk_upper_bound',
    'bias_risk_bound', 'variance_risk_bound', 'lower_bound_diagnostic',
    'FullProblem', 'mc_estimate', 'mc_run',
    'Verdict', 'append_verdict',
]
