"""Pull-based remote estimation of Markov sources with joint age-state beliefs."""

from .belief import MAP, Estimator, martingale
from .chain import P1, P2, TransitionMatrix

__all__ = ["MAP", "Estimator", "martingale", "P1", "P2", "TransitionMatrix"]
__version__ = "0.1.0"
