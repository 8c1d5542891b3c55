"""Distance-based regularization for fine-tuning neural networks.

Provides MARS (maximum absolute row sum) and Frobenius norm-ball
projections and penalties, a projected stochastic subgradient trainer,
and evaluators for distance-based generalization-bound measures.
"""

__version__ = "0.1.0"
