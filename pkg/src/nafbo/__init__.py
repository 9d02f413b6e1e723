"""Bayesian optimization with meta-learned neural acquisition functions.

Meta-trains an MLP acquisition function with PPO across a distribution of
objective functions and benchmarks it against classical and transfer
acquisition baselines on a shared GP/candidate-grid stack.
"""

__version__ = "0.1.0"
