"""Amortized proximal optimization toolkit.

Online meta-learning of base-optimizer learning rates and Kronecker-structured
gradient preconditioners against a proximal meta-objective, plus classical
second-order oracles (exact and closed-form proximal point, damped Newton,
KFAC, optimal dense preconditioner) and a benchmark harness for desk-scale
experiments.
"""

__version__ = "0.1.0"
