"""Passive wave-correlation laboratory.

Stochastic wave simulation, correlation stability, source-to-solution
recovery from correlations, and geometry reconstruction from the recovered
operator.
"""

__version__ = "0.1.0"
