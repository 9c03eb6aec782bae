"""Numerical toolkit for state-constrained, infinite-horizon discounted stochastic control.

Modules: ``problem`` (data and Bellman operator), ``geometry`` (domains and
grids), ``hjb`` (monotone solver), ``viability`` (boundary checks),
``simulate`` (Monte Carlo and Z-process tests), ``verify`` (residual checks)
and ``cli``.
"""

__version__ = "0.1.0"
