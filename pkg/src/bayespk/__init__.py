"""Bayesian pharmacokinetic/pharmacodynamic modelling with NUTS.

Submodules
----------
events    event-schedule parsing and validation
linpk     closed-form linear compartment solutions
ivp       adaptive Runge-Kutta integration with dual-number sensitivities
autodiff  forward-mode automatic differentiation
models    built-in statistical models
nuts      No-U-Turn sampler with windowed adaptation
mcstats   convergence diagnostics and PSIS-LOO
cli       command-line interface
"""
__version__ = "0.1.0"
