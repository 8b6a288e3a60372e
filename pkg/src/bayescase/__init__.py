"""Seeded MCMC samplers for four Bayesian case studies.

Modules: ``mcmc`` (chain scaffolding and diagnostics), ``gp`` (Gaussian-process
regression), ``dlm`` (AR and outlier state-space models), ``spatial``
(spatiotemporal CAR probit-t model) and ``species`` (species-sampling models).
"""

__version__ = "0.1.0"
