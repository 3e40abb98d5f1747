"""Ginzburg-Landau vortex-free states under strong applied currents.

Numerical toolkit for the vortexless regime of the 2D Ginzburg-Landau model
with an applied boundary current of order 1/eps and conductivity
sigma = sigma0 eps^2: feasibility of the current profile, the quasilinear
outer phase problem, boundary-layer profiles, matched composite fields with
residual diagnostics, and the 1D stability/evolution model.
"""

__version__ = '0.1.0'
