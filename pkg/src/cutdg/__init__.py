"""Cut-cell discontinuous Galerkin solver for elliptic interface problems.

Builds symmetric interior penalty discretizations of the Poisson equation
with a discontinuous diffusion coefficient across a level-set interface,
agglomerates small cut cells, and solves the resulting systems with an
aggregation-multigrid stack (p-multigrid blocks, additive Schwarz smoothing,
residual-minimizing outer iteration, and preconditioned GMRES).
"""

__version__ = "0.1.0"
