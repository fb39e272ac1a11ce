"""Differentiable wavefield inversion and Bayesian physics discovery.

Subpackages/modules:

* ``autodiff`` — reverse-mode AD engine (supports nested differentiation)
* ``fields``   — sine-activated implicit neural representations
* ``wavesim``  — differentiable 2D finite-difference wave solver
* ``gp``       — sparse variational Gaussian process over the PDE operator
* ``bhpm``     — hidden-physics model: ELBO training and transfer
* ``ipinn``    — inverse physics-informed network baseline
* ``dataio``   — wavefield dataset format and synthetic specimen generator
* ``cli``      — command-line pipeline
"""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
