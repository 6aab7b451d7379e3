"""Variational free-energy toolkit for transverse-field mean-field spin glasses.

The package is organized in layers:

- ``stochastics``: seeded random streams, Gauss-Hermite quadrature, Monte Carlo
  error bars.
- ``core_quantum``: exact diagonalization of the quantum models, Duhamel inner
  products, the self-overlap corrected partition function and its
  superadditivity estimator.
- ``trotter_rep``: the classical path representation of the quantum trace and
  the annealed imaginary-coupling identity.
- ``rsb_functional``: single-site cavity models, the hierarchical variational
  functional, its optimizer, and the time-shifted (Hopf-Lax) value.
- ``interpolation_lab``: the two-parameter interpolation, modified two-replica
  brackets, the sum-rule residual, and tilted partition diagnostics.
- ``cli``: a thin command line front end with reproducible run manifests.
"""

__version__ = "0.1.0"
