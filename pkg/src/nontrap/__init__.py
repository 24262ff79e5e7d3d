"""Numerical toolkit for non-trapping resolvent scaling on asymptotically
Euclidean model problems.

The package has one subpackage-free module per concern:

- ``geometry``   model problems, phase-space charts, the classical symbol
  and its Hamilton field;
- ``flow``       trajectory integration, escape/trapping classification;
- ``escape``     construction and grid certification of an escape function;
- ``quantize``   semiclassical quantization on a periodic 1D grid;
- ``resolvent``  discretized Schrodinger operators, shifted solves and
  weighted resolvent norm sweeps;
- ``cli``        batch front end (plain-text configs, CSV reports).
"""

__version__ = "0.1.0"

from nontrap import errors  # noqa: F401
