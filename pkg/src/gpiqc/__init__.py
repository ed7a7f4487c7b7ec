"""Robust controller synthesis with learned sector bounds.

A Gaussian-process model of a static nonlinearity yields a sector bound
that holds with prescribed probability; the sector defines full-block
multipliers for an integral-quadratic-constraint robust synthesis of an
output-feedback controller.
"""

__version__ = "0.1.0"
