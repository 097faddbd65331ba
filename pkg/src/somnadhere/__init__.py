"""Antidepressant detection from nocturnal respiration.

Submodules are imported on demand (``from somnadhere import synth``) so the
command-line entry point can configure BLAS threading before numpy loads.
"""
__version__ = "0.1.0"
