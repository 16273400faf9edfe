"""Desk-scale differential face-morphing detection toolkit.

Trains a pair of non-weight-sharing feature networks with identity-regularized
morph classification on procedurally generated face data, and benchmarks
detectors with ISO-30107-3-style APCER/BPCER metrics and DET curves.
"""

__version__ = "0.1.0"
