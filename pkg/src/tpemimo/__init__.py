"""Learned truncated-polynomial-expansion (TPE) detection for uplink massive MIMO.

Submodules
----------
model
    Channel sampling, real/complex conversion, QAM mapping and the noisy link.
detect
    Exact ZF/MMSE detectors, TPE coefficients and detection, operation counts.
train
    Offline fitting of TPE coefficients (Adam and a closed-form oracle).
sim
    Monte-Carlo bit-error-rate sweeps.
cli
    The ``tpemimo`` command line tool.
"""

__version__ = "0.1.0"
