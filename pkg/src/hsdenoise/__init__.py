"""Hyperspectral image denoising toolkit.

Implements a residual encoder-decoder built from quasi-recurrent 3D units
(gated 3D convolutions combined with a recurrence over the spectral axis),
plus the supporting machinery: hand-written gradients, an incremental
training schedule, complex noise synthesis, quality metrics, and a
spectral-dependency diagnostic.

Everything is plain numpy; there is no autodiff framework underneath.
"""

__version__ = "0.1.0"
