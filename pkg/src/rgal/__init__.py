"""Data-free knowledge transfer with triplet-guided adversarial synthesis.

Everything runs on the small numpy reverse-mode engine in ``rgal.autodiff``.
"""

__version__ = "0.1.0"
