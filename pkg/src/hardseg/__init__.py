"""Uncertainty-guided hard-region refinement for multi-organ segmentation.

A small U-Net produces the primary prediction; per-decoder-level probability
maps are mined for high-uncertainty ("hard") pixels, which two heterogeneous
refinement branches (a bidirectional selective state-space sequence model and
a deformable-convolution stack) re-segment under masked supervision.  A
per-pixel direction-masked mutual distillation loss lets the two branches
teach each other wherever one of them is more reliable.

Every numerical kernel has an independent loop-based reference in
``hardseg.oracles`` and is verified against it by the test suite.
"""

from hardseg.errors import ConfigError, NiftiParseError, UnsupportedDatatypeError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "NiftiParseError",
    "UnsupportedDatatypeError",
    "__version__",
]
