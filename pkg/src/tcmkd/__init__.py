"""Temporal cross-modal knowledge distillation for vibration fault detection.

A numpy-only training stack (``autodiff``), 1-D CNN feature extractors
(``models``), segment/window data handling (``signal``), training loops
(``training``) and target-domain transfer with anomaly scoring (``transfer``).
"""

__version__ = "0.1.0"
