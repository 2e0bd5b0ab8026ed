"""Two-stage noisy-label learning for re-identification-style retrieval:
evidential calibration followed by certainty-weighted peer co-training."""

__version__ = "0.1.0"
