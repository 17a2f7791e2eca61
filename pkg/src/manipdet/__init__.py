"""Multi-modal manipulation detection and grounding, trainable end to end on CPU."""

__version__ = "0.1.0"
