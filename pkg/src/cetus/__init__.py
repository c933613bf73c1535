"""Stream-causal event-camera segmentation with adaptive chunking."""

__version__ = "0.1.0"
