"""Open-vocabulary object detection with image-text collaboration at desk scale."""

__version__ = "0.1.0"
