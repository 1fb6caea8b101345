"""Few-shot segmentation by linear reconstruction over class-aligned feature groups, at desk scale."""

__version__ = "0.1.0"
