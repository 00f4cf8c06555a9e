"""halo: text-driven semantic localization for landmark photo collections.

The pipeline has three stages: distilling textual pseudo-labels from image
metadata, adapting a text-conditioned segmenter with geometry-mined weak
supervision, and lifting per-view segmentations into a view-consistent
volumetric field. Large pretrained models sit behind pluggable backend
contracts so everything is testable with deterministic mocks.
"""

__version__ = "0.1.0"
