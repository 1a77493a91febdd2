"""Annotation-free semantic segmentation pipeline.

Pseudo-labels come from a frozen image-text encoder plus a mask oracle
(stage 1), a small alignment head is trained against frozen text
prototypes with a contrastive loss (stage 2), and zeroshot inference
classifies every pixel by text similarity. Backends are pluggable: a
deterministic synthetic world for verification, or files exported from
real foundation models.
"""

__version__ = "0.1.0"
