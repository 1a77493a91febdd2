"""Real-model exporter for the fmseg exchange dataset layout.

Runs a frozen image-text encoder (modified patch-level extraction), a
self-supervised vision encoder, and a promptable mask model over a
directory of images, writing features, prototypes, masks, and manifests
that the pipeline package consumes through its file interfaces.
"""

__version__ = "0.1.0"
