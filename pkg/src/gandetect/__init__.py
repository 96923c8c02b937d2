"""GAN-enhanced object detection at desk scale.

A DCGAN trained on 32x32 chips doubles as an image enhancer (latent
projection) and a feature extractor (a 28672-dimensional pooled
activation probe with a linear classifier on top). A single-shot
detector proposes boxes on 128x128 canvases; a cascade rescues its
small, low-confidence detections by enhancing and rescoring the cropped
regions. The evaluation benchmark composes scenes of degraded chips and
compares detector-only against the cascade.
"""

__version__ = "0.1.0"

from .boxes import Box, Detection, GtBox, decode_offsets, encode_offsets, iou, nms
from .errors import DataError, NumericalError

__all__ = [
    "Box",
    "DataError",
    "Detection",
    "GtBox",
    "NumericalError",
    "decode_offsets",
    "encode_offsets",
    "iou",
    "nms",
    "__version__",
]
