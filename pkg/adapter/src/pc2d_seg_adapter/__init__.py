"""Reference adapter for the pc2dseg segmenter file-exchange protocol.

The core pipeline writes per-view channel tensors and a request manifest,
then invokes ``pc2d-seg-adapter --manifest <path>``. This package reads the
tensors, runs a pluggable 2D model (a single callable from a C'xHxW image
to CxHxW logits) and writes ``<view_id>.logits`` tensors plus ``done.json``
in the bit-exact wire format. It deliberately has no dependency on the core
package: the protocol files are the entire interface.
"""

__version__ = "0.1.0"

from .models import MODELS, echo_model, intensity_threshold_model
from .serve import AdapterRequest, serve

__all__ = [
    "AdapterRequest",
    "MODELS",
    "echo_model",
    "intensity_threshold_model",
    "serve",
]
