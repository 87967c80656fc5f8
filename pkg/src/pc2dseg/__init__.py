"""Multi-view projection pipeline for Lidar semantic segmentation.

Aligned Lidar scenes are rendered from generated virtual camera poses into
multi-channel 2D views, a pluggable 2D segmenter produces per-pixel class
logits, and an occlusion-aware voting scheme accumulates those logits back
onto the 3D points. Includes a synthetic (image, label) dataset emitter for
training 2D models in-domain, pseudo-label export for adapting 3D models,
and IoU evaluation tooling.
"""

__version__ = "0.1.0"
