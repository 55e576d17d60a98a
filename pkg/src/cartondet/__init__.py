"""Desk-scale anchor-based carton detector.

Subpackages cover the full pipeline: synthetic stacked-carton scenes with
derived taxonomy labels, COCO/VOC annotation I/O, box geometry and boundary
rasterization, training losses (focal / smooth-L1 / GIoU, IoU-gap
calibration, boundary supervision), a miniature FPN detector, and COCO-style
evaluation.
"""

__version__ = "0.1.0"
