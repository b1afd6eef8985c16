"""Self-supervised keypoint-based motion transfer, built on a small
numpy reverse-mode autodiff engine.

The package learns motion-specific keypoints from unlabeled videos and
uses them to animate a still image with the motion of a driving video.
Everything differentiable is hand-rolled on numpy: no deep-learning
framework is involved.
"""

from keymotion.tensor import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"
