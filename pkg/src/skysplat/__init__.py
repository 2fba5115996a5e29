"""Dynamic Gaussian-splat reconstruction of aerial scenes with many small moving humans.

The pipeline ingests per-frame perception outputs (camera poses, world-space
point maps with confidences, human masks/boxes/keypoints, articulated body
parameters), rebuilds a clean static background mesh, resolves the global
scale ambiguity of the point maps against metric bone lengths, anchors each
human to the ground through its 2D contact point, and jointly optimizes
composited background/human 3D Gaussians with a differentiable rasterizer.
"""

__version__ = "0.1.0"
