"""Vision-IMU fusion for articulated hand tracking.

Synthetic paired capture (glove IMUs plus a low-resolution camera), an
attention-based fusion network with a graph-distance prior, classical
filtering baselines, and a deterministic evaluation harness.
"""

__version__ = "0.1.0"
