"""fusiondet: point-cloud / image fusion detection toolkit.

Hand-differentiated layers, gated cross-modal fusion blocks, rotated-box
math, KITTI-format IO, a synthetic scene generator, and a small two-stream
detection benchmark tying them together.
"""

__version__ = "0.1.0"
