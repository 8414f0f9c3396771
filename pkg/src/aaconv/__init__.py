"""Attention-augmented convolution at desk scale.

2D relative multi-head self-attention and the augmented convolution built on
it, with a tape-based reverse-mode autodiff engine, finite-difference gradient
certification, exact parameter/FLOP/memory accounting for ResNet-family
architectures, and a small deterministic training harness.
"""

__version__ = "0.1.0"
