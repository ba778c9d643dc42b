"""Discrete geometric tokens for RNA 3D structure: an SE(3)-aware encoder,
finite scalar quantization, a flow-matching coordinate decoder, structural
metrics, codebook analysis and token-conditioned inverse folding."""

__version__ = "0.1.0"
