"""Deterministic learned-image-codec toolkit: overflow-safe integer decoder
inference, post-training quantizer, codec, metrics, and a cross-backend
determinism verifier."""

__version__ = "0.1.0"
