"""Descriptor-conditioned docid decoder, its losses, and constrained decoding.

``placeid.gendec.train`` is imported explicitly; it depends on the retrieval
pipeline, which in turn uses the decoder defined here.
"""

from placeid.gendec.beam import beam_search, sequence_log_prob
from placeid.gendec.losses import (
    LossKind,
    cross_entropy,
    descriptor_quadruplet_loss,
    grad,
    lm_loss,
    quadruplet_lm_loss,
    triplet_lm_loss,
)
from placeid.gendec.model import DecoderParams, forward, load_checkpoint, save_checkpoint

__all__ = [
    "DecoderParams", "LossKind", "beam_search", "cross_entropy", "descriptor_quadruplet_loss", "forward",
    "grad", "lm_loss", "load_checkpoint", "quadruplet_lm_loss", "save_checkpoint", "sequence_log_prob",
    "triplet_lm_loss",
]
