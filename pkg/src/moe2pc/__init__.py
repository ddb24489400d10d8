"""Simulated two-party private inference for mixture-of-experts layers."""

from .core import FixedPointCodec, RingTensor, encode_tensor, plain_matmul, truncate
from .errors import (
    BoundsError,
    CapacityError,
    ConfigError,
    Moe2pcError,
    PolicyError,
    ScaleError,
    SessionClosedError,
    ShapeError,
    TripleExhaustedError,
)
from .he import RotationCounter, SlotVector, matmul_batch, matmul_batch_bsgs, matmul_bolt, matmul_bolt_bsgs
from .moe import MODES, GateConfig, MoEModel, moe_forward
from .shares import CostModel, PartyId, Session, Shared, Transcript, beaver_matmul, declassify

__version__ = "0.1.0"

__all__ = [
    "BoundsError", "CapacityError", "ConfigError", "CostModel", "FixedPointCodec", "GateConfig", "MODES",
    "MoEModel", "Moe2pcError", "PartyId", "PolicyError", "RingTensor", "RotationCounter", "ScaleError",
    "Session", "SessionClosedError", "ShapeError", "Shared", "SlotVector", "Transcript",
    "TripleExhaustedError", "beaver_matmul", "declassify", "encode_tensor", "matmul_batch",
    "matmul_batch_bsgs", "matmul_bolt", "matmul_bolt_bsgs", "moe_forward", "plain_matmul", "truncate",
]
