"""Real-time RAN control loops over an E3-style interface: codec, transport, agent, simulated DU and dApps."""

from .codec import E3Pdu, PduKind, decode, encode
from .sdk import DappCore

__version__ = "0.1.0"

__all__ = ["E3Pdu", "PduKind", "encode", "decode", "DappCore", "__version__"]
