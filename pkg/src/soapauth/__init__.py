"""Prove an OpenID Connect identity to a messaging peer, bound to the channel's safety number."""

from .crypto import pkce_challenge, salted_hash
from .errors import SoapError
from .messaging import SafetyNumber, compute_safety_number
from .prover import Prover, ProverConfig, SoapAttestation, start_soap
from .verifier import IdpRegistry, check_attestation, verify_attestation

__version__ = "0.1.0"

__all__ = [
    "IdpRegistry", "Prover", "ProverConfig", "SafetyNumber", "SoapAttestation", "SoapError",
    "check_attestation", "compute_safety_number", "pkce_challenge", "salted_hash", "start_soap",
    "verify_attestation",
]
