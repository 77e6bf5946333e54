"""Exception hierarchy.

Every protocol failure carries a stable, kebab-case ``code`` so scenario
expectations and CLI reports can match on it without parsing messages.
"""

from __future__ import annotations


class SoapError(Exception):
    """Base class for all protocol errors."""

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}" if detail else code)


class CryptoError(SoapError):
    pass


class TokenError(SoapError):
    pass


class IdpError(SoapError):
    pass


class ProverError(SoapError):
    pass


class VerificationError(SoapError):
    pass


class MessagingError(SoapError):
    pass


class ScenarioError(SoapError):
    pass


class ConfigError(SoapError):
    pass
