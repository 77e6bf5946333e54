"""Cryptographic primitives shared by the prover, verifier and simulated IdPs.

All octet strings cross module boundaries as ``bytes`` and are serialized as
unpadded base64url.  Randomness flows through :class:`RandomSource`, which is
either backed by the OS CSPRNG or, in simulation, by a seeded generator so
that whole scenarios replay bit-for-bit.
"""

from __future__ import annotations

import base64
import hashlib
import math
import random
import re
import secrets
from dataclasses import dataclass
from typing import Any, Mapping

import gmpy2
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ed25519, padding, rsa
from cryptography.hazmat.primitives.kdf.argon2 import Argon2id

from .errors import CryptoError

SIGNATURE_ALGORITHMS = ("RS256", "EdDSA")
PROTOCOL_ENTROPY_BITS = 256
_ALLOWED_ENTROPY = (256, 384, 512)
_B64URL_RE = re.compile(r"^[A-Za-z0-9_-]*$")

# name -> Argon2id cost parameters (memory_cost in KiB)
HASH_PROFILES: dict[str, dict[str, int]] = {
    "argon2id": {"iterations": 2, "memory_cost": 19456, "lanes": 1, "length": 32},
    "test": {"iterations": 1, "memory_cost": 64, "lanes": 1, "length": 32},
}
DEFAULT_HASH_PROFILE = "argon2id"


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    """Strict unpadded base64url decoding; raises ``CryptoError('invalid-input')``."""
    if not isinstance(text, str) or not _B64URL_RE.match(text) or len(text) % 4 == 1:
        raise CryptoError("invalid-input", "not unpadded base64url")
    data = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    # reject non-canonical encodings (stray low bits in the final symbol)
    if b64url_encode(data) != text:
        raise CryptoError("invalid-input", "non-canonical base64url")
    return data


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def pkce_challenge(code_verifier: bytes | str) -> str:
    """S256 code challenge: base64url(sha256(verifier)) without padding."""
    if isinstance(code_verifier, str):
        code_verifier = code_verifier.encode("ascii")
    if not code_verifier:
        raise CryptoError("invalid-input", "empty code verifier")
    return b64url_encode(sha256(code_verifier))


@dataclass(frozen=True)
class RandomValue:
    bytes: bytes
    entropy_bits: int

    def __post_init__(self) -> None:
        if len(self.bytes) * 8 < self.entropy_bits:
            raise CryptoError("invalid-input", "fewer bytes than declared entropy")

    @property
    def b64(self) -> str:
        return b64url_encode(self.bytes)

    @classmethod
    def from_b64(cls, text: str) -> "RandomValue":
        raw = b64url_decode(text)
        return cls(raw, len(raw) * 8)


class RandomSource:
    """Single seedable source of randomness.

    With ``seed=None`` bytes come from :mod:`secrets`.  With a seed they come
    from a private :class:`random.Random`, which is only acceptable inside the
    simulator.  Not thread-safe; the owning scenario engine serializes access.
    """

    def __init__(self, seed: int | None = None, *, _label: str = "root"):
        self.seed = seed
        self.label = _label
        self._rng = random.Random(seed) if seed is not None else None

    @property
    def deterministic(self) -> bool:
        return self._rng is not None

    def token_bytes(self, n: int) -> bytes:
        if self._rng is None:
            return secrets.token_bytes(n)
        return self._rng.randbytes(n)

    def getrandbits(self, k: int) -> int:
        if self._rng is None:
            return secrets.randbits(k)
        return self._rng.getrandbits(k)

    def random_value(self, entropy_bits: int = PROTOCOL_ENTROPY_BITS) -> RandomValue:
        if entropy_bits not in _ALLOWED_ENTROPY:
            raise CryptoError("invalid-input", f"unsupported entropy size {entropy_bits}")
        return RandomValue(self.token_bytes(entropy_bits // 8), entropy_bits)

    def fork(self, label: str) -> "RandomSource":
        """Independent sub-stream; deterministic iff this source is."""
        if self.seed is None:
            return RandomSource(None, _label=f"{self.label}/{label}")
        digest = sha256(f"{self.seed}:{self.label}/{label}".encode())
        return RandomSource(int.from_bytes(digest[:8], "big"), _label=f"{self.label}/{label}")


_SYSTEM = RandomSource()


def gen_random(entropy_bits: int = PROTOCOL_ENTROPY_BITS, source: RandomSource | None = None) -> RandomValue:
    return (source or _SYSTEM).random_value(entropy_bits)


@dataclass(frozen=True)
class SaltedHash:
    bytes: bytes
    profile: str

    @property
    def b64(self) -> str:
        return b64url_encode(self.bytes)


def salted_hash(safety_number: Any, salt: RandomValue, profile: str = DEFAULT_HASH_PROFILE) -> SaltedHash:
    """Password-hash a safety number under ``salt``.

    ``safety_number`` is a :class:`~soapauth.messaging.SafetyNumber` or its
    raw digest bytes.
    """
    params = HASH_PROFILES.get(profile)
    if params is None:
        raise CryptoError("unsupported-profile", profile)
    if salt.entropy_bits < PROTOCOL_ENTROPY_BITS:
        raise CryptoError("invalid-input", "salt below 256 bits of entropy")
    material = getattr(safety_number, "digest", safety_number)
    kdf = Argon2id(salt=salt.bytes, **params)
    return SaltedHash(kdf.derive(material), profile)


# -- signing ---------------------------------------------------------------


@dataclass(frozen=True)
class SigningKeyPair:
    key_id: str
    algorithm: str
    private: Any
    public: Any

    def __post_init__(self) -> None:
        if self.algorithm not in SIGNATURE_ALGORITHMS:
            raise CryptoError("invalid-input", f"algorithm {self.algorithm!r} not allowed")

    def public_bytes(self) -> bytes:
        """Canonical public-key serialization (raw for Ed25519, DER SPKI for RSA)."""
        if self.algorithm == "EdDSA":
            return self.public.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        return self.public.public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
        )

    def public_jwk(self) -> dict[str, str]:
        return public_key_to_jwk(self.public, self.algorithm, self.key_id)


def _int_b64(value: int) -> str:
    return b64url_encode(value.to_bytes(max(1, math.ceil(value.bit_length() / 8)), "big"))


def public_key_to_jwk(public: Any, algorithm: str, key_id: str) -> dict[str, str]:
    if algorithm == "RS256":
        nums = public.public_numbers()
        return {"kty": "RSA", "kid": key_id, "alg": algorithm, "use": "sig",
                "n": _int_b64(nums.n), "e": _int_b64(nums.e)}
    raw = public.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return {"kty": "OKP", "crv": "Ed25519", "kid": key_id, "alg": algorithm, "use": "sig",
            "x": b64url_encode(raw)}


def jwk_to_public_key(jwk: Mapping[str, Any]) -> tuple[Any, str]:
    """Return ``(public_key, algorithm)``; raises ``CryptoError('invalid-input')``."""
    try:
        alg = jwk["alg"]
        if jwk["kty"] == "RSA" and alg == "RS256":
            n = int.from_bytes(b64url_decode(jwk["n"]), "big")
            e = int.from_bytes(b64url_decode(jwk["e"]), "big")
            return rsa.RSAPublicNumbers(e, n).public_key(), alg
        if jwk["kty"] == "OKP" and jwk.get("crv") == "Ed25519" and alg == "EdDSA":
            return ed25519.Ed25519PublicKey.from_public_bytes(b64url_decode(jwk["x"])), alg
    except (KeyError, TypeError, ValueError) as exc:
        raise CryptoError("invalid-input", f"bad JWK: {exc}") from exc
    raise CryptoError("invalid-input", "unsupported JWK type")


def jwks_document(keys: list[SigningKeyPair]) -> dict[str, list[dict[str, str]]]:
    return {"keys": [k.public_jwk() for k in keys]}


def _seeded_prime(source: RandomSource, bits: int) -> int:
    while True:
        candidate = source.getrandbits(bits) | (0b11 << (bits - 2)) | 1
        prime = int(gmpy2.next_prime(candidate))
        if prime.bit_length() == bits:
            return prime


def _seeded_rsa_key(source: RandomSource, bits: int = 2048) -> rsa.RSAPrivateKey:
    e = 65537
    while True:
        p = _seeded_prime(source, bits // 2)
        q = _seeded_prime(source, bits // 2)
        phi = (p - 1) * (q - 1)
        if p == q or math.gcd(e, phi) != 1 or (p * q).bit_length() != bits:
            continue
        d = pow(e, -1, phi)
        numbers = rsa.RSAPrivateNumbers(
            p, q, d,
            rsa.rsa_crt_dmp1(d, p), rsa.rsa_crt_dmq1(d, q), rsa.rsa_crt_iqmp(p, q),
            rsa.RSAPublicNumbers(e, p * q),
        )
        return numbers.private_key()


def generate_signing_key(
    algorithm: str = "RS256", key_id: str | None = None, source: RandomSource | None = None
) -> SigningKeyPair:
    """Generate a key pair; reproducible when ``source`` is seeded."""
    source = source or _SYSTEM
    if algorithm == "RS256":
        if source.deterministic:
            private = _seeded_rsa_key(source)
        else:
            private = rsa.generate_private_key(public_exponent=65537, key_size=2048)
    elif algorithm == "EdDSA":
        private = ed25519.Ed25519PrivateKey.from_private_bytes(source.token_bytes(32))
    else:
        raise CryptoError("invalid-input", f"algorithm {algorithm!r} not allowed")
    public = private.public_key()
    if key_id is None:
        key_id = b64url_encode(sha256(_public_der(public))[:12])
    return SigningKeyPair(key_id, algorithm, private, public)


def _public_der(public: Any) -> bytes:
    return public.public_bytes(serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo)


def sign(payload: bytes, key: SigningKeyPair) -> bytes:
    if key.algorithm == "RS256":
        return key.private.sign(payload, padding.PKCS1v15(), hashes.SHA256())
    return key.private.sign(payload)


def verify(payload: bytes, signature: bytes, public_key: Any, algorithm: str) -> bool:
    """Never raises: malformed input or mismatched key types yield ``False``."""
    try:
        if algorithm == "RS256" and isinstance(public_key, rsa.RSAPublicKey):
            public_key.verify(signature, payload, padding.PKCS1v15(), hashes.SHA256())
            return True
        if algorithm == "EdDSA" and isinstance(public_key, ed25519.Ed25519PublicKey):
            public_key.verify(signature, payload)
            return True
    except (InvalidSignature, ValueError, TypeError):
        return False
    return False
