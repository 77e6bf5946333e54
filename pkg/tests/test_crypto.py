import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soapauth import crypto
from soapauth.crypto import RandomSource, RandomValue, salted_hash
from soapauth.errors import CryptoError

from oracles import b64url, pkce_s256

# Argon2id outputs frozen from argon2-cffi's hash_secret_raw (type ID, 1 lane, 32-byte tag)
# over sha256(b"alice|bob") with salt bytes(range(32)).
ARGON_SN = hashlib.sha256(b"alice|bob").digest()
ARGON_SALT = RandomValue(bytes(range(32)), 256)
ARGON_TEST = "febf539c298f67a2e7ad238d1e1c611a70e97fad91d73884744c3608ea176219"
ARGON_DEFAULT = "b1461cc440d6a5f655847c93f9d5cf0374c459214e0762339c25c08bb68f4d44"


def test_pkce_rfc7636_appendix_b():
    verifier = "dBjftJeZ4CVP-mB92K27uhbUJU1p1r_wW1gFWFOEjXk"
    assert crypto.pkce_challenge(verifier) == "E9Melhoa2OwvFrEMTJguCHaoeK1t8URWbuGJSstw-cM"


def test_sha256_empty():
    assert crypto.sha256(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def test_pkce_empty_verifier_rejected():
    with pytest.raises(CryptoError) as exc:
        crypto.pkce_challenge("")
    assert exc.value.code == "invalid-input"


@given(st.text(alphabet="ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-._~", min_size=43, max_size=128))
def test_pkce_matches_oracle(verifier):
    assert crypto.pkce_challenge(verifier) == pkce_s256(verifier)


@given(st.binary(max_size=96))
def test_b64url_round_trip(data):
    text = crypto.b64url_encode(data)
    assert text == b64url(data)
    assert "=" not in text
    assert crypto.b64url_decode(text) == data


@pytest.mark.parametrize("bad", ["a", "ab=c", "ab+c", "ab/c", "abc=", "AB", "A===", " ab"])
def test_b64url_decode_is_strict(bad):
    with pytest.raises(CryptoError):
        crypto.b64url_decode(bad)


def test_seeded_source_is_deterministic():
    a, b = RandomSource(7), RandomSource(7)
    assert a.token_bytes(32) == b.token_bytes(32)
    assert a.fork("x").token_bytes(16) == b.fork("x").token_bytes(16)
    assert RandomSource(7).fork("x").token_bytes(16) != RandomSource(7).fork("y").token_bytes(16)
    assert not RandomSource().deterministic


@pytest.mark.parametrize("bits", [256, 384, 512])
def test_random_value_sizes(bits):
    value = crypto.gen_random(bits)
    assert len(value.bytes) * 8 == bits
    assert RandomValue.from_b64(value.b64) == value


@pytest.mark.parametrize("bits", [128, 255, 1024])
def test_random_value_rejects_other_sizes(bits):
    with pytest.raises(CryptoError):
        crypto.gen_random(bits)


def test_salted_hash_matches_independent_argon2id():
    assert salted_hash(ARGON_SN, ARGON_SALT, "test").bytes.hex() == ARGON_TEST
    assert salted_hash(ARGON_SN, ARGON_SALT).bytes.hex() == ARGON_DEFAULT


def test_salted_hash_depends_on_salt_and_input():
    other_salt = RandomValue(bytes(32), 256)
    h = salted_hash(ARGON_SN, ARGON_SALT, "test").bytes
    assert salted_hash(ARGON_SN, other_salt, "test").bytes != h
    assert salted_hash(bytes(32), ARGON_SALT, "test").bytes != h


def test_salted_hash_rejects_short_salt_and_unknown_profile():
    with pytest.raises(CryptoError) as exc:
        salted_hash(ARGON_SN, RandomValue(bytes(16), 128), "test")
    assert exc.value.code == "invalid-input"
    with pytest.raises(CryptoError) as exc:
        salted_hash(ARGON_SN, ARGON_SALT, "md5")
    assert exc.value.code == "unsupported-profile"


@pytest.mark.parametrize("fixture", ["rsa_key", "ed_key"])
def test_sign_verify(fixture, request):
    key = request.getfixturevalue(fixture)
    sig = crypto.sign(b"payload", key)
    assert crypto.verify(b"payload", sig, key.public, key.algorithm)
    assert not crypto.verify(b"payload!", sig, key.public, key.algorithm)
    assert not crypto.verify(b"payload", sig[:-1] + bytes([sig[-1] ^ 1]), key.public, key.algorithm)
    assert not crypto.verify(b"payload", b"", key.public, key.algorithm)


def test_verify_with_wrong_algorithm_is_false(rsa_key, ed_key):
    sig = crypto.sign(b"m", rsa_key)
    assert not crypto.verify(b"m", sig, ed_key.public, "EdDSA")
    assert not crypto.verify(b"m", sig, rsa_key.public, "HS256")


@pytest.mark.parametrize("alg", ["RS256", "EdDSA"])
def test_seeded_keygen_is_deterministic(alg):
    a = crypto.generate_signing_key(alg, source=RandomSource(3))
    b = crypto.generate_signing_key(alg, source=RandomSource(3))
    assert a.public_bytes() == b.public_bytes()
    assert a.key_id == b.key_id


def test_jwk_round_trip(rsa_key, ed_key):
    for key in (rsa_key, ed_key):
        jwk = key.public_jwk()
        assert jwk["kid"] == key.key_id and jwk["alg"] == key.algorithm
        public, alg = crypto.jwk_to_public_key(jwk)
        assert alg == key.algorithm
        assert crypto.verify(b"x", crypto.sign(b"x", key), public, alg)
    doc = crypto.jwks_document([rsa_key, ed_key])
    assert [k["kid"] for k in doc["keys"]] == ["k1", "e1"]


def test_rsa_key_is_2048_bits(rsa_key):
    assert rsa_key.private.key_size == 2048
