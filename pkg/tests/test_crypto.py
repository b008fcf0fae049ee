import hashlib
import random
import struct
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from qshare import crypto

GOLDEN = Path(__file__).parent / "golden"


def test_derive_key_length_prefixing():
    assert crypto.derive_key([b"a", b"b"]) != crypto.derive_key([b"ab"])
    assert crypto.derive_key([b"", b"ab"]) != crypto.derive_key([b"ab", b""])


def test_derive_key_deterministic():
    parts = [b"tau", b"\x00" * 32]
    assert crypto.derive_key(parts) == crypto.derive_key(list(parts))
    assert len(crypto.derive_key(parts)) == 32


def test_derive_key_matches_manual_construction():
    manual = hashlib.sha256(struct.pack(">I", 1) + b"a" + struct.pack(">I", 2) + b"bc").digest()
    assert crypto.derive_key([b"a", b"bc"]) == manual


def test_derive_key_empty():
    with pytest.raises(ValueError, match="no key material"):
        crypto.derive_key([])


def test_derive_key_no_collisions_over_10000_inputs():
    r = random.Random(99)
    inputs = {r.randbytes(r.randrange(1, 40)) for _ in range(10_000)}
    keys = {crypto.derive_key([x]) for x in inputs}
    assert len(keys) == len(inputs)
    # independent re-hash oracle
    x = next(iter(inputs))
    assert crypto.derive_key([x]) == hashlib.sha256(len(x).to_bytes(4, "big") + x).digest()


def test_sha256_vectors():
    assert crypto.sha256(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert crypto.sha256(b"abc").hex() == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert crypto.sha256(b"x") == crypto.sha256(b"x")
    assert crypto.sha256(b"\x00") != crypto.sha256(b"\x01")


def test_is_probable_prime_agrees_with_sympy():
    sympy = pytest.importorskip("sympy")
    r = random.Random(5)
    for n in [0, 1, 2, 3, 4, 561, 1105, 3215031751, 2 ** 61 - 1] + [r.randrange(2, 10 ** 12) for _ in range(500)]:
        assert crypto.is_probable_prime(n) == sympy.isprime(n), n


@given(st.binary(max_size=512), st.lists(st.binary(max_size=16), min_size=1, max_size=4))
@settings(max_examples=60, deadline=None)
def test_sym_round_trip(msg, parts):
    ct = crypto.sym_encrypt(parts, msg)
    assert crypto.sym_decrypt(parts, ct) == msg


@given(st.binary(min_size=1, max_size=128), st.binary(min_size=1, max_size=16), st.binary(min_size=1, max_size=16))
@settings(max_examples=60, deadline=None)
def test_sym_wrong_key_fails(msg, k1, k2):
    if k1 == k2:
        return
    ct = crypto.sym_encrypt([k1], msg)
    with pytest.raises(crypto.AuthenticationError):
        crypto.sym_decrypt([k2], ct)


def test_sym_byte_flip_detected(rng):
    ct = crypto.sym_encrypt([b"k"], b"exam paper body", rng)
    raw = bytearray(ct.to_bytes())
    for i in range(len(raw)):
        mutated = bytearray(raw)
        mutated[i] ^= 0x01
        try:
            parsed = crypto.Ciphertext.from_bytes(bytes(mutated))
        except ValueError:
            continue  # length prefix damaged
        with pytest.raises(crypto.AuthenticationError):
            crypto.sym_decrypt([b"k"], parsed)


def test_sym_key_part_order_matters(rng):
    ct = crypto.sym_encrypt([b"tau", b"salt"], b"m", rng)
    with pytest.raises(crypto.AuthenticationError):
        crypto.sym_decrypt([b"salt", b"tau"], ct)


def test_ciphertext_layout():
    ct = crypto.Ciphertext(nonce_iv=b"N" * 12, body=b"BODY", tag=b"T" * 16)
    raw = ct.to_bytes()
    assert raw == b"\x00\x00\x00\x0c" + b"N" * 12 + b"\x00\x00\x00\x10" + b"T" * 16 + b"\x00\x00\x00\x04BODY"
    assert crypto.Ciphertext.from_bytes(raw) == ct
    with pytest.raises(ValueError):
        crypto.Ciphertext.from_bytes(raw + b"x")


def test_ciphertext_golden_vector():
    key = bytes(range(32))
    ct = crypto.sym_encrypt_with_key(key, b"golden plaintext", random.Random(7))
    expected = (GOLDEN / "ciphertext_v1.hex").read_text().strip()
    assert ct.to_bytes().hex() == expected
    assert crypto.sym_decrypt_with_key(key, crypto.Ciphertext.from_bytes(bytes.fromhex(expected))) == b"golden plaintext"


def test_make_signature():
    assert crypto.make_signature(b"qt", b"pw") == crypto.make_signature(b"qt", b"pw")
    assert crypto.make_signature(b"qt", b"pw") == crypto.derive_key([b"qt", b"pw"])
    assert crypto.make_signature(b"a", b"b") != crypto.derive_key([b"ab", b""])
    with pytest.raises(ValueError):
        crypto.make_signature(b"ab", b"")
    with pytest.raises(ValueError):
        crypto.make_signature(b"", b"pw")


def test_signature_as_symmetric_key(rng):
    sig = crypto.make_signature(b"QT-1", b"secret")
    ct = crypto.sym_encrypt([sig], b"questions", rng)
    assert crypto.sym_decrypt([sig], ct) == b"questions"


def test_otak_deterministic_and_valid():
    salt = bytes(32)
    a = crypto.generate_otak(41, 24066347, 1515552555821, b"QT", salt)
    b = crypto.generate_otak(41, 24066347, 1515552555821, b"QT", salt)
    assert a.secret_scalar == b.secret_scalar
    assert a.public_bytes() == b.public_bytes()
    sig = a.sign(b"test message")
    assert a.verify(b"test message", sig)
    assert not a.verify(b"other message", sig)


def test_otak_scalar_is_reduced_derivation():
    salt = b"\x07" * 32
    pair = crypto.generate_otak(9, 24066347, 1000, b"QT", salt)
    parts = [crypto.int_bytes(10 * 24066347), (1000).to_bytes(8, "big"), b"QT", salt]
    assert pair.secret_scalar == int.from_bytes(crypto.derive_key(parts), "big") % crypto.CURVE_ORDER


def test_otak_salt_sensitivity():
    s1 = bytes(32)
    s2 = bytes(31) + b"\x01"
    a = crypto.generate_otak(1, 24066347, 5, b"QT", s1)
    b = crypto.generate_otak(1, 24066347, 5, b"QT", s2)
    assert a.public_bytes() != b.public_bytes()


@pytest.mark.parametrize("rho", [24066348, 1000, 1048573])
def test_otak_rejects_bad_rho(rho):
    with pytest.raises(ValueError, match="rho not prime"):
        crypto.generate_otak(1, rho, 5, b"QT", bytes(32))


def test_scalar_counter_retry(monkeypatch):
    calls = []
    real = crypto.derive_key

    def fake(parts):
        calls.append(list(parts))
        return bytes(32) if len(calls) == 1 else real(parts)

    monkeypatch.setattr(crypto, "derive_key", fake)
    scalar = crypto.scalar_from_parts([b"x"])
    assert scalar != 0
    assert calls[1] == [b"x", b"\x01"]


def test_scalar_gives_up_after_255(monkeypatch):
    monkeypatch.setattr(crypto, "derive_key", lambda parts: bytes(32))
    with pytest.raises(crypto.CryptoError):
        crypto.scalar_from_parts([b"x"])


@pytest.mark.parametrize("size", [1, 1024 * 1024])
def test_asym_round_trip(rng, size):
    pair = crypto.keypair_from_scalar(123456789)
    msg = rng.randbytes(size)
    box = crypto.asym_encrypt(pair.public, msg, rng)
    assert crypto.asym_decrypt(pair, box) == msg
    assert crypto.asym_decrypt(pair, crypto.SealedBox.from_bytes(box.to_bytes())) == msg


def test_asym_wrong_secret(rng):
    pair = crypto.keypair_from_scalar(123456789)
    box = crypto.asym_encrypt(pair.public_bytes(), b"credentials", rng)
    with pytest.raises(crypto.AuthenticationError):
        crypto.asym_decrypt(987654321, box)


def test_asym_seeded_is_reproducible():
    pair = crypto.keypair_from_scalar(5)
    a = crypto.asym_encrypt(pair.public, b"m", random.Random(3)).to_bytes()
    b = crypto.asym_encrypt(pair.public, b"m", random.Random(3)).to_bytes()
    assert a == b
