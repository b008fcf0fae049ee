"""Key derivation, authenticated encryption and one-time key pairs.

Every key in the system comes out of :func:`derive_key`, a SHA-256 over
length-prefixed parts, so keys are reproducible from their listed inputs
and ordering matters.  Symmetric encryption is AES-256-GCM.  Bulk data for
a curve public key is sealed with an ephemeral ECDH agreement on P-256
followed by the same AEAD.

Randomness is always drawn from a caller-supplied ``random.Random`` when one
is given, which keeps simulated runs byte-for-byte reproducible.  Without one,
the OS CSPRNG is used.
"""

from __future__ import annotations

import hashlib
import os
import random
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

KEY_LEN = 32
SALT_LEN = 32
NONCE_LEN = 12
TAG_LEN = 16

CURVE = ec.SECP256R1()
# order of the P-256 base point
CURVE_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551

_MR_WITNESSES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41)


class CryptoError(Exception):
    pass


class AuthenticationError(CryptoError):
    """Ciphertext failed authentication: wrong key or modified bytes."""


def random_bytes(n: int, rng: Optional[random.Random] = None) -> bytes:
    if rng is None:
        return os.urandom(n)
    return rng.randbytes(n)


def new_salt(rng: Optional[random.Random] = None) -> bytes:
    return random_bytes(SALT_LEN, rng)


def ts_bytes(ts: int) -> bytes:
    """Timestamps are fixed 8-byte big-endian unsigned integers."""
    return int(ts).to_bytes(8, "big")


def int_bytes(n: int) -> bytes:
    """Minimal big-endian encoding of a non-negative integer (``0`` -> ``b"\\x00"``)."""
    if n < 0:
        raise ValueError("negative integer")
    return n.to_bytes(max(1, (n.bit_length() + 7) // 8), "big")


def lp(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def read_lp(buf: bytes, offset: int = 0) -> tuple[bytes, int]:
    if offset + 4 > len(buf):
        raise ValueError("truncated length prefix")
    (n,) = struct.unpack_from(">I", buf, offset)
    start = offset + 4
    if start + n > len(buf):
        raise ValueError("truncated field")
    return buf[start:start + n], start + n


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def derive_key(parts: Sequence[bytes]) -> bytes:
    """One-way key derivation over an ordered list of byte strings.

    Each part is length-prefixed so ``[b"a", b"b"]`` and ``[b"ab"]`` differ.
    """
    if not parts:
        raise ValueError("no key material")
    h = hashlib.sha256()
    for part in parts:
        h.update(lp(bytes(part)))
    return h.digest()


def is_probable_prime(n: int) -> bool:
    """Miller-Rabin with fixed witnesses; deterministic for n < 3.3e24."""
    if n < 2:
        return False
    for p in _MR_WITNESSES:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_WITNESSES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


# -- symmetric -------------------------------------------------------------


@dataclass(frozen=True)
class Ciphertext:
    nonce_iv: bytes
    body: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return lp(self.nonce_iv) + lp(self.tag) + lp(self.body)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Ciphertext":
        nonce, off = read_lp(data, 0)
        tag, off = read_lp(data, off)
        body, off = read_lp(data, off)
        if off != len(data):
            raise ValueError("trailing bytes after ciphertext")
        return cls(nonce_iv=nonce, body=body, tag=tag)


def sym_encrypt_with_key(key: bytes, plaintext: bytes, rng: Optional[random.Random] = None) -> Ciphertext:
    if len(key) != KEY_LEN:
        raise ValueError("key must be 32 bytes")
    nonce = random_bytes(NONCE_LEN, rng)
    sealed = AESGCM(key).encrypt(nonce, plaintext, None)
    return Ciphertext(nonce_iv=nonce, body=sealed[:-TAG_LEN], tag=sealed[-TAG_LEN:])


def sym_decrypt_with_key(key: bytes, ct: Ciphertext) -> bytes:
    if len(key) != KEY_LEN:
        raise ValueError("key must be 32 bytes")
    try:
        return AESGCM(key).decrypt(ct.nonce_iv, ct.body + ct.tag, None)
    except (InvalidTag, ValueError) as exc:
        raise AuthenticationError("authentication failed") from exc


def sym_encrypt(key_parts: Sequence[bytes], plaintext: bytes, rng: Optional[random.Random] = None) -> Ciphertext:
    return sym_encrypt_with_key(derive_key(key_parts), plaintext, rng)


def sym_decrypt(key_parts: Sequence[bytes], ct: Ciphertext) -> bytes:
    return sym_decrypt_with_key(derive_key(key_parts), ct)


def make_signature(qt: bytes, pw: bytes) -> bytes:
    """Submitter signature: the derived key over (token, password)."""
    if not qt or not pw:
        raise ValueError("token and password must be non-empty")
    return derive_key([qt, pw])


# -- asymmetric ------------------------------------------------------------


def encode_point(pk: ec.EllipticCurvePublicKey) -> bytes:
    return pk.public_bytes(serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint)


def decode_point(data: bytes) -> ec.EllipticCurvePublicKey:
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(CURVE, data)
    except ValueError as exc:
        raise CryptoError("not a point on the curve") from exc


@dataclass(frozen=True)
class OtakKeyPair:
    secret: ec.EllipticCurvePrivateKey
    public: ec.EllipticCurvePublicKey

    @property
    def secret_scalar(self) -> int:
        return self.secret.private_numbers().private_value

    def public_bytes(self) -> bytes:
        return encode_point(self.public)

    def sign(self, message: bytes) -> bytes:
        return self.secret.sign(message, ec.ECDSA(hashes.SHA256()))

    def verify(self, message: bytes, signature: bytes) -> bool:
        try:
            self.public.verify(signature, message, ec.ECDSA(hashes.SHA256()))
        except InvalidSignature:
            return False
        return True


def keypair_from_scalar(scalar: int) -> OtakKeyPair:
    sk = ec.derive_private_key(scalar, CURVE)
    return OtakKeyPair(secret=sk, public=sk.public_key())


def scalar_from_parts(parts: Sequence[bytes], order: int = CURVE_ORDER) -> int:
    """Reduce a derived key into ``[1, order)``, appending a counter byte on zero."""
    parts = list(parts)
    scalar = int.from_bytes(derive_key(parts), "big") % order
    counter = 0
    while scalar == 0:
        counter += 1
        if counter > 255:
            raise CryptoError("could not derive a non-zero scalar")
        scalar = int.from_bytes(derive_key(parts + [bytes([counter])]), "big") % order
    return scalar


def generate_otak(eta: int, rho: int, tau_c: int, qt: bytes, salt: bytes) -> OtakKeyPair:
    """One-time key pair from (nonce+1)*prime, timestamp, token and salt."""
    if rho <= 2 ** 20 or not is_probable_prime(rho):
        raise ValueError("rho not prime")
    if tau_c <= 0:
        raise ValueError("tau_c must be positive")
    parts = [int_bytes((eta + 1) * rho), ts_bytes(tau_c), qt, salt]
    return keypair_from_scalar(scalar_from_parts(parts))


@dataclass(frozen=True)
class SealedBox:
    """Ephemeral public point plus the AEAD ciphertext it keys."""

    ephemeral: bytes
    ct: Ciphertext

    def to_bytes(self) -> bytes:
        return lp(self.ephemeral) + self.ct.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedBox":
        eph, off = read_lp(data, 0)
        return cls(ephemeral=eph, ct=Ciphertext.from_bytes(data[off:]))


def _box_key(eph: bytes, recipient: bytes, shared: bytes) -> bytes:
    return derive_key([b"sealed-box", eph, recipient, shared])


def asym_encrypt(
    pk: Union[ec.EllipticCurvePublicKey, bytes],
    plaintext: bytes,
    rng: Optional[random.Random] = None,
) -> SealedBox:
    if isinstance(pk, (bytes, bytearray)):
        pk = decode_point(bytes(pk))
    eph_scalar = int.from_bytes(random_bytes(KEY_LEN, rng), "big") % (CURVE_ORDER - 1) + 1
    eph = ec.derive_private_key(eph_scalar, CURVE)
    eph_pub = encode_point(eph.public_key())
    shared = eph.exchange(ec.ECDH(), pk)
    key = _box_key(eph_pub, encode_point(pk), shared)
    return SealedBox(ephemeral=eph_pub, ct=sym_encrypt_with_key(key, plaintext, rng))


def asym_decrypt(sk: Union[ec.EllipticCurvePrivateKey, OtakKeyPair, int], box: SealedBox) -> bytes:
    if isinstance(sk, OtakKeyPair):
        sk = sk.secret
    elif isinstance(sk, int):
        sk = ec.derive_private_key(sk, CURVE)
    try:
        eph = decode_point(box.ephemeral)
    except CryptoError as exc:
        raise AuthenticationError("bad ephemeral point") from exc
    shared = sk.exchange(ec.ECDH(), eph)
    key = _box_key(box.ephemeral, encode_point(sk.public_key()), shared)
    return sym_decrypt_with_key(key, box.ct)
