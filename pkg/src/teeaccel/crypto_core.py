"""Cryptographic primitives shared by the host enclave and the accelerator.

Authenticated encryption is AES-256 in counter mode with a GHASH tag (GCM
semantics, 96-bit nonce, data blocks counted from 2).  Signatures are
Ed25519; public-key encryption is X25519 + HKDF + AES-GCM (hybrid).  Every
random draw goes through an injectable ``rng`` (anything exposing
``randbytes``/``getrandbits``/``randrange`` like :class:`random.Random`), so a
seeded generator makes whole protocol transcripts reproducible.
"""

from __future__ import annotations

import functools
import hashlib
import hmac
import random
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

KEY_BYTES = 32
NONCE_BYTES = 12
TAG_BYTES = 16
BLOCK_BYTES = 16
# GCM with a 96-bit IV: counter 1 masks the tag, data starts at 2.
DATA_COUNTER_START = 2
MIN_DH_BITS = 2048
# Short exponents for large groups (2 x 128-bit security level).
DH_EXPONENT_BITS = 256

_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw
_RAW_PRIV = serialization.PrivateFormat.Raw
_NO_ENC = serialization.NoEncryption()


class CryptoError(Exception):
    """Base class for primitive-level failures."""


class AuthError(CryptoError):
    """Tag verification failed."""


class InvalidShare(CryptoError):
    """A Diffie-Hellman share is outside the open interval (1, p - 1)."""


class DecryptError(CryptoError):
    """Public-key ciphertext is malformed or was tampered with."""


class EmptySecret(CryptoError):
    pass


class WeakGroup(CryptoError):
    """Modulus below the runtime minimum outside the test configuration."""


def system_rng() -> random.SystemRandom:
    return random.SystemRandom()


@dataclass(frozen=True)
class SymmetricKey:
    material: bytes = field(repr=False)

    def __post_init__(self):
        if len(self.material) != KEY_BYTES:
            raise ValueError(f"symmetric key must be {KEY_BYTES} bytes, got {len(self.material)}")

    def fingerprint(self) -> str:
        """Short hash suitable for printing; never the key itself."""
        return hashlib.sha256(b"fingerprint" + self.material).hexdigest()[:16]

    @classmethod
    def generate(cls, rng=None) -> "SymmetricKey":
        rng = rng or system_rng()
        return cls(rng.randbytes(KEY_BYTES))


@dataclass(frozen=True)
class NonceCounter:
    nonce: bytes
    block_counter: int = DATA_COUNTER_START

    def __post_init__(self):
        if len(self.nonce) != NONCE_BYTES:
            raise ValueError(f"nonce must be {NONCE_BYTES} bytes")
        if not 0 <= self.block_counter < 2**32:
            raise ValueError("block counter is 32-bit unsigned")

    def counter_block(self) -> bytes:
        return self.nonce + self.block_counter.to_bytes(4, "big")


def _check_gcm_counter(nc: NonceCounter) -> None:
    if nc.block_counter != DATA_COUNTER_START:
        raise ValueError("GCM sealing starts data blocks at counter 2")


def seal(key: SymmetricKey, nc: NonceCounter, aad: bytes, plaintext: bytes) -> tuple[bytes, bytes]:
    _check_gcm_counter(nc)
    out = AESGCM(key.material).encrypt(nc.nonce, bytes(plaintext), bytes(aad))
    return out[:-TAG_BYTES], out[-TAG_BYTES:]


def open_(key: SymmetricKey, nc: NonceCounter, aad: bytes, ciphertext: bytes, tag: bytes) -> bytes:
    _check_gcm_counter(nc)
    if len(tag) != TAG_BYTES:
        raise AuthError("tag has wrong length")
    try:
        return AESGCM(key.material).decrypt(nc.nonce, bytes(ciphertext) + bytes(tag), bytes(aad))
    except InvalidTag:
        raise AuthError("authentication tag mismatch") from None


def ctr_xor(key: SymmetricKey, nc: NonceCounter, data: bytes) -> bytes:
    """Plain counter-mode keystream XOR; the confidentiality-only path.

    With ``nc.block_counter == 2`` this produces exactly the ciphertext that
    :func:`seal` would, minus the tag.
    """
    enc = Cipher(algorithms.AES(key.material), modes.CTR(nc.counter_block())).encryptor()
    return enc.update(bytes(data)) + enc.finalize()


# -- signatures and public-key encryption ---------------------------------

@dataclass(frozen=True)
class PrivateKey:
    signer: Ed25519PrivateKey
    decryptor: X25519PrivateKey

    def __repr__(self):
        return "PrivateKey(<redacted>)"


@dataclass(frozen=True)
class KeyPair:
    """Signing key plus an X25519 companion so one pair can sign and decrypt.

    ``public`` is the 64-byte concatenation Ed25519 || X25519.
    """

    private: PrivateKey
    public: bytes

    @classmethod
    def generate(cls, rng=None) -> "KeyPair":
        rng = rng or system_rng()
        sk = Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))
        xk = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
        public = sk.public_key().public_bytes(_RAW, _RAW_PUB) + xk.public_key().public_bytes(_RAW, _RAW_PUB)
        return cls(PrivateKey(sk, xk), public)


PUBLIC_KEY_BYTES = 64
SIGNATURE_BYTES = 64


def sign(priv: PrivateKey, msg: bytes) -> bytes:
    return priv.signer.sign(bytes(msg))


def verify(pub: bytes, msg: bytes, sig: bytes) -> bool:
    if len(pub) != PUBLIC_KEY_BYTES or len(sig) != SIGNATURE_BYTES:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(bytes(pub[:32])).verify(bytes(sig), bytes(msg))
    except (InvalidSignature, ValueError):
        return False
    return True


_PKE_INFO = b"teeaccel pke v1"


def _pke_key(shared: bytes, eph_pub: bytes, recipient: bytes) -> bytes:
    return HKDF(hashes.SHA256(), KEY_BYTES, salt=None, info=_PKE_INFO + eph_pub + recipient).derive(shared)


def pk_encrypt(pub: bytes, msg: bytes, rng=None) -> bytes:
    """Encrypt to the X25519 half of ``pub``.  Output is eph_pub || ct || tag."""
    rng = rng or system_rng()
    if len(pub) != PUBLIC_KEY_BYTES:
        raise ValueError("public key must be 64 bytes")
    recipient = bytes(pub[32:])
    eph = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
    eph_pub = eph.public_key().public_bytes(_RAW, _RAW_PUB)
    shared = eph.exchange(X25519PublicKey.from_public_bytes(recipient))
    k = _pke_key(shared, eph_pub, recipient)
    # the key is single-use, so a fixed nonce is safe
    return eph_pub + AESGCM(k).encrypt(bytes(NONCE_BYTES), bytes(msg), eph_pub + recipient)


def pk_decrypt(priv: PrivateKey, ct: bytes) -> bytes:
    if len(ct) < 32 + TAG_BYTES:
        raise DecryptError("ciphertext too short")
    eph_pub, body = bytes(ct[:32]), bytes(ct[32:])
    recipient = priv.decryptor.public_key().public_bytes(_RAW, _RAW_PUB)
    try:
        shared = priv.decryptor.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        k = _pke_key(shared, eph_pub, recipient)
        return AESGCM(k).decrypt(bytes(NONCE_BYTES), body, eph_pub + recipient)
    except (InvalidTag, ValueError):
        raise DecryptError("public-key ciphertext rejected") from None


# -- Diffie-Hellman ------------------------------------------------------

# RFC 3526 group 14; 11 is its smallest primitive root.
_MODP_2048 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)


@functools.lru_cache(maxsize=64)
def _is_probable_prime(n: int) -> bool:
    if n < 2:
        return False
    small = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)
    for q in small:
        if n % q == 0:
            return n == q
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in small:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class DhGroup:
    p: int
    g: int

    def __post_init__(self):
        if not _is_probable_prime(self.p):
            raise ValueError(f"modulus {self.p} is not prime")
        if not 1 < self.g < self.p:
            raise ValueError("generator must satisfy 1 < g < p")

    @property
    def byte_len(self) -> int:
        return (self.p.bit_length() + 7) // 8

    def check_size(self, allow_small: bool = False) -> None:
        if not allow_small and self.p.bit_length() < MIN_DH_BITS:
            raise WeakGroup(f"{self.p.bit_length()}-bit modulus below {MIN_DH_BITS}-bit minimum")


MODP_2048 = DhGroup(_MODP_2048, 11)
TOY_GROUP = DhGroup(23, 5)


def dh_secret(group: DhGroup, rng=None) -> int:
    rng = rng or system_rng()
    if group.p.bit_length() > DH_EXPONENT_BITS + 8:
        return rng.getrandbits(DH_EXPONENT_BITS) | (1 << (DH_EXPONENT_BITS - 1))
    return rng.randrange(2, group.p - 1)


def _check_secret(group: DhGroup, secret: int) -> None:
    if not 1 < secret < group.p - 1:
        raise ValueError("DH secret must satisfy 1 < secret < p - 1")


def check_share(group: DhGroup, share: int) -> None:
    if not 1 < share < group.p - 1:
        raise InvalidShare("share outside (1, p-1)")


def dh_public(group: DhGroup, secret: int) -> int:
    _check_secret(group, secret)
    return pow(group.g, secret, group.p)


def dh_shared(group: DhGroup, secret: int, peer_share: int) -> bytes:
    _check_secret(group, secret)
    check_share(group, peer_share)
    return pow(peer_share, secret, group.p).to_bytes(group.byte_len, "big")


def kdf(shared_secret: bytes, context: bytes) -> SymmetricKey:
    """HKDF-SHA256 extract-and-expand; ``context`` binds the session transcript."""
    if not shared_secret:
        raise EmptySecret("shared secret is empty")
    return SymmetricKey(HKDF(hashes.SHA256(), KEY_BYTES, salt=None, info=bytes(context)).derive(bytes(shared_secret)))


@functools.lru_cache(maxsize=256)
def subkey(key: SymmetricKey, label: bytes) -> SymmetricKey:
    """Domain-separated child key (memory vs register MACs)."""
    return kdf(key.material, b"teeaccel subkey " + label)


def digest(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(len(part).to_bytes(4, "big"))
        h.update(part)
    return h.digest()


def tags_equal(a: bytes, b: bytes) -> bool:
    return hmac.compare_digest(a, b)
