"""Independent reference implementations used only by the tests.

None of these share code with the package: GCM is rebuilt from a bare AES
block function and a bit-serial GF(2^128) multiply, convolution is a direct
loop nest, modular exponentiation is repeated multiplication.
"""

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
import numpy as np

R = 0xE1 << 120


def aes_block(key: bytes, block: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return enc.update(block) + enc.finalize()


def gf_mult(x: int, y: int) -> int:
    """GF(2^128) product in GCM bit order (bit 0 is the MSB of the block)."""
    z, v = 0, y
    for i in range(127, -1, -1):
        if (x >> i) & 1:
            z ^= v
        v = (v >> 1) ^ R if v & 1 else v >> 1
    return z


def _pad16(b: bytes) -> bytes:
    return b + bytes(-len(b) % 16)


def ghash(h: bytes, aad: bytes, ct: bytes) -> bytes:
    hk = int.from_bytes(h, "big")
    data = _pad16(aad) + _pad16(ct) + (8 * len(aad)).to_bytes(8, "big") + (8 * len(ct)).to_bytes(8, "big")
    y = 0
    for i in range(0, len(data), 16):
        y = gf_mult(y ^ int.from_bytes(data[i:i + 16], "big"), hk)
    return y.to_bytes(16, "big")


def ctr_keystream(key: bytes, nonce12: bytes, counter: int, n: int) -> bytes:
    out = b""
    while len(out) < n:
        out += aes_block(key, nonce12 + counter.to_bytes(4, "big"))
        counter += 1
    return out[:n]


def gcm_seal(key: bytes, nonce12: bytes, aad: bytes, pt: bytes) -> tuple[bytes, bytes]:
    h = aes_block(key, bytes(16))
    ct = bytes(a ^ b for a, b in zip(pt, ctr_keystream(key, nonce12, 2, len(pt))))
    s = ghash(h, aad, ct)
    j0 = aes_block(key, nonce12 + (1).to_bytes(4, "big"))
    return ct, bytes(a ^ b for a, b in zip(s, j0))


def direct_conv(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """int64 accumulators of a plain sliding-window convolution; x (C,H,W), w (O,C,kh,kw)."""
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x.astype(np.int64), ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo), np.int64)
    w64 = w.astype(np.int64)
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, i, j] = (w64 * patch).sum(axis=(1, 2, 3))
    return out


def requantize(acc: np.ndarray, shift: int) -> np.ndarray:
    return np.clip(acc >> shift, -128, 127).astype(np.int8)


def modexp(g: int, e: int, p: int) -> int:
    r = 1
    for _ in range(e):
        r = r * g % p
    return r


def is_prime(n: int) -> bool:
    return n > 1 and all(n % d for d in range(2, int(n ** 0.5) + 1))


def primitive_roots(p: int) -> list[int]:
    return [g for g in range(2, p) if len({modexp(g, e, p) for e in range(1, p)}) == p - 1]
