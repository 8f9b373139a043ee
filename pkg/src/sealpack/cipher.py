"""AES-128-CBC primitives used by the packer, the unpack protocol, and
capsule key wrapping.

Thin wrappers over the OpenSSL-backed ``cryptography`` package keep this a
plain block-mode primitive: no padding scheme and no authentication tag.
Callers pad to a block multiple themselves (the packer pads with zeros into
section slack) and integrity failures surface downstream as garbage
plaintext, detectable through the payload sentinel in the simulator.
"""

from __future__ import annotations

from dataclasses import dataclass

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import LengthNotBlockMultiple

BLOCK_SIZE = 16
KEY_SIZE = 16


@dataclass(frozen=True)
class SymmetricKey:
    key_bytes: bytes

    def __post_init__(self):
        if len(self.key_bytes) != KEY_SIZE:
            raise ValueError(f"key must be {KEY_SIZE} bytes, got {len(self.key_bytes)}")


@dataclass(frozen=True)
class Iv:
    iv_bytes: bytes

    def __post_init__(self):
        if len(self.iv_bytes) != BLOCK_SIZE:
            raise ValueError(f"IV must be {BLOCK_SIZE} bytes, got {len(self.iv_bytes)}")


def _check_block_multiple(data: bytes) -> None:
    if len(data) % BLOCK_SIZE != 0:
        raise LengthNotBlockMultiple(
            f"length {len(data)} is not a multiple of {BLOCK_SIZE}"
        )


def encrypt_cbc(key: SymmetricKey, iv: Iv, plaintext: bytes) -> bytes:
    """Encrypt a block-multiple plaintext; ciphertext has the same length."""
    _check_block_multiple(plaintext)
    enc = Cipher(algorithms.AES(key.key_bytes), modes.CBC(iv.iv_bytes)).encryptor()
    return enc.update(plaintext) + enc.finalize()


def decrypt_cbc(key: SymmetricKey, iv: Iv, ciphertext: bytes) -> bytes:
    """Exact inverse of :func:`encrypt_cbc`."""
    _check_block_multiple(ciphertext)
    dec = Cipher(algorithms.AES(key.key_bytes), modes.CBC(iv.iv_bytes)).decryptor()
    return dec.update(ciphertext) + dec.finalize()
