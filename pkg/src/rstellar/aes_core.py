"""AES-256 with full round-state capture.

The scalar path (:func:`encrypt`) is the bit-exact reference; the batch path
(:func:`encrypt_batch`) runs the same rounds over an ``(N, 16)`` uint8 array
and is what the trace generators use.  Bytes are in FIPS-197 column-major
order: state index ``i`` is row ``i % 4``, column ``i // 4``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _xtime(a: int) -> int:
    a <<= 1
    if a & 0x100:
        a ^= 0x11B
    return a & 0xFF


def _gmul(a: int, b: int) -> int:
    out = 0
    while b:
        if b & 1:
            out ^= a
        a = _xtime(a)
        b >>= 1
    return out


def _build_sbox() -> np.ndarray:
    inv = [0] * 256
    for x in range(1, 256):
        for y in range(1, 256):
            if _gmul(x, y) == 1:
                inv[x] = y
                break
    sbox = np.zeros(256, dtype=np.uint8)
    for x in range(256):
        b = inv[x]
        s = b
        for shift in range(1, 5):
            s ^= ((b << shift) | (b >> (8 - shift))) & 0xFF
        sbox[x] = s ^ 0x63
    return sbox


SBOX = _build_sbox()
INV_SBOX = np.zeros(256, dtype=np.uint8)
INV_SBOX[SBOX] = np.arange(256, dtype=np.uint8)

XTIME = np.array([_xtime(a) for a in range(256)], dtype=np.uint8)
HW8 = np.array([bin(a).count("1") for a in range(256)], dtype=np.uint8)

# out[i] = in[SHIFT_ROWS[i]]
SHIFT_ROWS = np.array([(i % 4) + 4 * ((i // 4 + i % 4) % 4) for i in range(16)])
INV_SHIFT_ROWS = np.argsort(SHIFT_ROWS)

N_ROUNDS = 14
RCON = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40]


@dataclass(frozen=True)
class AesStateTrace:
    """Register contents of one encryption.

    ``round_states[0]`` is the initial AddRoundKey output, ``round_states[r]``
    the state after round ``r``; the last entry is the ciphertext.
    """

    round_states: tuple[bytes, ...]
    plaintext: bytes
    ciphertext: bytes

    def __post_init__(self):
        if len(self.round_states) != N_ROUNDS + 1:
            raise ValueError("expected 15 round states")
        if self.round_states[-1] != self.ciphertext:
            raise ValueError("last round state must equal the ciphertext")

    def round_hd(self) -> list[int]:
        """Hamming distance of each register transition (14 values)."""
        return [
            sum(bin(a ^ b).count("1") for a, b in zip(s0, s1))
            for s0, s1 in zip(self.round_states[:-1], self.round_states[1:])
        ]


def _check_key(key: bytes) -> bytes:
    key = bytes(key)
    if len(key) != 32:
        raise ValueError(f"AES-256 key must be 32 bytes, got {len(key)}")
    return key


def _check_block(block: bytes, what: str = "plaintext") -> bytes:
    block = bytes(block)
    if len(block) != 16:
        raise ValueError(f"{what} must be 16 bytes, got {len(block)}")
    return block


def expand_key(key: bytes) -> np.ndarray:
    """Round keys as a ``(15, 16)`` uint8 array."""
    key = _check_key(key)
    words = [list(key[4 * i:4 * i + 4]) for i in range(8)]
    for i in range(8, 60):
        t = list(words[i - 1])
        if i % 8 == 0:
            t = t[1:] + t[:1]
            t = [int(SBOX[b]) for b in t]
            t[0] ^= RCON[i // 8 - 1]
        elif i % 8 == 4:
            t = [int(SBOX[b]) for b in t]
        words.append([a ^ b for a, b in zip(words[i - 8], t)])
    return np.array(words, dtype=np.uint8).reshape(15, 16)


def last_round_key(key: bytes) -> bytes:
    return expand_key(key)[N_ROUNDS].tobytes()


def _mix_columns(s: np.ndarray) -> np.ndarray:
    # s has shape (..., 16); columns are s[..., 4c:4c+4]
    a = s.reshape(s.shape[:-1] + (4, 4))
    a0, a1, a2, a3 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    t = a0 ^ a1 ^ a2 ^ a3
    out = np.empty_like(a)
    out[..., 0] = a0 ^ t ^ XTIME[a0 ^ a1]
    out[..., 1] = a1 ^ t ^ XTIME[a1 ^ a2]
    out[..., 2] = a2 ^ t ^ XTIME[a2 ^ a3]
    out[..., 3] = a3 ^ t ^ XTIME[a3 ^ a0]
    return out.reshape(s.shape)


def encrypt_batch(key: bytes, plaintexts: np.ndarray, round_keys: np.ndarray | None = None) -> np.ndarray:
    """Encrypt ``(N, 16)`` plaintexts; returns round states of shape ``(N, 15, 16)``."""
    pts = np.asarray(plaintexts, dtype=np.uint8)
    if pts.ndim != 2 or pts.shape[1] != 16:
        raise ValueError("plaintexts must have shape (N, 16)")
    rk = expand_key(key) if round_keys is None else round_keys
    states = np.empty((pts.shape[0], N_ROUNDS + 1, 16), dtype=np.uint8)
    s = pts ^ rk[0]
    states[:, 0] = s
    for r in range(1, N_ROUNDS + 1):
        s = SBOX[s][:, SHIFT_ROWS]
        if r != N_ROUNDS:
            s = _mix_columns(s)
        s = s ^ rk[r]
        states[:, r] = s
    return states


def encrypt(key: bytes, plaintext: bytes) -> AesStateTrace:
    pt = _check_block(plaintext)
    states = encrypt_batch(key, np.frombuffer(pt, dtype=np.uint8)[None, :])[0]
    rs = tuple(row.tobytes() for row in states)
    return AesStateTrace(round_states=rs, plaintext=pt, ciphertext=rs[-1])


def round_hd_batch(states: np.ndarray) -> np.ndarray:
    """Per-transition Hamming distances, ``(N, 15, 16) -> (N, 14)``."""
    diff = states[:, 1:, :] ^ states[:, :-1, :]
    return HW8[diff].sum(axis=-1, dtype=np.int64)


def last_round_hd_hypothesis(ct: bytes, byte_index: int, key_guess: int) -> int:
    """HD of the register byte that ends up holding ``ct[SHIFT_ROWS[byte_index]]``.

    Guessing round-14 key byte ``k`` at position ``i`` inverts the final
    SubBytes/ShiftRows to the round-13 byte; that byte sits at register
    position ``SHIFT_ROWS[i]`` and is overwritten by the ciphertext byte there.
    """
    if not 0 <= byte_index < 16:
        raise ValueError("byte_index must be in 0..15")
    if not 0 <= key_guess < 256:
        raise ValueError("key_guess must be in 0..255")
    ct = _check_block(ct, "ciphertext")
    before = INV_SBOX[ct[byte_index] ^ key_guess]
    after = ct[SHIFT_ROWS[byte_index]]
    return int(HW8[before ^ after])


def last_round_hd_table(ciphertexts: np.ndarray, byte_index: int) -> np.ndarray:
    """All 256 hypotheses for a batch of ciphertexts, shape ``(N, 256)``."""
    if not 0 <= byte_index < 16:
        raise ValueError("byte_index must be in 0..15")
    cts = np.asarray(ciphertexts, dtype=np.uint8)
    guesses = np.arange(256, dtype=np.uint8)
    before = INV_SBOX[cts[:, byte_index, None] ^ guesses[None, :]]
    after = cts[:, SHIFT_ROWS[byte_index], None]
    return HW8[before ^ after]
