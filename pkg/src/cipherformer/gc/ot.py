"""Oblivious transfer: DH base OT plus IKNP extension, semi-honest.

The label transfers for evaluator inputs run in two phases so the heavy part
can be shipped before the online phase starts:

  * offline -- 128 base OTs (public-key) seed an IKNP extension producing M
    *random* OTs: the receiver ends with (b_i, pad_{b_i}), the sender with
    both pads, for uniformly random b_i.
  * online -- Beaver derandomization: the receiver reveals d_i = c_i ^ b_i
    (one bit per OT) and the sender returns both messages masked so that
    exactly the chosen one is recoverable.  Cost per OT: 1 bit up, 32 bytes
    down, no public-key work.

Base OT is the classic DH construction: sender publishes A = g^a; for choice
c the receiver sends B = g^b * A^c; keys are hashes of A^b resp. (B/A)^a.
Groups are the published 768-bit and 2048-bit MODP primes (generator 2) --
the small one for toy runs, the big one when a standard profile is asked
for.  Pads and hashes are 128-bit, matching wire-label width.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from ..errors import ProtocolError
from .garble import hash_labels

LAMBDA = 128

# RFC 2409 Oakley group 1 (768-bit) and RFC 3526 group 14 (2048-bit), g = 2.
_MODP_768 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A63A3620FFFFFFFFFFFFFFFF", 16)
_MODP_2048 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF", 16)


def _group(profile: str) -> tuple[int, int, int]:
    """(modulus, generator, exponent bytes).  Exponents are short: Pollard
    lambda on an e-bit exponent costs ~2^(e/2), so 2x the pad width is
    enough, and modexp time scales with exponent length."""
    if profile == "toy":
        return _MODP_768, 2, 24
    if profile == "standard":
        return _MODP_2048, 2, 32
    raise ProtocolError(f"unknown OT group profile {profile!r}")


def _hash_point(x: int, tag: int) -> np.ndarray:
    h = hashlib.sha256(tag.to_bytes(4, "little")
                       + x.to_bytes((x.bit_length() + 7) // 8 or 1, "little")).digest()
    return np.frombuffer(h[:16], dtype="<u8").astype(np.uint64)


class BaseOtSender:
    def __init__(self, rng: np.random.Generator, profile: str = "toy"):
        self._p, self._g, eb = _group(profile)
        self._a = int.from_bytes(rng.bytes(eb), "little") | (1 << (8 * eb))
        self.msg_a = pow(self._g, self._a, self._p)

    def keys(self, msgs_b: list[int]) -> tuple[np.ndarray, np.ndarray]:
        """Derive both keys per OT from the receiver's points: (k0, k1),
        each (count, 2) uint64."""
        a_pub = pow(self.msg_a, self._a, self._p)  # A^a, to divide out
        inv = pow(a_pub, -1, self._p)
        k0 = np.empty((len(msgs_b), 2), dtype=np.uint64)
        k1 = np.empty_like(k0)
        for i, B in enumerate(msgs_b):
            if not 1 < B < self._p:
                raise ProtocolError("base OT point out of range")
            s = pow(B, self._a, self._p)
            k0[i] = _hash_point(s, i)
            k1[i] = _hash_point(s * inv % self._p, i)
        return k0, k1


class BaseOtReceiver:
    def __init__(self, rng: np.random.Generator, choices: np.ndarray,
                 msg_a: int, profile: str = "toy"):
        self._p, self._g, eb = _group(profile)
        if not 1 < msg_a < self._p:
            raise ProtocolError("base OT point out of range")
        self.choices = np.asarray(choices, dtype=np.uint8)
        self._bs = [int.from_bytes(rng.bytes(eb), "little") | (1 << (8 * eb))
                    for _ in range(self.choices.size)]
        self.msgs_b = [pow(self._g, b, self._p) * (msg_a if c else 1) % self._p
                       for b, c in zip(self._bs, self.choices)]
        self._A = msg_a

    def keys(self) -> np.ndarray:
        out = np.empty((self.choices.size, 2), dtype=np.uint64)
        for i, b in enumerate(self._bs):
            out[i] = _hash_point(pow(self._A, b, self._p), i)
        return out


def _prg(seed16: bytes, nbytes: int) -> bytes:
    cipher = Cipher(algorithms.AES(seed16), modes.CTR(b"\x00" * 16))
    return cipher.encryptor().update(b"\x00" * nbytes)


def _key_bytes(k: np.ndarray) -> bytes:
    return np.ascontiguousarray(k, dtype="<u8").tobytes()


def _row_pads(q: np.ndarray) -> np.ndarray:
    """Hash (M, 2) uint64 rows with their index as tweak."""
    M = q.shape[0]
    tw = np.zeros((M, 2), dtype=np.uint64)
    tw[:, 1] = np.arange(M, dtype=np.uint64)
    tw[:, 0] = np.uint64(1) << np.uint64(60)
    return hash_labels(q, tw)


@dataclass
class RandomOtBatch:
    """Receiver side of M random OTs after extension."""

    b: np.ndarray          # (M,) uint8 random choice bits
    pads: np.ndarray       # (M, 2) uint64: pad for the chosen side
    _used: int = 0

    def derand_request(self, c_bits: np.ndarray) -> np.ndarray:
        c = np.asarray(c_bits, dtype=np.uint8).ravel()
        lo = self._used
        if lo + c.size > self.b.size:
            raise ProtocolError("random OT supply exhausted")
        return c ^ self.b[lo:lo + c.size]

    def derand_finish(self, c_bits: np.ndarray, f: np.ndarray) -> np.ndarray:
        """f is (count, 2, 2): both masked messages; returns chosen (count, 2)."""
        c = np.asarray(c_bits, dtype=np.uint8).ravel()
        lo = self._used
        self._used = lo + c.size
        pads = self.pads[lo:lo + c.size]
        chosen = f[np.arange(c.size), c]
        return chosen ^ pads


@dataclass
class RandomOtSenderBatch:
    """Sender side: both pads for M random OTs."""

    y0: np.ndarray         # (M, 2)
    y1: np.ndarray
    _used: int = 0

    def derand_respond(self, d_bits: np.ndarray, m0: np.ndarray,
                       m1: np.ndarray) -> np.ndarray:
        """Returns (count, 2, 2): entry j of each row masked with y_{j^d}."""
        d = np.asarray(d_bits, dtype=np.uint8).ravel()
        lo = self._used
        if lo + d.size > self.y0.shape[0]:
            raise ProtocolError("random OT supply exhausted")
        self._used = lo + d.size
        y0 = self.y0[lo:lo + d.size]
        y1 = self.y1[lo:lo + d.size]
        d_on = d[:, None].astype(bool)
        f = np.empty((d.size, 2, 2), dtype=np.uint64)
        f[:, 0] = np.asarray(m0, dtype=np.uint64) ^ np.where(d_on, y1, y0)
        f[:, 1] = np.asarray(m1, dtype=np.uint64) ^ np.where(d_on, y0, y1)
        return f


class OtExtReceiver:
    """IKNP receiver (will obtain the extended OTs).  Acts as *sender* in the
    base OTs: samples seed pairs, then expands and sends the correction
    matrix."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._seeds0 = [rng.bytes(16) for _ in range(LAMBDA)]
        self._seeds1 = [rng.bytes(16) for _ in range(LAMBDA)]

    def seed_messages(self, k0: np.ndarray, k1: np.ndarray) -> np.ndarray:
        """Encrypt the seed pairs under the base-OT keys: (LAMBDA, 2, 2)."""
        out = np.empty((LAMBDA, 2, 2), dtype=np.uint64)
        for j in range(LAMBDA):
            s0 = np.frombuffer(self._seeds0[j], dtype="<u8").astype(np.uint64)
            s1 = np.frombuffer(self._seeds1[j], dtype="<u8").astype(np.uint64)
            out[j, 0] = s0 ^ k0[j]
            out[j, 1] = s1 ^ k1[j]
        return out

    def extend(self, M: int) -> tuple[np.ndarray, RandomOtBatch]:
        """Pick random choice bits, build the correction matrix to send."""
        Mb = -(-M // 8) * 8
        b = self.rng.integers(0, 2, Mb, dtype=np.uint8)
        t_cols = np.empty((LAMBDA, Mb // 8), dtype=np.uint8)
        u_cols = np.empty_like(t_cols)
        r_packed = np.packbits(b)
        for j in range(LAMBDA):
            t = np.frombuffer(_prg(self._seeds0[j], Mb // 8), dtype=np.uint8)
            t1 = np.frombuffer(_prg(self._seeds1[j], Mb // 8), dtype=np.uint8)
            t_cols[j] = t
            u_cols[j] = t ^ t1 ^ r_packed
        # rows of T, as 128-bit labels
        tmat = np.unpackbits(t_cols, axis=1)[:, :Mb]          # (LAMBDA, Mb)
        rows = np.packbits(tmat.T, axis=1)                     # (Mb, 16) bytes
        q = np.frombuffer(rows.tobytes(), dtype="<u8").astype(np.uint64).reshape(Mb, 2)
        pads = _row_pads(q)
        return u_cols, RandomOtBatch(b[:M], pads[:M])


class OtExtSender:
    """IKNP sender: base-OT receiver with secret s, then pad derivation."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.s_bits = rng.integers(0, 2, LAMBDA, dtype=np.uint8)

    def recover_seeds(self, seed_msgs: np.ndarray, my_keys: np.ndarray):
        self._seeds = []
        for j in range(LAMBDA):
            enc = seed_msgs[j, int(self.s_bits[j])]
            self._seeds.append(_key_bytes(enc ^ my_keys[j]))

    def receive_extension(self, u_cols: np.ndarray, M: int) -> RandomOtSenderBatch:
        Mb = u_cols.shape[1] * 8
        q_cols = np.empty((LAMBDA, Mb // 8), dtype=np.uint8)
        for j in range(LAMBDA):
            col = np.frombuffer(_prg(self._seeds[j], Mb // 8), dtype=np.uint8)
            if self.s_bits[j]:
                col = col ^ u_cols[j]
            q_cols[j] = col
        qmat = np.unpackbits(q_cols, axis=1)[:, :Mb]
        rows = np.packbits(qmat.T, axis=1)
        q = np.frombuffer(rows.tobytes(), dtype="<u8").astype(np.uint64).reshape(Mb, 2)
        s_row = np.packbits(self.s_bits)
        s128 = np.frombuffer(s_row.tobytes(), dtype="<u8").astype(np.uint64)
        y0 = _row_pads(q)
        y1 = _row_pads(q ^ s128[None, :])
        return RandomOtSenderBatch(y0[:M], y1[:M])
