"""Keyed hashing and four deterministic distinct-count sketches.

Every sketch type (K-Minimum Values, PCSA/FM, LogLog, HyperLogLog) is an
immutable :class:`Sketch` value.  ``add`` and ``merge`` return new values and
satisfy the usual cardinality-estimator axioms: adding is idempotent and
commutative, and merge is a commutative idempotent monoid whose neutral
element is the empty sketch.

All hashes are 64 bits wide.  For register sketches the top ``p`` bits pick
a bucket and ``rho`` is the 1-based position of the leftmost 1-bit in the
remaining ``64 - p`` bits (``65 - p`` when they are all zero).
"""

from __future__ import annotations

import bisect
import enum
import hashlib
import heapq
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from sketchpriv.errors import (
    FormatError,
    InvalidElement,
    InvalidMemory,
    ParamMismatch,
    SaltMismatch,
)

HASH_BITS = 64
HASH_SPACE = 1 << HASH_BITS
MASK64 = HASH_SPACE - 1

P_MIN, P_MAX = 4, 18
KMV_K_MIN, KMV_K_MAX = 8, 0xFFFF  # k must fit the 2-byte header field
PCSA_K_MIN, PCSA_K_MAX = 2, 1 << 15
PCSA_BITMAP_BITS = 32

# PCSA correction factor phi from Flajolet & Martin (1985).
PCSA_PHI = 0.77351
# Asymptotic LogLog constant from Durand & Flajolet (2003).
LOGLOG_ALPHA_INF = 0.39701


class Algo(enum.IntEnum):
    KMV = 1
    PCSA = 2
    LOGLOG = 3
    HLL = 4


def _fingerprint(key: bytes) -> int:
    digest = hashlib.blake2b(key, digest_size=8, person=b"skp-salt-fp").digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class Salt:
    """Secret key mixed into every element hash.

    Only the 64-bit ``fingerprint`` ever travels with a sketch; the key stays
    with whoever builds sketches.
    """

    key: bytes

    def __post_init__(self):
        if not isinstance(self.key, (bytes, bytearray)):
            raise TypeError("salt key must be bytes")
        if not 16 <= len(self.key) <= 64:
            raise ValueError(f"salt key must be 16..64 bytes, got {len(self.key)}")
        object.__setattr__(self, "key", bytes(self.key))

    @property
    def fingerprint(self) -> int:
        return _fingerprint(self.key)

    @classmethod
    def generate(cls) -> "Salt":
        import secrets

        return cls(secrets.token_bytes(32))

    @classmethod
    def from_seed(cls, seed: int) -> "Salt":
        """Deterministic salt for simulations; never use for real data."""
        return cls(hashlib.blake2b(b"skp-seed-salt" + struct.pack("<Q", seed & MASK64),
                                   digest_size=32).digest())

    @classmethod
    def load(cls, path) -> "Salt":
        with open(path, "r", encoding="ascii") as fh:
            return cls(bytes.fromhex(fh.read().strip()))

    def save(self, path) -> None:
        import os

        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w", encoding="ascii") as fh:
            fh.write(self.key.hex() + "\n")


# Publicly known key used when no secret salt is configured ("unsalted" mode).
DEFAULT_SALT = Salt(b"sketchpriv/public-unsalted-key/v1")


@dataclass(frozen=True)
class HashValue:
    bits: int

    def bucket(self, p: int) -> int:
        return self.bits >> (HASH_BITS - p)

    def rho(self, p: int) -> int:
        width = HASH_BITS - p
        rest = self.bits & ((1 << width) - 1)
        if rest == 0:
            return width + 1
        return width - rest.bit_length() + 1


def hash_element(element: bytes, salt: Salt = DEFAULT_SALT) -> HashValue:
    """64-bit keyed BLAKE2b hash of ``element``."""
    if isinstance(element, str):
        element = element.encode("utf-8")
    if not element:
        raise InvalidElement("elements must be non-empty")
    digest = hashlib.blake2b(element, digest_size=8, key=salt.key).digest()
    return HashValue(int.from_bytes(digest, "big"))


def hash_many(elements: Iterable[bytes], salt: Salt = DEFAULT_SALT) -> np.ndarray:
    """Hash a batch of elements into a ``uint64`` array."""
    key = salt.key
    blake = hashlib.blake2b
    out = []
    for e in elements:
        if isinstance(e, str):
            e = e.encode("utf-8")
        if not e:
            raise InvalidElement("elements must be non-empty")
        out.append(blake(e, digest_size=8, key=key).digest())
    if not out:
        return np.zeros(0, dtype=np.uint64)
    return np.frombuffer(b"".join(out), dtype=">u8").astype(np.uint64)


def bucket_rho(hashes: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised bucket/rho decomposition of a ``uint64`` hash array."""
    h = np.asarray(hashes, dtype=np.uint64)
    width = HASH_BITS - p
    buckets = (h >> np.uint64(width)).astype(np.int64)
    rest = h & np.uint64((1 << width) - 1)
    # bit_length by binary search over shifts
    bitlen = np.zeros(h.shape, dtype=np.int64)
    x = rest.copy()
    for shift in (32, 16, 8, 4, 2, 1):
        big = x >= np.uint64(1 << shift)
        bitlen[big] += shift
        x[big] >>= np.uint64(shift)
    bitlen[x > 0] += 1
    rho = width - bitlen + 1
    return buckets, rho.astype(np.int64)


@dataclass(frozen=True)
class Sketch:
    """Immutable sketch value.

    ``param`` is ``k`` for KMV and PCSA and ``p`` for LogLog/HLL.  ``state``
    is a tuple of hashes (KMV, ascending), a tuple of 32-bit bitmaps (PCSA) or
    the register bytes (LogLog/HLL).
    """

    algo: Algo
    param: int
    state: tuple | bytes
    salt_fingerprint: int

    @property
    def num_registers(self) -> int:
        if self.algo in (Algo.LOGLOG, Algo.HLL):
            return 1 << self.param
        return self.param

    def is_empty(self) -> bool:
        if self.algo == Algo.KMV:
            return not self.state
        return not any(self.state)


def _check_params(algo: Algo, param: int) -> None:
    if algo == Algo.KMV:
        if not KMV_K_MIN <= param <= KMV_K_MAX:
            raise ValueError(f"KMV k must be in [{KMV_K_MIN}, {KMV_K_MAX}], got {param}")
    elif algo == Algo.PCSA:
        if not PCSA_K_MIN <= param <= PCSA_K_MAX or param & (param - 1):
            raise ValueError(f"PCSA k must be a power of two in [{PCSA_K_MIN}, {PCSA_K_MAX}]")
    elif algo in (Algo.LOGLOG, Algo.HLL):
        if not P_MIN <= param <= P_MAX:
            raise ValueError(f"p must be in [{P_MIN}, {P_MAX}], got {param}")
    else:
        raise ValueError(f"unknown algorithm {algo!r}")


def empty(algo: Algo | str, param: int, salt: Salt = DEFAULT_SALT) -> Sketch:
    """The empty sketch for ``algo`` with the given parameter."""
    algo = parse_algo(algo)
    _check_params(algo, param)
    if algo == Algo.KMV:
        state = ()
    elif algo == Algo.PCSA:
        state = (0,) * param
    else:
        state = bytes(1 << param)
    return Sketch(algo, param, state, salt.fingerprint)


def parse_algo(algo: Algo | str | int) -> Algo:
    if isinstance(algo, Algo):
        return algo
    if isinstance(algo, str):
        try:
            return Algo[algo.upper()]
        except KeyError:
            raise ValueError(f"unknown algorithm {algo!r}") from None
    return Algo(algo)


def _check_salt(sketch: Sketch, salt: Salt) -> None:
    if salt.fingerprint != sketch.salt_fingerprint:
        raise SaltMismatch(
            f"salt fingerprint {salt.fingerprint:#018x} does not match "
            f"sketch fingerprint {sketch.salt_fingerprint:#018x}"
        )


def _pcsa_split(bits: int, k: int) -> tuple[int, int]:
    p = k.bit_length() - 1
    hv = HashValue(bits)
    return hv.bucket(p), min(hv.rho(p), PCSA_BITMAP_BITS)


def _add_hash(sketch: Sketch, bits: int) -> Sketch:
    algo, param, state = sketch.algo, sketch.param, sketch.state
    if algo == Algo.KMV:
        if len(state) >= param and bits >= state[-1]:
            return sketch
        i = bisect.bisect_left(state, bits)
        if i < len(state) and state[i] == bits:
            return sketch
        new = state[:i] + (bits,) + state[i:]
        return Sketch(algo, param, new[:param], sketch.salt_fingerprint)
    if algo == Algo.PCSA:
        bucket, rho = _pcsa_split(bits, param)
        bit = 1 << (rho - 1)
        if state[bucket] & bit:
            return sketch
        new = list(state)
        new[bucket] |= bit
        return Sketch(algo, param, tuple(new), sketch.salt_fingerprint)
    hv = HashValue(bits)
    bucket, rho = hv.bucket(param), hv.rho(param)
    if state[bucket] >= rho:
        return sketch
    regs = bytearray(state)
    regs[bucket] = rho
    return Sketch(algo, param, bytes(regs), sketch.salt_fingerprint)


def add(sketch: Sketch, element: bytes, salt: Salt = DEFAULT_SALT) -> Sketch:
    """Return ``sketch`` with ``element`` added."""
    _check_salt(sketch, salt)
    return _add_hash(sketch, hash_element(element, salt).bits)


def add_hashes(sketch: Sketch, hashes: Sequence[int] | np.ndarray) -> Sketch:
    """Bulk add of pre-computed 64-bit hashes (no salt check).

    Equivalent to folding ``add`` over the elements that produced ``hashes``
    under the sketch's own salt.
    """
    h = np.asarray(hashes, dtype=np.uint64).ravel()
    if h.size == 0:
        return sketch
    algo, param = sketch.algo, sketch.param
    if algo == Algo.KMV:
        smallest = np.unique(h)[:param]
        merged = heapq.merge(sketch.state, (int(x) for x in smallest))
        out = []
        for v in merged:
            if out and out[-1] == v:
                continue
            out.append(v)
            if len(out) == param:
                break
        return Sketch(algo, param, tuple(out), sketch.salt_fingerprint)
    if algo == Algo.PCSA:
        p = param.bit_length() - 1
        buckets, rho = bucket_rho(h, p)
        rho = np.minimum(rho, PCSA_BITMAP_BITS)
        maps = np.array(sketch.state, dtype=np.uint64)
        np.bitwise_or.at(maps, buckets, np.left_shift(np.uint64(1), (rho - 1).astype(np.uint64)))
        return Sketch(algo, param, tuple(int(x) for x in maps), sketch.salt_fingerprint)
    buckets, rho = bucket_rho(h, param)
    regs = np.frombuffer(sketch.state, dtype=np.uint8).copy()
    np.maximum.at(regs, buckets, rho.astype(np.uint8))
    return Sketch(algo, param, regs.tobytes(), sketch.salt_fingerprint)


def add_many(sketch: Sketch, elements: Iterable[bytes], salt: Salt = DEFAULT_SALT) -> Sketch:
    _check_salt(sketch, salt)
    return add_hashes(sketch, hash_many(elements, salt))


def build(algo: Algo | str, param: int, elements: Iterable[bytes],
          salt: Salt = DEFAULT_SALT) -> Sketch:
    """Sketch of ``elements`` built from the empty sketch."""
    return add_many(empty(algo, param, salt), elements, salt)


def check_mergeable(a: Sketch, b: Sketch) -> None:
    if a.algo != b.algo or a.param != b.param:
        raise ParamMismatch(
            f"cannot merge {a.algo.name}({a.param}) with {b.algo.name}({b.param})"
        )
    if a.salt_fingerprint != b.salt_fingerprint:
        raise SaltMismatch("sketches were built with different salts")


def merge(a: Sketch, b: Sketch) -> Sketch:
    """Lossless union of two sketches of the same kind."""
    check_mergeable(a, b)
    if a.algo == Algo.KMV:
        out = []
        for v in heapq.merge(a.state, b.state):
            if out and out[-1] == v:
                continue
            out.append(v)
            if len(out) == a.param:
                break
        state = tuple(out)
    elif a.algo == Algo.PCSA:
        state = tuple(x | y for x, y in zip(a.state, b.state))
    else:
        state = bytes(map(max, a.state, b.state))
    return Sketch(a.algo, a.param, state, a.salt_fingerprint)


def merge_all(sketches: Iterable[Sketch]) -> Sketch:
    it = iter(sketches)
    try:
        acc = next(it)
    except StopIteration:
        raise ValueError("merge_all needs at least one sketch") from None
    for s in it:
        acc = merge(acc, s)
    return acc


def hll_alpha(m: int) -> float:
    if m == 16:
        return 0.673
    if m == 32:
        return 0.697
    if m == 64:
        return 0.709
    return 0.7213 / (1.0 + 1.079 / m)


def loglog_alpha(m: int) -> float:
    return LOGLOG_ALPHA_INF - (2 * math.pi ** 2 + math.log(2) ** 2) / (48.0 * m)


def estimate(sketch: Sketch) -> float:
    """Estimated number of distinct elements summarised by ``sketch``."""
    if sketch.is_empty():
        return 0.0
    algo, param, state = sketch.algo, sketch.param, sketch.state
    if algo == Algo.KMV:
        if len(state) < param:
            return float(len(state))
        # normalise the k-th smallest hash into (0, 1]
        v = (state[-1] + 1) / HASH_SPACE
        return (param - 1) / v
    if algo == Algo.PCSA:
        total = 0
        for bitmap in state:
            # index of the lowest zero bit
            total += ((~bitmap) & (bitmap + 1)).bit_length() - 1
        return param / PCSA_PHI * 2.0 ** (total / param)
    m = 1 << param
    regs = np.frombuffer(state, dtype=np.uint8)
    if algo == Algo.LOGLOG:
        return loglog_alpha(m) * m * 2.0 ** float(regs.mean())
    raw = hll_alpha(m) * m * m / float(np.sum(np.ldexp(1.0, -regs.astype(np.int64))))
    zeros = int(np.count_nonzero(regs == 0))
    if raw <= 2.5 * m and zeros:
        return m * math.log(m / zeros)  # linear counting
    return raw


def is_ignored(sketch: Sketch, element: bytes, salt: Salt = DEFAULT_SALT) -> bool:
    """True iff adding ``element`` leaves the sketch bit-for-bit unchanged."""
    return add(sketch, element, salt) == sketch


# Example-2 RSE constants and per-register memory widths (bits).
RSE_CONSTANTS = {Algo.KMV: 1.00, Algo.PCSA: 0.78, Algo.LOGLOG: 1.30, Algo.HLL: 1.04}
REGISTER_BITS = {Algo.KMV: 32, Algo.PCSA: 32, Algo.LOGLOG: 5, Algo.HLL: 6}


def theoretical_rse(algo: Algo | str, memory_bits: int) -> float:
    """Textbook relative standard error for ``memory_bits`` of sketch state."""
    algo = parse_algo(algo)
    width = REGISTER_BITS[algo]
    if memory_bits <= 0 or memory_bits % width:
        raise InvalidMemory(f"{algo.name} memory must be a positive multiple of {width} bits")
    k = memory_bits // width
    return RSE_CONSTANTS[algo] / math.sqrt(k)


# Binary format
MAGIC = b"SKP1"
VERSION = 1
_HEADER = struct.Struct("<4sBBHQI")
HEADER_SIZE = _HEADER.size


def serialize(sketch: Sketch) -> bytes:
    if sketch.algo == Algo.KMV:
        payload = struct.pack(f"<I{len(sketch.state)}Q", len(sketch.state), *sketch.state)
    elif sketch.algo == Algo.PCSA:
        payload = struct.pack(f"<{sketch.param}I", *sketch.state)
    else:
        payload = sketch.state
    header = _HEADER.pack(MAGIC, VERSION, int(sketch.algo), sketch.param,
                          sketch.salt_fingerprint, len(payload))
    return header + payload


def deserialize(data: bytes) -> Sketch:
    if len(data) < HEADER_SIZE:
        raise FormatError("truncated header")
    magic, version, algo_id, param, fp, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    try:
        algo = Algo(algo_id)
        _check_params(algo, param)
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    payload = bytes(data[HEADER_SIZE:])
    if len(payload) != length:
        raise FormatError(f"payload length {len(payload)} != declared {length}")
    if algo == Algo.KMV:
        if length < 4:
            raise FormatError("truncated KMV payload")
        (count,) = struct.unpack_from("<I", payload)
        if count > param or length != 4 + 8 * count:
            raise FormatError("bad KMV payload")
        state = struct.unpack_from(f"<{count}Q", payload, 4)
        if any(a >= b for a, b in zip(state, state[1:])):
            raise FormatError("KMV hashes not strictly ascending")
    elif algo == Algo.PCSA:
        if length != 4 * param:
            raise FormatError("bad PCSA payload")
        state = struct.unpack(f"<{param}I", payload)
    else:
        if length != 1 << param:
            raise FormatError("bad register payload")
        if max(payload) > HASH_BITS + 1 - param:
            raise FormatError("register value out of range")
        state = payload
    return Sketch(algo, param, state, fp)
