"""Deterministic splittable random-number streams.

Every Monte Carlo draw in this package comes from a stream addressed by
``(seed, path)``, where the path is a short tuple of non-negative
integers, typically ``(phase, level, sample_index, role)``.  Distinct
paths under one seed give statistically independent streams, and the
same address always reproduces the same variates, so experiments replay
bit for bit and samples can be drawn in any order.

The address is hashed with BLAKE2b into a 128-bit key for numpy's
counter-based Philox generator, so streams are derived without any
sequential state sharing.  Normal variates are produced by the inverse
CDF applied to 53-bit uniforms in (0, 1): the uniform-to-normal map is
monotone and identical on every platform.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import ConfigurationError

MAX_PATH_LENGTH = 8

_U64 = 1 << 64
_INV_2_53 = 2.0 ** -53


@dataclass(frozen=True)
class StreamKey:
    """Address of a stream: experiment seed plus a derivation path."""

    seed: int
    path: tuple[int, ...]

    def digest(self) -> bytes:
        words = np.array([self.seed, *self.path], dtype="<u8")
        return hashlib.blake2b(words.tobytes(), digest_size=16).digest()


class Stream:
    """A positioned random stream; value-like, single-consumer.

    The underlying generator is built lazily on first draw, so deriving
    streams that are never consumed is nearly free.
    """

    __slots__ = ("key", "counter", "_gen")

    def __init__(self, key: StreamKey):
        self.key = key
        self.counter = 0
        self._gen: np.random.Generator | None = None

    def __repr__(self) -> str:
        return f"Stream(seed={self.key.seed}, path={self.key.path}, counter={self.counter})"

    def _generator(self) -> np.random.Generator:
        if self._gen is None:
            philox_key = np.frombuffer(self.key.digest(), dtype="<u8")
            self._gen = np.random.Generator(np.random.Philox(key=philox_key))
        return self._gen

    def child(self, index: int) -> Stream:
        """Derive the sub-stream at ``path + (index,)``."""
        return derive_stream(self.key.seed, self.key.path + (index,))

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` uniforms on the open interval (0, 1), 53-bit resolution."""
        bits = self._generator().integers(0, 1 << 53, size=n, dtype=np.uint64)
        self.counter += n
        return (bits.astype(np.float64) + 0.5) * _INV_2_53

    def normals(self, n: int) -> np.ndarray:
        """``n`` standard normal variates via the inverse CDF."""
        return ndtri(self.uniforms(n))


def derive_stream(seed: int, path) -> Stream:
    """Return the stream addressed by ``(seed, path)``, at counter 0."""
    path = tuple(int(p) for p in path)
    if len(path) > MAX_PATH_LENGTH:
        raise ConfigurationError(
            f"stream path {path} longer than {MAX_PATH_LENGTH} components"
        )
    seed = int(seed)
    if not 0 <= seed < _U64:
        raise ConfigurationError(f"seed {seed} outside unsigned 64-bit range")
    for p in path:
        if not 0 <= p < _U64:
            raise ConfigurationError(f"path component {p} outside unsigned 64-bit range")
    return Stream(StreamKey(seed, path))


def stream_keys(seed: int, prefix, indices, suffix=()) -> np.ndarray:
    """Philox keys of the streams ``(seed, prefix + (i,) + suffix)``.

    Returns one ``(k0, k1)`` row of unsigned 64-bit words per index,
    equal to what :meth:`StreamKey.digest` yields for the same address;
    block samplers use this to stand up many per-sample generators
    without constructing the streams one by one.
    """
    prefix = tuple(int(p) for p in prefix)
    suffix = tuple(int(p) for p in suffix)
    probe = derive_stream(seed, prefix + (0,) + suffix)  # reuse address validation
    words = np.array([probe.key.seed, *probe.key.path], dtype="<u8")
    slot = 1 + len(prefix)
    indices = np.asarray(indices, dtype=np.uint64)
    keys = np.empty((indices.size, 2), dtype=np.uint64)
    for row, index in enumerate(indices):
        words[slot] = index
        digest = hashlib.blake2b(words.tobytes(), digest_size=16).digest()
        keys[row] = np.frombuffer(digest, dtype="<u8")
    return keys


def standard_normal(stream: Stream) -> float:
    """One N(0, 1) variate; advances the stream."""
    return float(stream.normals(1)[0])
