"""Key-derived channel permutations and block-wise pixel shuffling.

Everything here is a pure, deterministic function of the secret key bytes
and the stated dimensions, so two runs (or two implementations in different
languages) that follow the derivation below produce bit-identical results.

Derivation, fixed for conformance
---------------------------------
A keyed byte stream is produced by SHA-256 in counter mode::

    block_n = SHA256(b"featlock.perm.v1" || key || site_be8 || n_be8)

where ``site_be8`` and ``n_be8`` are 8-byte big-endian unsigned integers and
``n`` counts blocks from 0.  The stream is consumed as consecutive 8-byte
big-endian unsigned words.  A uniform integer in ``[0, n)`` is drawn by
rejection sampling: words ``>= (2**64 // n) * n`` are discarded, the first
surviving word is reduced ``% n``.  The permutation of ``{1..c}`` is then a
Fisher-Yates shuffle running from the last position down to the second,
swapping position ``i`` (0-based) with a uniform draw from ``[0, i]``.

``site`` defaults to 0; models that encrypt several feature maps pass the
1-based site index so each site gets an independent permutation from the
same key.
"""

from __future__ import annotations

import hashlib
import secrets
from dataclasses import dataclass, field

import numpy as np

from featlock.errors import DimensionError

_STREAM_TAG = b"featlock.perm.v1"
_WORD_BYTES = 8
_WORD_MAX = 2**64


@dataclass(frozen=True)
class SecretKey:
    """Opaque byte-string seed for all derived permutations.

    Identical bytes give identical permutations for every channel count;
    the key itself must never be written to logs, reports, or checkpoints —
    use :meth:`fingerprint` there instead.
    """

    data: bytes

    def __post_init__(self):
        if not isinstance(self.data, bytes) or len(self.data) == 0:
            raise ValueError("key must be a non-empty byte string")

    @classmethod
    def generate(cls, length: int = 16) -> "SecretKey":
        """Create a fresh key from the OS entropy source."""
        if length < 1:
            raise ValueError("key length must be >= 1")
        return cls(secrets.token_bytes(length))

    @classmethod
    def from_file(cls, path) -> "SecretKey":
        with open(path, "rb") as fh:
            return cls(fh.read())

    def to_file(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.data)

    def fingerprint(self) -> str:
        """SHA-256 hex digest of the key bytes; safe to store and print."""
        return hashlib.sha256(self.data).hexdigest()

    def __repr__(self) -> str:  # never echo key bytes
        return f"SecretKey(fingerprint={self.fingerprint()[:12]}...)"


@dataclass(frozen=True)
class PermutationVector:
    """A bijection ``alpha`` on channel indices ``{1..c}`` (1-based).

    Applying it to a feature map ``x`` yields ``x'`` with
    ``x'[i] = x[alpha[i]]`` per channel, so ``alpha`` says where each output
    channel reads from.
    """

    alpha: tuple[int, ...]
    c: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "c", len(self.alpha))
        if self.c == 0:
            raise DimensionError("permutation must have at least one element")
        if sorted(self.alpha) != list(range(1, self.c + 1)):
            raise ValueError(f"alpha is not a bijection on 1..{self.c}: {self.alpha}")

    @property
    def indices(self) -> np.ndarray:
        """0-based gather indices (read-only view convenience)."""
        return np.asarray(self.alpha, dtype=np.int64) - 1

    def is_identity(self) -> bool:
        return all(a == i + 1 for i, a in enumerate(self.alpha))

    @classmethod
    def identity(cls, c: int) -> "PermutationVector":
        return cls(tuple(range(1, c + 1)))


class _KeyStream:
    """Counter-mode SHA-256 byte stream over (tag, key, site)."""

    def __init__(self, key: SecretKey, site: int):
        self._prefix = _STREAM_TAG + key.data + int(site).to_bytes(8, "big")
        self._counter = 0
        self._buf = b""

    def _refill(self) -> None:
        self._buf += hashlib.sha256(self._prefix + self._counter.to_bytes(8, "big")).digest()
        self._counter += 1

    def next_word(self) -> int:
        while len(self._buf) < _WORD_BYTES:
            self._refill()
        word = int.from_bytes(self._buf[:_WORD_BYTES], "big")
        self._buf = self._buf[_WORD_BYTES:]
        return word

    def uniform(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling."""
        limit = (_WORD_MAX // n) * n
        while True:
            word = self.next_word()
            if word < limit:
                return word % n


def derive_permutation(key: SecretKey, c: int, site: int = 0) -> PermutationVector:
    """Derive the keyed channel permutation for a ``c``-channel feature map.

    Deterministic in ``(key, c, site)``; repeated calls are identical.
    ``site=0`` is the base derivation (also used for image encryption);
    feature-map sites pass their 1-based index.
    """
    if c < 1:
        raise DimensionError(f"channel count must be >= 1, got {c}")
    if site < 0:
        raise ValueError(f"site index must be >= 0, got {site}")
    stream = _KeyStream(key, site)
    alpha = list(range(1, c + 1))
    for i in range(c - 1, 0, -1):
        j = stream.uniform(i + 1)
        alpha[i], alpha[j] = alpha[j], alpha[i]
    return PermutationVector(tuple(alpha))


def apply_permutation(x: np.ndarray, p: PermutationVector) -> np.ndarray:
    """Permute the channel axis of a ``(c, h, w)`` feature map.

    Returns ``x'`` with ``x'[i, j, k] = x[alpha[i], j, k]``; spatial slices
    move intact, values are never modified.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"expected a (c, h, w) feature map, got shape {x.shape}")
    if x.shape[0] != p.c:
        raise DimensionError(f"feature map has {x.shape[0]} channels but permutation expects {p.c}")
    return x[p.indices]


def invert_permutation(p: PermutationVector) -> PermutationVector:
    """Permutation ``q`` with ``apply(apply(x, p), q) == x`` exactly."""
    inv = np.empty(p.c, dtype=np.int64)
    inv[p.indices] = np.arange(1, p.c + 1)
    return PermutationVector(tuple(int(v) for v in inv))


def _split_blocks(img: np.ndarray, block_size: int) -> tuple[np.ndarray, tuple[int, int, int]]:
    img = np.asarray(img)
    if img.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) image, got shape {img.shape}")
    ch, height, width = img.shape
    m = int(block_size)
    if m < 1:
        raise DimensionError(f"block size must be >= 1, got {block_size}")
    if height % m != 0 or width % m != 0:
        raise DimensionError(
            f"image dims ({height}, {width}) are not divisible by block size {m}; "
            "resize the image, padding is not applied implicitly"
        )
    nh, nw = height // m, width // m
    # (C,H,W) -> (nh, nw, C, M, M): each block keeps channel-slowest,
    # row-major layout so flattening gives index ((ch*M)+row)*M+col.
    blocks = img.reshape(ch, nh, m, nw, m).transpose(1, 3, 0, 2, 4)
    blocks = blocks.reshape(nh, nw, ch * m * m)
    return blocks, (ch, nh, nw)


def _join_blocks(blocks: np.ndarray, dims: tuple[int, int, int], block_size: int) -> np.ndarray:
    ch, nh, nw = dims
    m = block_size
    out = blocks.reshape(nh, nw, ch, m, m).transpose(2, 0, 3, 1, 4)
    return out.reshape(ch, nh * m, nw * m)


def encrypt_image(img: np.ndarray, key: SecretKey, block_size: int) -> np.ndarray:
    """Block-wise pixel shuffling (the input-encryption comparison baseline).

    The image is split into non-overlapping ``block_size x block_size``
    blocks; within every block the ``block_size**2 * C`` elements are
    permuted by the single permutation derived from
    ``(key, block_size**2 * C)``.  Block size 1 therefore shuffles the C
    per-pixel channel values with one shared permutation.  Requires H and W
    divisible by ``block_size``.
    """
    blocks, dims = _split_blocks(img, block_size)
    p = derive_permutation(key, blocks.shape[-1])
    return _join_blocks(blocks[..., p.indices], dims, int(block_size))


def decrypt_image(img: np.ndarray, key: SecretKey, block_size: int) -> np.ndarray:
    """Exact inverse of :func:`encrypt_image` for the same key and block size."""
    blocks, dims = _split_blocks(img, block_size)
    p = invert_permutation(derive_permutation(key, blocks.shape[-1]))
    return _join_blocks(blocks[..., p.indices], dims, int(block_size))


def dump_golden_vectors(path, key: SecretKey, channel_counts) -> None:
    """Write conformance vectors: one line ``c alpha_1 ... alpha_c`` per count."""
    with open(path, "w") as fh:
        for c in channel_counts:
            p = derive_permutation(key, c)
            fh.write(" ".join(str(v) for v in (c, *p.alpha)) + "\n")


def load_golden_vectors(path) -> dict[int, PermutationVector]:
    """Read a golden-vector file produced by :func:`dump_golden_vectors`."""
    vectors = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            c, alpha = int(parts[0]), tuple(int(v) for v in parts[1:])
            if len(alpha) != c:
                raise ValueError(f"golden line for c={c} carries {len(alpha)} entries")
            vectors[c] = PermutationVector(alpha)
    return vectors
