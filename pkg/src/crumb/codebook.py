"""The trainable codebook of memory blocks.

A feature map of shape (s, w, h) is cut along its channel axis into s/d
slabs; every spatial position of a slab is a length-d chunk.  Each chunk is
replaced by the block (codebook row) with the largest dot product against
the unit-normalized block, and only the chosen row indices are kept.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor_nn import ShapeError, Tensor

INIT_STRATEGIES = ("matched_sparse", "dense_matched", "normal", "uniform")
MATCHED_ZERO_FRACTION = 0.64


@dataclass(frozen=True)
class Geometry:
    """Feature-map extents (s, w, h) and the chunk length d."""

    s: int
    w: int
    h: int
    d: int

    def __post_init__(self):
        if min(self.s, self.w, self.h, self.d) < 1:
            raise ValueError("geometry extents must be positive")
        if self.s % self.d:
            raise ValueError(f"chunk length {self.d} does not divide {self.s} channels")

    @property
    def slabs(self):
        return self.s // self.d

    @property
    def index_count(self):
        return self.slabs * self.w * self.h

    @property
    def shape(self):
        return (self.s, self.w, self.h)

    @classmethod
    def for_features(cls, feature_shape, d):
        s, w, h = feature_shape
        return cls(s, w, h, d)


class Codebook:
    """n x d matrix of memory blocks, held as a trainable :class:`Tensor`."""

    def __init__(self, blocks, frozen=False):
        blocks = np.asarray(blocks)
        if blocks.ndim != 2 or blocks.shape[0] < 1 or blocks.shape[1] < 1:
            raise ValueError("codebook must be an n x d matrix with n, d >= 1")
        dtype = np.float64 if blocks.dtype == np.float64 else np.float32
        self.blocks = Tensor(blocks, frozen=frozen, dtype=dtype)
        self.check_rows()

    @property
    def n(self):
        return self.blocks.shape[0]

    @property
    def d(self):
        return self.blocks.shape[1]

    @property
    def frozen(self):
        return self.blocks.frozen

    @frozen.setter
    def frozen(self, value):
        self.blocks.frozen = bool(value)

    @property
    def index_dtype(self):
        return np.uint8 if self.n <= 256 else np.uint16

    def check_rows(self):
        zero = ~np.any(self.blocks.data != 0, axis=1)
        if zero.any():
            raise ValueError(f"codebook rows {np.flatnonzero(zero).tolist()} are all zero")

    def copy(self):
        return Codebook(self.blocks.data.copy(), frozen=self.frozen)


@dataclass
class IndexMap:
    """Selected block index per (slab, x, y) for one feature map."""

    indices: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        g = self.geometry
        if self.indices.shape != (g.slabs, g.w, g.h):
            raise ShapeError(f"index grid {self.indices.shape} does not match geometry {g}")
        if self.indices.dtype not in (np.uint8, np.uint16):
            raise TypeError("indices must be stored as uint8 or uint16")

    @property
    def index_width(self):
        return self.indices.dtype.itemsize

    @property
    def nbytes(self):
        return self.indices.size * self.index_width


def similarity(chunk, book):
    """Dot product of ``chunk`` with every unit-normalized block (float64)."""
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.shape != (book.d,):
        raise ShapeError(f"chunk must have length {book.d}")
    book.check_rows()
    unit = kernels.normalized_blocks(book.blocks.data)
    acc = chunk[0] * unit[:, 0]
    for j in range(1, book.d):
        acc = acc + chunk[j] * unit[:, j]
    return acc


def _to_chunks(z, geom):
    # (N, s, w, h) -> (N * slabs * w * h, d), ordered (N, slab, x, y)
    n = z.shape[0]
    return z.reshape(n, geom.slabs, geom.d, geom.w, geom.h).transpose(0, 1, 3, 4, 2).reshape(-1, geom.d)


def _from_chunks(rows, n, geom):
    return np.ascontiguousarray(
        rows.reshape(n, geom.slabs, geom.w, geom.h, geom.d).transpose(0, 1, 4, 2, 3)
    ).reshape(n, geom.s, geom.w, geom.h)


def _check(book, geom):
    if book.d != geom.d:
        raise ShapeError(f"codebook block length {book.d} != geometry chunk length {geom.d}")


def quantize_batch(z, book, geom):
    """Quantize a batch (N, s, w, h); returns (indices (N, slabs, w, h), z_tilde)."""
    _check(book, geom)
    if z.ndim != 4 or z.shape[1:] != geom.shape:
        raise ShapeError(f"feature batch {z.shape} does not match geometry {geom.shape}")
    book.check_rows()
    idx = kernels.nearest_blocks(_to_chunks(z, geom), book.blocks.data)
    n = z.shape[0]
    z_tilde = _from_chunks(book.blocks.data[idx], n, geom)
    return idx.reshape(n, geom.slabs, geom.w, geom.h), z_tilde


def quantize(z, book, geom):
    """Quantize one feature map (s, w, h); returns (IndexMap, z_tilde)."""
    idx, z_tilde = quantize_batch(z[None], book, geom)
    return IndexMap(idx[0].astype(book.index_dtype), geom), z_tilde[0]


def reconstruct_batch(indices, book, geom):
    """Concatenate the blocks named by ``indices`` (N, slabs, w, h) into (N, s, w, h)."""
    _check(book, geom)
    indices = np.asarray(indices)
    if indices.size and indices.max() >= book.n:
        raise IndexError(f"block index {int(indices.max())} >= codebook size {book.n}")
    return _from_chunks(book.blocks.data[indices.reshape(-1)], indices.shape[0], geom)


def reconstruct(m, book):
    return reconstruct_batch(m.indices[None], book, m.geometry)[0]


def route_gradients(indices, grad_z_tilde, book, geom):
    """Accumulate d L / d z_tilde into the rows that produced each chunk.

    The selection itself is treated as constant, so nothing flows back to
    the feature map that was quantized.
    """
    indices = np.asarray(indices)
    if indices.ndim == 3:
        indices, grad_z_tilde = indices[None], grad_z_tilde[None]
    if grad_z_tilde.shape[1:] != geom.shape or grad_z_tilde.shape[0] != indices.shape[0]:
        raise ShapeError("gradient does not match the index grid geometry")
    t = book.blocks
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    rows = _to_chunks(grad_z_tilde.astype(t.data.dtype, copy=False), geom)
    kernels.scatter_add_rows(t.grad, indices.reshape(-1).astype(np.int64), rows)


def init_codebook(strategy, n, d, reference_feature_maps=None, seed=None, zero_fraction=MATCHED_ZERO_FRACTION):
    """Build an n x d codebook.

    ``matched_sparse`` draws every entry from the pooled non-zero values of
    the reference feature maps and then zeroes each entry with probability
    ``zero_fraction``; ``dense_matched`` skips the zeroing; ``normal`` and
    ``uniform`` draw from N(0, 1) and U[0, 1].  Rows that end up all zero are
    drawn again.
    """
    if strategy not in INIT_STRATEGIES:
        raise ValueError(f"unknown codebook init strategy {strategy!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if strategy in ("matched_sparse", "dense_matched"):
        if reference_feature_maps is None or len(reference_feature_maps) == 0:
            raise ValueError(f"{strategy} initialization needs reference feature maps")
        pool = np.concatenate([np.asarray(f, dtype=np.float32).ravel() for f in reference_feature_maps])
        pool = pool[pool != 0]
        if pool.size == 0:
            raise ValueError("reference feature maps contain no non-zero values")
        p_zero = zero_fraction if strategy == "matched_sparse" else 0.0

        def draw(shape):
            vals = rng.choice(pool, size=shape)
            if p_zero:
                vals[rng.random(shape) < p_zero] = 0
            return vals
    elif strategy == "normal":
        def draw(shape):
            return rng.standard_normal(shape)
    else:
        def draw(shape):
            return rng.random(shape)

    blocks = np.asarray(draw((n, d)), dtype=np.float32)
    while True:
        dead = ~np.any(blocks != 0, axis=1)
        if not dead.any():
            break
        blocks[dead] = draw((int(dead.sum()), d))
    return Codebook(blocks)


# --- IndexMap records -------------------------------------------------------------

INDEX_MAGIC = b"CRIM"
_HEADER = struct.Struct("<4sBIIII")


def encode_index_map(m, label):
    """One record: magic, u8 width, u32 slabs, u32 w, u32 h, u32 label, indices."""
    g = m.geometry
    dtype = "<u1" if m.index_width == 1 else "<u2"
    return _HEADER.pack(INDEX_MAGIC, m.index_width, g.slabs, g.w, g.h, label) + m.indices.astype(dtype).tobytes()


def decode_index_map(buf, d, offset=0):
    """Parse one record at ``offset``; returns (IndexMap, label, next_offset)."""
    if len(buf) - offset < _HEADER.size:
        raise ValueError("truncated CRIM header")
    magic, width, slabs, w, h, label = _HEADER.unpack_from(buf, offset)
    if magic != INDEX_MAGIC:
        raise ValueError("not a CRIM record")
    if width not in (1, 2):
        raise ValueError(f"bad index width {width}")
    count = slabs * w * h
    start = offset + _HEADER.size
    end = start + count * width
    if end > len(buf):
        raise ValueError("truncated CRIM payload")
    dtype = np.uint8 if width == 1 else np.dtype("<u2")
    idx = np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(slabs, w, h)
    idx = idx.astype(np.uint8 if width == 1 else np.uint16)
    return IndexMap(idx, Geometry(slabs * d, w, h, d)), label, end
