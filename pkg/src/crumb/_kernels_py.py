"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same name and signature in
``_kernels.pyx``.  Both accumulate in the same order so that their results
are bit-identical, which the test-suite checks.
"""
import numpy as np

# chunks processed per slab in nearest_blocks; bounds the (rows x blocks)
# float64 scratch buffer
_SLAB = 4096


def normalized_blocks(blocks):
    """Rows of ``blocks`` divided by their L2 norm, in float64.

    The squared norm is accumulated sequentially over the row.
    """
    b = np.asarray(blocks, dtype=np.float64)
    sq = b[:, 0] * b[:, 0]
    for j in range(1, b.shape[1]):
        sq = sq + b[:, j] * b[:, j]
    return b / np.sqrt(sq)[:, None]


def nearest_blocks(chunks, blocks):
    """Index of the highest-similarity block for every chunk.

    ``chunks`` is (m, d), ``blocks`` is (n, d).  Similarity is the dot
    product with the unit-normalized block, accumulated in float64 over the
    feature axis in ascending order.  Ties resolve to the lowest index.
    """
    chunks = np.asarray(chunks, dtype=np.float64)
    unit = normalized_blocks(blocks)
    m, d = chunks.shape
    out = np.empty(m, dtype=np.int64)
    for start in range(0, m, _SLAB):
        c = chunks[start:start + _SLAB]
        acc = c[:, 0:1] * unit[None, :, 0]
        for j in range(1, d):
            acc += c[:, j:j + 1] * unit[None, :, j]
        out[start:start + _SLAB] = np.argmax(acc, axis=1)
    return out


def scatter_add_rows(target, indices, values):
    """``target[indices[i]] += values[i]`` for every i, in order of i."""
    np.add.at(target, indices, values)


def im2col(x, kh, kw, stride, pad):
    """Unfold (N, C, H, W) into (N*OH*OW, C*kh*kw) patch rows."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (n, c, oh, ow, kh, kw) -> (n, oh, ow, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: sum patch gradients back into (N, C, H, W)."""
    n, c, h, w = shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)
