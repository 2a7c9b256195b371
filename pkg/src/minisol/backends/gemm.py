"""GEMM_TILED backend: im2col lowering plus a blocked matrix multiply."""

from __future__ import annotations

import numpy as np

from minisol.backends.reference import _pad_input, _window

TILE = 32


def im2col(op, x):
    """Patches of ``x`` as an (N, oh, ow, kh*kw*C) tensor, (i, j, c) order."""
    xp, _, _, oh, ow = _pad_input(x, op)
    kh, kw = op.kernel_hw
    sh, sw = op.stride_hw
    c = x.shape[3]
    cols = np.empty((x.shape[0], oh, ow, kh * kw * c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            k = (i * kw + j) * c
            cols[..., k:k + c] = _window(xp, i, j, oh, ow, sh, sw)
    return cols


def matmul_tiled(a, b, tile: int = TILE):
    """``a @ b`` accumulated over tile x tile blocks."""
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    c = np.zeros((m, n), dtype=np.result_type(a, b))
    for i0 in range(0, m, tile):
        ai = a[i0:i0 + tile]
        ci = c[i0:i0 + tile]
        for j0 in range(0, n, tile):
            cij = ci[:, j0:j0 + tile]
            for k0 in range(0, k, tile):
                cij += ai[:, k0:k0 + tile] @ b[k0:k0 + tile, j0:j0 + tile]
    return c


def gemm(cols, kernel, bias=None, tile: int = TILE):
    """Tiled product of the trailing axis of ``cols`` with a (possibly 4-D) kernel."""
    w = kernel.reshape(-1, kernel.shape[-1])
    lead = cols.shape[:-1]
    out = matmul_tiled(cols.reshape(-1, cols.shape[-1]), w, tile)
    if bias is not None:
        out += bias
    return out.reshape(*lead, w.shape[1])
