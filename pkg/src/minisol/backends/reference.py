"""REF backend: direct numpy implementations of every operator.

These kernels define the semantics every other backend is checked against.
Convolutions and pooling loop over window offsets and accumulate shifted
slices, which is slow but obviously correct.
"""

from __future__ import annotations

import numpy as np

from minisol import hlir
from minisol.passes import same_pad, window_out


def _pad_input(x, op):
    kh, kw = op.kernel_hw
    sh, sw = op.stride_hw
    if op.padding == "same":
        ph = same_pad(x.shape[1], kh, sh)
        pw = same_pad(x.shape[2], kw, sw)
    else:
        ph = pw = (0, 0)
    xp = np.pad(x, ((0, 0), ph, pw, (0, 0))) if any(ph + pw) else x
    oh = window_out(x.shape[1], kh, sh, op.padding)
    ow = window_out(x.shape[2], kw, sw, op.padding)
    return xp, ph, pw, oh, ow


def _window(xp, i, j, oh, ow, sh, sw):
    return xp[:, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw, :]


def conv2d(op, x, kernel, bias=None):
    xp, _, _, oh, ow = _pad_input(x, op)
    kh, kw = op.kernel_hw
    sh, sw = op.stride_hw
    out = np.zeros((x.shape[0], oh, ow, kernel.shape[3]), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += _window(xp, i, j, oh, ow, sh, sw) @ kernel[i, j]
    if bias is not None:
        out += bias
    return out


def conv2d_grad_input(op, g, x, kernel):
    xp, ph, pw, oh, ow = _pad_input(np.zeros_like(x), op)
    kh, kw = op.kernel_hw
    sh, sw = op.stride_hw
    for i in range(kh):
        for j in range(kw):
            _window(xp, i, j, oh, ow, sh, sw)[...] += g @ kernel[i, j].T
    return np.ascontiguousarray(xp[:, ph[0]:ph[0] + x.shape[1], pw[0]:pw[0] + x.shape[2], :])


def conv2d_grad_weight(op, x, g):
    xp, _, _, oh, ow = _pad_input(x, op)
    kh, kw = op.kernel_hw
    sh, sw = op.stride_hw
    cin, cout = x.shape[3], g.shape[3]
    gw = np.empty((kh, kw, cin, cout), dtype=x.dtype)
    g2 = g.reshape(-1, cout)
    for i in range(kh):
        for j in range(kw):
            gw[i, j] = _window(xp, i, j, oh, ow, sh, sw).reshape(-1, cin).T @ g2
    return gw


def _pool_geometry(op, x):
    kh, kw = op.kernel_hw
    sh, sw = op.stride_hw
    oh = window_out(x.shape[1], kh, sh, "valid")
    ow = window_out(x.shape[2], kw, sw, "valid")
    return kh, kw, sh, sw, oh, ow


def max_pool(op, x):
    kh, kw, sh, sw, oh, ow = _pool_geometry(op, x)
    out = None
    for i in range(kh):
        for j in range(kw):
            win = _window(x, i, j, oh, ow, sh, sw)
            out = win.copy() if out is None else np.maximum(out, win)
    return out


def max_pool_argmax(op, x):
    """Window-local index (row-major) of the maximum; ties go to the first."""
    kh, kw, sh, sw, oh, ow = _pool_geometry(op, x)
    best = None
    idx = np.zeros((x.shape[0], oh, ow, x.shape[3]), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            win = _window(x, i, j, oh, ow, sh, sw)
            if best is None:
                best = win.copy()
                continue
            better = win > best
            best[better] = win[better]
            idx[better] = i * kw + j
    return idx


def max_pool_grad(op, g, argmax):
    kh, kw = op.kernel_hw
    sh, sw = op.stride_hw
    h, w = op.in_hw
    n, oh, ow, c = g.shape
    gx = np.zeros((n, h, w, c), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            mask = argmax == (i * kw + j)
            _window(gx, i, j, oh, ow, sh, sw)[...] += np.where(mask, g, 0)
    return gx


def adaptive_windows(n_in: int, n_out: int) -> list:
    return [((i * n_in) // n_out, -(-((i + 1) * n_in) // n_out)) for i in range(n_out)]


def adaptive_avg_pool(op, x):
    oh, ow = op.out_hw
    out = np.empty((x.shape[0], oh, ow, x.shape[3]), dtype=x.dtype)
    for a, (h0, h1) in enumerate(adaptive_windows(x.shape[1], oh)):
        for b, (w0, w1) in enumerate(adaptive_windows(x.shape[2], ow)):
            out[:, a, b, :] = x[:, h0:h1, w0:w1, :].mean(axis=(1, 2))
    return out


def avg_pool_grad(op, g):
    h, w = op.in_hw
    oh, ow = op.out_hw
    gx = np.zeros((g.shape[0], h, w, g.shape[3]), dtype=g.dtype)
    for a, (h0, h1) in enumerate(adaptive_windows(h, oh)):
        for b, (w0, w1) in enumerate(adaptive_windows(w, ow)):
            scale = 1.0 / ((h1 - h0) * (w1 - w0))
            gx[:, h0:h1, w0:w1, :] += (g[:, a, b, :] * scale)[:, None, None, :]
    return gx


def cumsum(op, x):
    ax = op.axis % x.ndim
    if op.reverse:
        x = np.flip(x, ax)
    out = np.cumsum(x, axis=ax, dtype=x.dtype)
    if op.exclusive:
        shifted = np.zeros_like(out)
        src = [slice(None)] * x.ndim
        dst = [slice(None)] * x.ndim
        src[ax] = slice(0, -1)
        dst[ax] = slice(1, None)
        shifted[tuple(dst)] = out[tuple(src)]
        out = shifted
    if op.reverse:
        out = np.flip(out, ax)
    return np.ascontiguousarray(out)


def dense(op, x, kernel, bias=None):
    out = x @ kernel
    if bias is not None:
        out += bias
    return out


def run_node(node: hlir.Node, inputs: list, weights: dict):
    """Evaluate one node on numpy arrays."""
    op = node.op
    k = op.kind
    if k == "Const":
        return weights["value"].copy()
    if k == "Identity":
        return inputs[0].copy()
    if k == "ReLU":
        return np.maximum(inputs[0], 0)
    if k == "Add":
        return inputs[0] + inputs[1]
    if k == "Mul":
        return inputs[0] * inputs[1]
    if k == "Flatten":
        return inputs[0].reshape(inputs[0].shape[0], -1).copy()
    if k == "Reshape":
        return inputs[0].reshape(inputs[0].shape[0], *op.shape).copy()
    if k == "CumSum":
        return cumsum(op, inputs[0])
    if k == "Conv2D":
        return conv2d(op, inputs[0], weights["kernel"], weights.get("bias"))
    if k == "Dense":
        return dense(op, inputs[0], weights["kernel"], weights.get("bias"))
    if k == "MaxPool2D":
        return max_pool(op, inputs[0])
    if k == "AdaptiveAvgPool2D":
        return adaptive_avg_pool(op, inputs[0])
    if k == "DenseGradInput":
        return inputs[0] @ weights["kernel"].T
    if k == "DenseGradWeight":
        return inputs[0].T @ inputs[1]
    if k == "BiasGrad":
        return inputs[0].reshape(-1, inputs[0].shape[-1]).sum(axis=0)
    if k == "Conv2DGradInput":
        return conv2d_grad_input(op, inputs[0], inputs[1], weights["kernel"])
    if k == "Conv2DGradWeight":
        return conv2d_grad_weight(op, inputs[0], inputs[1])
    if k == "ReluGrad":
        return np.where(inputs[1] > 0, inputs[0], np.zeros((), inputs[0].dtype))
    if k == "MaxPoolArgmax":
        return max_pool_argmax(op, inputs[0])
    if k == "MaxPoolGrad":
        return max_pool_grad(op, inputs[0], inputs[1])
    if k == "AvgPoolGrad":
        return avg_pool_grad(op, inputs[0])
    raise NotImplementedError(f"REF has no kernel for {k}")


def evaluate(graph: hlir.Graph, inputs: dict, keep_all: bool = False) -> dict:
    """Reference interpreter: run the graph node by node in topological order."""
    dtype = hlir.DTYPES[graph.dtype]
    values = {}
    for name in graph.input_names:
        if name not in inputs:
            raise KeyError(f"missing graph input {name!r}")
        values[name] = np.asarray(inputs[name], dtype=dtype)
    values.update(graph.initializers)
    for node in hlir.sorted_nodes(graph):
        if isinstance(node.op, hlir.Input):
            continue
        ins = [values[v] for v in node.inputs]
        wts = {r: graph.initializers[v] for r, v in node.weights.items()}
        values[node.output] = np.asarray(run_node(node, ins, wts), dtype=dtype)
    if keep_all:
        return values
    return {v: values[v] for v in graph.outputs}
