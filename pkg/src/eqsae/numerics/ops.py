"""Differentiable layer primitives.

Only the operators the autoencoders need: affine maps, 2-D convolution and
its transpose, ReLU, TopK, reshapes, sums and the mean squared error.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, common_precision, make_node


class ParameterError(ValueError):
    pass


def _check_ndim(t: Tensor, ndim: int, name: str) -> None:
    if t.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {t.shape}")


# -- affine ------------------------------------------------------------------


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y[i, j] = sum_k W[j, k] x[i, k] + b[j]."""
    _check_ndim(x, 2, "linear input")
    _check_ndim(W, 2, "linear weight")
    if x.shape[1] != W.shape[1]:
        raise ShapeError(f"linear: input has {x.shape[1]} features, weight expects {W.shape[1]}")
    if b is not None and b.shape != (W.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({W.shape[0]},)")
    parents = (x, W) if b is None else (x, W, b)
    common_precision(*parents)

    out = x.data @ W.data.T
    if b is not None:
        out += b.data

    def backward(g):
        gx = g @ W.data if x.requires_grad else None
        gW = g.T @ x.data if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, (g.sum(axis=0) if b.requires_grad else None)

    return make_node(out, parents, backward, "linear")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_ndim(a, 2, "matmul lhs")
    _check_ndim(b, 2, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    common_precision(a, b)

    def backward(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return make_node(a.data @ b.data, (a, b), backward, "matmul")


# -- elementwise -----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    common_precision(a, b)
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    common_precision(a, b)
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, x.data.dtype.type(0)), (x,), lambda g: (g * mask,), "relu")


def topk_mask(z: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row, ties toward the lowest index."""
    n = z.shape[1]
    if k == n:
        return np.ones(z.shape, dtype=bool)
    if np.isnan(z).any():
        raise FloatingPointError("topk input contains NaN")
    kth = np.partition(z, n - k, axis=1)[:, n - k : n - k + 1]
    above = z > kth
    tied = z == kth
    need = k - above.sum(axis=1, keepdims=True)
    return above | (tied & (np.cumsum(tied, axis=1) <= need))


def topk(z: Tensor, k: int) -> Tensor:
    """Keep the k largest values of each row (by value), zero the rest."""
    _check_ndim(z, 2, "topk input")
    n = z.shape[1]
    if not 1 <= k <= n:
        raise ParameterError(f"topk: K={k} outside [1, {n}]")
    mask = topk_mask(z.data, k)
    out = np.where(mask, z.data, z.data.dtype.type(0))
    return make_node(out, (z,), lambda g: (g * mask,), "topk")


# -- reductions / losses -----------------------------------------------------


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared elementwise differences over all entries."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    common_precision(a, b)
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.dot(diff.ravel(), diff.ravel()) / n, dtype=a.data.dtype)

    def backward(g):
        ga = diff * (2.0 * g / n)
        return ga, -ga

    return make_node(out, (a, b), backward, "mse")


def total(terms: list[Tensor]) -> Tensor:
    """Sum of scalar tensors."""
    if not terms:
        raise ShapeError("total() of no terms")
    common_precision(*terms)
    for t in terms:
        if t.data.size != 1:
            raise ShapeError(f"total() expects scalars, got shape {t.shape}")
    out = np.asarray(sum(t.data for t in terms), dtype=terms[0].data.dtype)
    return make_node(out, terms, lambda g: tuple(g for _ in terms), "total")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def stack_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``x[index]`` (used to broadcast one target across an orbit)."""
    index = np.asarray(index)
    src_rows = x.shape[0]

    def backward(g):
        gx = np.zeros((src_rows,) + g.shape[1:], dtype=g.dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return make_node(x.data[index], (x,), backward, "gather")


# -- convolution ---------------------------------------------------------------


def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B*ho*wo, C*kh*kw) patch matrix."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (B, C, ho, wo, kh, kw) -> (B, ho, wo, C, kh, kw)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, b: int, c: int, kh: int, kw: int, stride: int, ho: int, wo: int,
            hp: int, wp: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches into a (B, C, hp, wp) buffer."""
    patches = cols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    if ho == 1 and wo == 1 and hp == kh and wp == kw:
        out += patches[..., 0, 0]
        return out
    he = (ho - 1) * stride + 1
    we = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + he : stride, j : j + we : stride] += patches[:, :, i, j]
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding; kernel layout (c_out, c_in, kh, kw)."""
    _check_ndim(x, 4, "conv2d input")
    _check_ndim(kernel, 4, "conv2d kernel")
    bsz, c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, kernel expects {k_in}")
    if stride < 1 or pad < 0:
        raise ParameterError(f"conv2d: stride={stride}, pad={pad}")
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent ({ho}, {wo})")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    common_precision(*parents)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(bsz, ho, wo, c_out).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gx = gk = gb = None
        if x.requires_grad:
            dcols = g2 @ wmat
            gxp = _col2im(dcols, bsz, c_in, kh, kw, stride, ho, wo, xp.shape[2], xp.shape[3])
            gx = np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w])
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gk) if bias is None else (gx, gk, gb)

    return make_node(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
                     pad: int = 0, out_pad: int = 0) -> Tensor:
    """Transposed convolution; kernel layout (c_in, c_out, kh, kw).

    Without bias this is the exact adjoint of :func:`conv2d` sharing the kernel.
    """
    _check_ndim(x, 4, "conv_transpose2d input")
    _check_ndim(kernel, 4, "conv_transpose2d kernel")
    bsz, c_in, h, w = x.shape
    k_in, c_out, kh, kw = kernel.shape
    if k_in != c_in:
        raise ShapeError(f"conv_transpose2d: input has {c_in} channels, kernel expects {k_in}")
    if stride < 1 or pad < 0 or not 0 <= out_pad < stride:
        raise ParameterError(f"conv_transpose2d: stride={stride}, pad={pad}, out_pad={out_pad}")
    ho = (h - 1) * stride - 2 * pad + kh + out_pad
    wo = (w - 1) * stride - 2 * pad + kw + out_pad
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: non-positive output extent ({ho}, {wo})")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({c_out},)")
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    common_precision(*parents)

    # full (uncropped) canvas must hold every stamp and the cropped window
    hf = max((h - 1) * stride + kh, pad + ho)
    wf = max((w - 1) * stride + kw, pad + wo)
    xmat = x.data.transpose(0, 2, 3, 1).reshape(-1, c_in)
    wmat = kernel.data.reshape(c_in, -1)
    cols = xmat @ wmat
    full = _col2im(cols, bsz, c_out, kh, kw, stride, h, w, hf, wf)
    out = np.ascontiguousarray(full[:, :, pad : pad + ho, pad : pad + wo])
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gfull = np.zeros((bsz, c_out, hf, wf), dtype=g.dtype)
        gfull[:, :, pad : pad + ho, pad : pad + wo] = g
        gcols = _im2col(gfull, kh, kw, stride, h, w)
        gx = gk = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gcols @ wmat.T).reshape(bsz, h, w, c_in).transpose(0, 3, 1, 2))
        if kernel.requires_grad:
            gk = (xmat.T @ gcols).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk) if bias is None else (gx, gk, gb)

    return make_node(out, parents, backward, "conv_transpose2d")
