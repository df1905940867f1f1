"""Dense tensors with reverse-mode differentiation for the handful of ops the
forecasting network needs.

Every op checks its result for NaN/Inf and raises :class:`NonFiniteError`
rather than letting bad values propagate silently. Ops only record a backward
closure when at least one input requires a gradient, so inference does not
hold on to im2col buffers.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf values."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")
    return arr


class Tensor:
    """An n-dimensional array with an optional gradient.

    Args:
        data: Array-like values. Floating dtypes are kept as-is (float64 for
            verification, float32 for training); anything else becomes float64.
        requires_grad: Whether ``backward`` should populate ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
        _op: str = "",
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        # backward closures always hand over freshly allocated arrays
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Back-propagate from this tensor.

        ``grad`` defaults to ones, which for a scalar loss is the usual seed.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.array(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != {self.data.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            _check_finite(node.grad, f"backward of {node._op or 'leaf'}")
            node._backward(node.grad)
            if node._parents:
                # interior gradients are no longer needed once pushed upstream
                node.grad = None if node is not self else node.grad


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, _op=op)
    return Tensor(data, _op=op)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# layout helpers
#
# Ops accept 4-D arrays in any memory layout but produce channel-last memory
# exposed through an (N, C, H, W) view. Convolutions then read contiguous
# pixel rows, which is what keeps the GEMMs fast.


def _nhwc(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _nchw(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 3, 1, 2)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Unfold a padded channel-last (N, Hp, Wp, C) array into (N*ho*wo, k*k*C)."""
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, k, k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    return cols.reshape(n * ho * wo, k * k * c)


def _col2im(dcols: np.ndarray, shape_padded: tuple[int, ...], k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back into (N, Hp, Wp, C)."""
    n, hp, wp, c = shape_padded
    dcols = dcols.reshape(n, ho, wo, k, k, c)
    out = np.zeros(shape_padded, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
    return out


def _pad_nhwc(x: np.ndarray, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    xp[:, padding : padding + h, padding : padding + w, :] = x.transpose(0, 2, 3, 1)
    return xp


def _conv_shifted(x: Tensor, weight: Tensor, bias: Tensor, padding: int) -> Tensor:
    """Stride-1 convolution as k*k GEMMs over row-shifted views of the padded image.

    With the padded channel-last image flattened to (N*Hp*Wp, C), tap (i, j)
    of every output pixel sits exactly ``i*Wp + j`` rows further on, so each
    tap is a contiguous slice and no unfolded copy of the input is needed.
    Outputs are computed on the padded grid and the valid window cropped.
    The backward pass unfolds the (narrow) output gradient instead, turning
    both the weight and input gradients into a single GEMM each.
    """
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - k + 1, wp - k + 1
    rows = n * hp * wp
    span = rows - (k - 1) * (wp + 1)
    offsets = [(i, j, i * wp + j) for i in range(k) for j in range(k)]

    xf = _pad_nhwc(x.data, padding).reshape(rows, cin)
    wd = weight.data
    taps = np.ascontiguousarray(wd.transpose(2, 3, 1, 0))  # (k, k, cin, cout)
    full = np.zeros((rows, cout), dtype=x.dtype)
    acc = full[:span]
    for i, j, off in offsets:
        acc += xf[off : off + span] @ taps[i, j]
    out = full.reshape(n, hp, wp, cout)[:, :ho, :wo, :]
    out += bias.data
    out = np.ascontiguousarray(out)

    def backward(g: np.ndarray) -> None:
        g_nhwc = _nhwc(g)
        if bias.requires_grad:
            bias._accumulate(g_nhwc.reshape(-1, cout).sum(axis=0))
        if not (weight.requires_grad or x.requires_grad):
            return
        gfull = np.zeros((n, hp, wp, cout), dtype=g.dtype)
        gfull[:, :ho, :wo, :] = g_nhwc
        gfull = gfull.reshape(rows, cout)
        # gcols[q, (i, j, o)] = gfull[q - off_ij, o]
        gcols = np.zeros((rows, k * k * cout), dtype=g.dtype)
        for t, (_, _, off) in enumerate(offsets):
            gcols[off:, t * cout : (t + 1) * cout] = gfull[: rows - off]
        if weight.requires_grad:
            dw = (gcols.T @ xf).reshape(k, k, cout, cin).transpose(2, 3, 0, 1)
            weight._accumulate(np.ascontiguousarray(dw))
        if x.requires_grad:
            wstack = np.ascontiguousarray(wd.transpose(2, 3, 0, 1)).reshape(k * k * cout, cin)
            dxp = (gcols @ wstack).reshape(n, hp, wp, cin)
            x._accumulate(_nchw(np.ascontiguousarray(dxp[:, padding : padding + h, padding : padding + w, :])))

    return _result(_nchw(out), (x, weight, bias), backward, "conv2d")


def _conv_unfolded(x: Tensor, weight: Tensor, bias: Tensor, padding: int, stride: int) -> Tensor:
    """General-stride convolution through an explicit unfold (im2col)."""
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = _pad_nhwc(x.data, padding)
    padded_shape = xp.shape
    cols = _im2col(xp, k, stride, ho, wo)
    del xp
    # taps ordered (i, j, c) to match the unfolded columns
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1).reshape(cout, k * k * cin))
    out = cols @ wmat.T
    out += bias.data
    out = out.reshape(n, ho, wo, cout)

    def backward(g: np.ndarray) -> None:
        g2 = _nhwc(g).reshape(n * ho * wo, cout)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if weight.requires_grad:
            dw = (g2.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
            weight._accumulate(np.ascontiguousarray(dw))
        if x.requires_grad:
            dxp = _col2im(g2 @ wmat, padded_shape, k, stride, ho, wo)
            dx = dxp[:, padding : padding + h, padding : padding + w, :]
            x._accumulate(_nchw(np.ascontiguousarray(dx)))

    return _result(_nchw(out), (x, weight, bias), backward, "conv2d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    Shapes: ``x`` (N, Cin, H, W), ``weight`` (Cout, Cin, k, k) with odd ``k``,
    ``bias`` (Cout,). Output is (N, Cout, H', W') with
    ``H' = (H + 2*padding - k) // stride + 1``.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0 or h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError("conv2d: invalid padding/stride for input extent")
    if stride == 1:
        return _conv_shifted(x, weight, bias, padding)
    return _conv_unfolded(x, weight, bias, padding, stride)


def transpose_conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel: (N, Cin, H, W) -> (N, Cout, 2H, 2W).

    ``weight`` has shape (Cin, Cout, 2, 2). Windows never overlap, so each
    input pixel scatters one 2x2 patch.
    """
    if stride != 2:
        raise ShapeError("transpose_conv2d only supports stride 2")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("transpose_conv2d expects 4-D input and weight")
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"transpose_conv2d: input has {cin} channels, weight expects {wcin}")
    if (kh, kw) != (2, 2):
        raise ShapeError("transpose_conv2d: kernel must be 2x2")
    if bias.shape != (cout,):
        raise ShapeError(f"transpose_conv2d: bias shape {bias.shape} != ({cout},)")

    xmat = _nhwc(x.data).reshape(n * h * w, cin)
    # columns ordered (a, b, cout)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(cin, 4 * cout)
    y = (xmat @ wmat).reshape(n, h, w, 2, 2, cout)
    out = np.ascontiguousarray(y.transpose(0, 1, 3, 2, 4, 5)).reshape(n, 2 * h, 2 * w, cout)
    out += bias.data

    def backward(g: np.ndarray) -> None:
        g_nhwc = _nhwc(g)
        if bias.requires_grad:
            bias._accumulate(g_nhwc.reshape(-1, cout).sum(axis=0))
        if not (weight.requires_grad or x.requires_grad):
            return
        g2 = np.ascontiguousarray(g_nhwc.reshape(n, h, 2, w, 2, cout).transpose(0, 1, 3, 2, 4, 5))
        g2 = g2.reshape(n * h * w, 4 * cout)
        if weight.requires_grad:
            dw = (xmat.T @ g2).reshape(cin, 2, 2, cout).transpose(0, 3, 1, 2)
            weight._accumulate(np.ascontiguousarray(dw))
        if x.requires_grad:
            dx = (g2 @ wmat.T).reshape(n, h, w, cin)
            x._accumulate(_nchw(dx))

    return _result(_nchw(out), (x, weight, bias), backward, "transpose_conv2d")


def avg_pool2(x: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 windows."""
    if x.data.ndim != 4:
        raise ShapeError("avg_pool2 expects a 4-D tensor")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial extent, got {h}x{w}")
    xs = _nhwc(x.data).reshape(n, h // 2, 2, w // 2, 2, c)
    out = (xs[:, :, 0, :, 0] + xs[:, :, 0, :, 1] + xs[:, :, 1, :, 0] + xs[:, :, 1, :, 1]) * x.dtype.type(0.25)

    def backward(g: np.ndarray) -> None:
        gq = _nhwc(g) * g.dtype.type(0.25)
        gx = np.empty((n, h // 2, 2, w // 2, 2, c), dtype=g.dtype)
        gx[...] = gq[:, :, None, :, None, :]
        x._accumulate(_nchw(gx.reshape(n, h, w, c)))

    return _result(_nchw(out), (x,), backward, "avg_pool2")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis (axis 1): channels of ``a`` then ``b``."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects 4-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data.transpose(0, 2, 3, 1), b.data.transpose(0, 2, 3, 1)], axis=3)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g[:, :ca].copy(order="K"))
        if b.requires_grad:
            b._accumulate(g[:, ca:].copy(order="K"))

    return _result(_nchw(out), (a, b), backward, "concat_channels")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (used to stack parameter arrays)."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                t._accumulate(np.ascontiguousarray(g[tuple(idx)]).copy())

    return _result(out, tuple(tensors), backward, "concat")


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Elements ``[start, stop)`` along ``axis``."""
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {stop}) out of range for extent {x.shape[axis]}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx].copy(order="K")

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        gx[idx] = g
        x._accumulate(gx)

    return _result(out, (x,), backward, "narrow")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of equal-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g.copy(order="K"))
        if b.requires_grad:
            b._accumulate(g.copy(order="K"))

    return _result(out, (a, b), backward, "add")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``[start, stop)`` of a 4-D tensor."""
    c = x.shape[1]
    if not 0 <= start <= stop <= c:
        raise ShapeError(f"slice_channels: [{start}, {stop}) out of range for {c} channels")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        x._accumulate(gx)

    return _result(out, (x,), backward, "slice_channels")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); the subgradient at 0 is taken as 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * mask)

    return _result(out, (x,), backward, "relu")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every element; returns a 0-d tensor."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    count = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def backward(g: np.ndarray) -> None:
        scale = g * (2.0 / count)
        gp = (diff * scale).astype(pred.dtype, copy=False)
        if pred.requires_grad:
            pred._accumulate(gp)
        if target.requires_grad:
            target._accumulate(-gp)

    return _result(out, (pred, target), backward, "mse_loss")


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g: np.ndarray) -> None:
        x._accumulate(np.full_like(x.data, g))

    return _result(out, (x,), backward, "sum")


# --------------------------------------------------------------------------
# gradient checking


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> dict:
    """Compare analytic gradients of ``fn`` with central finite differences.

    ``fn`` maps the input tensors to an output tensor. Non-scalar outputs are
    contracted against a fixed random cotangent so a single backward covers
    every input. Relative error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.

    Args:
        fn: Function under test.
        inputs: Float64 tensors; the ones with ``requires_grad`` are checked.
        tolerance: Maximum allowed relative error.
        h: Perturbation size.
        max_coords: If set, check at most this many coordinates per input,
            chosen deterministically from ``seed``.
        seed: Seed for the cotangent and coordinate sampling.
        floor: Denominator floor that keeps near-zero gradients from
            producing spurious relative errors.

    Returns:
        ``{"max_rel_err", "pass", "failures", "n_checked"}`` where
        ``failures`` lists ``(input_index, flat_index, analytic, numeric)``
        for every coordinate over tolerance.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
        # perturbations go through a flat view, which needs contiguous storage
        t.data = np.ascontiguousarray(t.data)
        t.zero_grad()

    out = fn(*inputs)
    cot = np.ones_like(out.data) if out.data.ndim == 0 else rng.standard_normal(out.shape)

    def objective() -> float:
        return float(np.sum(fn(*inputs).data * cot))

    out.backward(cot)

    failures = []
    max_rel = 0.0
    n_checked = 0
    for idx, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords: Iterable[int] = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = objective()
            flat[c] = orig - h
            fm = objective()
            flat[c] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            n_checked += 1
            max_rel = max(max_rel, rel)
            if rel > tolerance:
                failures.append((idx, int(c), a, numeric))
    for t in inputs:
        t.zero_grad()
    return {"max_rel_err": max_rel, "pass": not failures, "failures": failures, "n_checked": n_checked}
