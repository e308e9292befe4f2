"""Minimal reverse-mode differentiation engine on numpy kernels.

A :class:`Tape` owns one single-threaded graph. Leaf tensors are created
through ``tape.leaf``; every primitive records its backward closure on the
tape in forward order, and ``tape.backward`` replays the records in exact
reverse order. Forward math runs in the tape dtype (float32 by default,
float64 shadow mode for gradient verification).

Broadcasting is restricted to scalar-tensor; tensor-tensor operands must
agree in shape exactly.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

EPS = 1e-7  # clamp for log arguments, denominators and norms


class Tensor:
    """Array value tracked by a tape; gradients share the data's shape."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data: np.ndarray, tape: "Tape | None" = None,
                 requires_grad: bool = False):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered record of primitive applications for one graph instance."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def leaf(self, data, requires_grad: bool = True) -> Tensor:
        arr = np.asarray(data, dtype=self.dtype)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        return Tensor(arr, tape=self, requires_grad=requires_grad)

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and traverse records in reverse order."""
        if loss.tape is not self:
            raise ValueError("loss tensor does not belong to this tape")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)


def constant(data, dtype=np.float32) -> Tensor:
    """Untracked tensor; participates in ops without receiving gradients."""
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return Tensor(arr)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.data.shape == ():
        g = np.asarray(g.sum())
    elif g.shape != t.data.shape:
        raise ValueError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _make(data: np.ndarray, inputs: Sequence[Tensor],
          backward: Callable[[np.ndarray], None] | None) -> Tensor:
    tapes = [t.tape for t in inputs if t.tape is not None]
    tape = tapes[0] if tapes else None
    for other in tapes[1:]:
        if other is not tape:
            raise ValueError("operands belong to different tapes")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, tape=tape, requires_grad=requires)
    if requires and backward is not None:
        if tape is None:
            raise ValueError("grad-requiring tensor without a tape")
        tape.record(out, backward)
    return out


def _check_binary_shapes(a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape and a.data.shape != () and b.data.shape != ():
        raise ValueError(f"shape mismatch {a.data.shape} vs {b.data.shape}; "
                         "only scalar-tensor broadcasting is supported")


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_binary_shapes(a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, [a, b], backward)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_binary_shapes(a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, [a, b], backward)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_binary_shapes(a, b)

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, [a, b], backward)


def div(a: Tensor, b) -> Tensor:
    """a / b with the denominator magnitude clamped at EPS."""
    b = _coerce(b, a)
    _check_binary_shapes(a, b)
    sign = np.where(b.data < 0, -1.0, 1.0)
    safe = np.where(np.abs(b.data) < EPS, sign * EPS, b.data)
    live = np.abs(b.data) >= EPS  # derivative is zero in the clamped region

    def backward(g):
        _accum(a, g / safe)
        _accum(b, np.where(live, -g * a.data / (safe * safe), 0.0))

    return _make(a.data / safe, [a, b], backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        _accum(x, g * mask)

    return _make(np.maximum(x.data, 0), [x], backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    y = y.astype(d.dtype)

    def backward(g):
        _accum(x, g * y * (1.0 - y))

    return _make(y, [x], backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g):
        _accum(x, g * y)

    return _make(y, [x], backward)


def log(x: Tensor, eps: float = EPS) -> Tensor:
    """log with the argument clamped at eps; zero gradient below the clamp."""
    safe = np.maximum(x.data, eps)
    live = x.data >= eps

    def backward(g):
        _accum(x, np.where(live, g / safe, 0.0))

    return _make(np.log(safe), [x], backward)


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(np.maximum(x.data, 0.0))

    def backward(g):
        _accum(x, g / (2.0 * np.maximum(y, EPS)))

    return _make(y, [x], backward)


# -- reductions ----------------------------------------------------------

def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape).copy())

    return _make(np.asarray(y), [x], backward)


def reduce_mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.data.shape[axis]
    y = np.mean(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape) / count)

    return _make(np.asarray(y), [x], backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError(f"dot needs equal-length vectors, got "
                         f"{a.data.shape} and {b.data.shape}")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(np.asarray(a.data @ b.data), [a, b], backward)


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm, clamped below at EPS."""
    raw = float(np.sqrt(np.sum(x.data.astype(np.float64) ** 2)))
    y = max(raw, EPS)
    live = raw >= EPS

    def backward(g):
        if live:
            _accum(x, g * (x.data / y))

    return _make(np.asarray(y, dtype=x.data.dtype), [x], backward)


# -- linear algebra and shape --------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, [a, b], backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"transpose expects a 2-d tensor, got {x.data.shape}")

    def backward(g):
        _accum(x, g.T)

    return _make(np.ascontiguousarray(x.data.T), [x], backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 1; all other axes must agree."""
    sa, sb = a.data.shape, b.data.shape
    if len(sa) != len(sb) or sa[:1] + sa[2:] != sb[:1] + sb[2:]:
        raise ValueError(f"concat_channels needs matching non-channel dims, "
                         f"got {sa} and {sb}")
    na = sa[1]

    def backward(g):
        _accum(a, g[:, :na])
        _accum(b, g[:, na:])

    return _make(np.concatenate([a.data, b.data], axis=1), [a, b], backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def backward(g):
        _accum(x, np.ascontiguousarray(g).reshape(x.data.shape))

    return _make(x.data.reshape(shape), [x], backward)


def take_rows(x: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accum(x, gx)

    return _make(x.data[idx], [x], backward)


def gather_points(x: Tensor, points) -> Tensor:
    """Per-point channel fibers of a (1, C, D, H, W) tensor at integer (z, y, x).

    Returns an (n_points, C) tensor; the backward pass scatter-adds into
    exactly the gathered cells.
    """
    if x.data.ndim != 5 or x.data.shape[0] != 1:
        raise ValueError(f"gather_points expects (1, C, D, H, W), got {x.data.shape}")
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 3)
    dims = x.data.shape[2:]
    for axis in range(3):
        bad = (pts[:, axis] < 0) | (pts[:, axis] >= dims[axis])
        if bad.any():
            p = pts[bad][0]
            raise IndexError(f"point {tuple(int(c) for c in p)} outside dims {dims}")
    z, y, xx = pts[:, 0], pts[:, 1], pts[:, 2]
    c_idx = np.arange(x.data.shape[1])[:, None]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx[0], (c_idx, z[None, :], y[None, :], xx[None, :]), g.T)
        _accum(x, gx)

    out = np.ascontiguousarray(x.data[0][:, z, y, xx].T)
    return _make(out, [x], backward)


# -- spatial primitives ---------------------------------------------------

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 per-axis values, got {v!r}")
    return t  # type: ignore[return-value]


def conv3d(x: Tensor, weights: Tensor, bias: Tensor | None = None,
           stride=1, padding=0) -> Tensor:
    """Cross-correlation of (N, Cin, D, H, W) with (Cout, Cin, kd, kh, kw).

    Zero padding; output spatial dims are floor((in + 2*pad - k)/stride) + 1.
    Kernel sizes must be odd.
    """
    stride, padding = _triple(stride), _triple(padding)
    if x.data.ndim != 5:
        raise ValueError(f"conv3d input must be 5-d (N, C, D, H, W), got {x.data.shape}")
    if weights.data.ndim != 5:
        raise ValueError(f"conv3d weights must be 5-d, got {weights.data.shape}")
    n, cin, d, h, w = x.data.shape
    cout, cin_w, kd, kh, kw = weights.data.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input has {cin}, weights expect {cin_w}")
    if any(k % 2 == 0 for k in (kd, kh, kw)):
        raise ValueError(f"kernel sizes must be odd, got {(kd, kh, kw)}")
    if bias is not None and bias.data.shape != (cout,):
        raise ValueError(f"bias shape {bias.data.shape} != ({cout},)")
    (sd, sh, sw), (pd, ph, pw) = stride, padding
    do = (d + 2 * pd - kd) // sd + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if min(do, ho, wo) < 1:
        raise ValueError(f"kernel {(kd, kh, kw)} too large for input {(d, h, w)} "
                         f"with padding {padding}")
    # Channels-last internally: per-offset slab copies run over long
    # contiguous spans and every GEMM sees a contiguous operand. Scratch
    # buffers are reused across offsets to keep allocations small and
    # uniform; only the padded input stays alive for the backward pass.
    xl = np.ascontiguousarray(np.moveaxis(x.data, 1, 4))
    xp = np.pad(xl, ((0, 0), (pd, pd), (ph, ph), (pw, pw), (0, 0)))
    vox = n * do * ho * wo
    offsets = [(dz, dy, dx) for dz in range(kd) for dy in range(kh)
               for dx in range(kw)]

    def slab_view(buf, dz, dy, dx):
        return buf[:, dz:dz + sd * do:sd, dy:dy + sh * ho:sh,
                   dx:dx + sw * wo:sw, :]

    # w2[k] is the (cin, cout) slice for kernel offset k
    w2 = np.ascontiguousarray(
        weights.data.transpose(2, 3, 4, 1, 0).reshape(len(offsets), cin, cout))
    dtype = x.data.dtype
    slab_buf = np.empty((vox, cin), dtype=dtype)
    slab_5d = slab_buf.reshape(n, do, ho, wo, cin)
    gemm_buf = np.empty((vox, cout), dtype=dtype)
    out_flat = np.zeros((vox, cout), dtype=dtype)
    for k, (dz, dy, dx) in enumerate(offsets):
        slab_5d[...] = slab_view(xp, dz, dy, dx)
        np.matmul(slab_buf, w2[k], out=gemm_buf)
        out_flat += gemm_buf
    if bias is not None:
        out_flat += bias.data[None, :]
    out = np.ascontiguousarray(
        np.moveaxis(out_flat.reshape(n, do, ho, wo, cout), 4, 1))

    def backward(g):
        g2 = np.ascontiguousarray(np.moveaxis(g, 1, 4)).reshape(vox, cout)
        if weights.requires_grad:
            gw2 = np.empty_like(w2)
            buf = np.empty((vox, cin), dtype=dtype)
            buf5 = buf.reshape(n, do, ho, wo, cin)
            for k, (dz, dy, dx) in enumerate(offsets):
                buf5[...] = slab_view(xp, dz, dy, dx)
                np.matmul(buf.T, g2, out=gw2[k])
            gw = gw2.reshape(kd, kh, kw, cin, cout).transpose(4, 3, 0, 1, 2)
            _accum(weights, np.ascontiguousarray(gw))
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=0))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            gcol = np.empty((vox, cin), dtype=dtype)
            w2t = np.ascontiguousarray(w2.transpose(0, 2, 1))
            for k, (dz, dy, dx) in enumerate(offsets):
                np.matmul(g2, w2t[k], out=gcol)
                slab_view(gxp, dz, dy, dx)[...] += gcol.reshape(n, do, ho, wo, cin)
            gxl = gxp[:, pd:pd + d, ph:ph + h, pw:pw + w, :]
            _accum(x, np.ascontiguousarray(np.moveaxis(gxl, 4, 1)))

    return _make(out, [x, weights]
                 + ([bias] if bias is not None else []), backward)


def maxpool3d(x: Tensor, window, stride=None) -> Tensor:
    """Max over (wd, wh, ww) windows of a (N, C, D, H, W) tensor.

    Within-window argmax ties resolve to the first position in z-major order.
    """
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    if x.data.ndim != 5:
        raise ValueError(f"maxpool3d input must be 5-d, got {x.data.shape}")
    n, c, d, h, w = x.data.shape
    (wd, wh, ww), (sd, sh, sw) = window, stride
    if wd > d or wh > h or ww > w:
        raise ValueError(f"window {window} larger than input {(d, h, w)}")
    view = np.lib.stride_tricks.sliding_window_view(x.data, window, axis=(2, 3, 4))
    view = view[:, :, ::sd, ::sh, ::sw]
    n_, c_, do, ho, wo = view.shape[:5]
    flat = view.reshape(n, c, do, ho, wo, -1)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        kz, rem = np.divmod(arg, wh * ww)
        ky, kx = np.divmod(rem, ww)
        grids = np.meshgrid(np.arange(n), np.arange(c), np.arange(do),
                            np.arange(ho), np.arange(wo), indexing="ij")
        iz = grids[2] * sd + kz
        iy = grids[3] * sh + ky
        ix = grids[4] * sw + kx
        gx = np.zeros_like(x.data)
        np.add.at(gx, (grids[0], grids[1], iz, iy, ix), g)
        _accum(x, gx)

    return _make(np.ascontiguousarray(out), [x], backward)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Dense 1-d linear interpolation operator, align-corners-false."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    lo_c = np.clip(lo, 0, n_in - 1)
    hi_c = np.clip(lo + 1, 0, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo_c), (1.0 - frac).astype(dtype))
    np.add.at(m, (rows, hi_c), frac.astype(dtype))
    return m


def _apply_axis(arr: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    out = np.tensordot(arr, m, axes=([axis], [1]))
    return np.ascontiguousarray(np.moveaxis(out, -1, axis))


def trilinear_upsample(x: Tensor, factor) -> Tensor:
    """Upsample the spatial axes of (N, C, D, H, W) by integer factors."""
    fz, fy, fx = _triple(factor)
    if min(fz, fy, fx) < 1:
        raise ValueError(f"factors must be >= 1, got {(fz, fy, fx)}")
    if x.data.ndim != 5:
        raise ValueError(f"trilinear_upsample input must be 5-d, got {x.data.shape}")
    dtype = x.data.dtype
    mats = []
    for axis, f in ((2, fz), (3, fy), (4, fx)):
        if f == 1:
            mats.append(None)
        else:
            mats.append(_interp_matrix(x.data.shape[axis], x.data.shape[axis] * f, dtype))
    out = x.data
    for axis, m in zip((2, 3, 4), mats):
        if m is not None:
            out = _apply_axis(out, m, axis)

    def backward(g):
        for axis, m in zip((4, 3, 2), reversed(mats)):
            if m is not None:
                g = _apply_axis(g, m.T, axis)
        _accum(x, g)

    return _make(np.ascontiguousarray(out), [x], backward)


# -- verification ---------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x0, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a leaf tensor to a scalar tensor; auxiliary tensors inside
    ``f`` must be created from the leaf's tape. Evaluation runs entirely in
    float64. Steps are scaled per coordinate: h = eps * max(1, |x_i|).
    """
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    tape = Tape(dtype=np.float64)
    x = tape.leaf(x0.copy())
    out = f(x)
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    tape.backward(out)
    analytic = (np.zeros_like(x0) if x.grad is None else x.grad).ravel()

    def evaluate(flat_values: np.ndarray) -> float:
        t = Tape(dtype=np.float64)
        return f(t.leaf(flat_values.reshape(x0.shape))).item()

    flat = x0.ravel()
    worst = 0.0
    for i in range(flat.size):
        h = eps * max(1.0, abs(float(flat[i])))
        bumped = flat.copy()
        bumped[i] += h
        fp = evaluate(bumped)
        bumped[i] -= 2 * h
        fm = evaluate(bumped)
        cd = (fp - fm) / (2.0 * h)
        denom = max(abs(analytic[i]), abs(cd), 1e-6)
        worst = max(worst, abs(analytic[i] - cd) / denom)
    return worst
