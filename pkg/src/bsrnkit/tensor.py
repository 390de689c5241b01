"""Dense NCHW tensor type and the numeric kernels the network blocks compose.

Every operation is a pure function: it validates shapes, computes a fresh
numpy array and (while gradient recording is enabled) attaches a
vector-Jacobian closure so :mod:`bsrnkit.autodiff` can replay the graph
backwards.  Tensors are treated as immutable values; kernels never write
into their inputs.

Only float32 and float64 are supported.  Mixing the two in one op is an
error: the double-precision path exists for finite-difference gradient
checks and silently promoting would mask precision bugs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Tensor",
    "ConvGeometry",
    "conv2d",
    "depthwise_conv2d",
    "pointwise_conv2d",
    "max_pool2d",
    "upsample",
    "pixel_shuffle",
    "pixel_unshuffle",
    "relu",
    "leaky_relu",
    "gelu",
    "h_swish",
    "sigmoid",
    "concat_channels",
    "add",
    "sub",
    "mul",
    "neg",
    "abs_",
    "scale",
    "sum_all",
    "mean_all",
    "scale_channels",
    "scale_by_map",
    "channel_mean_std",
]

_FLOAT_DTYPES = (np.float32, np.float64)

# Module-level switch; autodiff.no_grad() flips it to skip building closures.
_grad_enabled = True

# When set to a list, kinked ops append (name, payload) records here so the
# gradient-check harness can screen inputs that sit too close to a kink.
_op_watch: list | None = None


class ShapeError(ValueError):
    """Raised when an operation rejects its inputs, naming the offending dimension."""


class Tensor:
    """Immutable dense array node.

    ``data`` is the numpy value, ``parents``/``vjp`` record how it was
    produced.  ``vjp(grad)`` returns one gradient array per parent.
    Feature maps are 4-D (N, C, H, W); weights, biases and scalar losses
    use whatever rank suits them.
    """

    __slots__ = ("data", "parents", "vjp")

    def __init__(self, data, parents: tuple = (), vjp: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def make_op(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result, attaching the backward closure only while recording."""
    if _grad_enabled:
        return Tensor(data, tuple(parents), vjp)
    return Tensor(data)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return Tensor(arr)


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class ConvGeometry:
    """Kernel/stride/padding/groups bundle with the output-size arithmetic."""

    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1

    def __post_init__(self):
        for name in ("kernel", "stride", "padding"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ShapeError(f"conv geometry: kernel {self.kernel} and stride {self.stride} must be >= 1")
        if min(self.padding) < 0 or self.groups < 1:
            raise ShapeError(f"conv geometry: padding {self.padding} and groups {self.groups} must be >= 0/1")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if h + 2 * ph < kh or w + 2 * pw < kw or oh < 1 or ow < 1:
            raise ShapeError(
                f"conv geometry: output size {oh}x{ow} for input {h}x{w}, "
                f"kernel {self.kernel}, stride {self.stride}, padding {self.padding}"
            )
        return oh, ow


def _require_nchw(op: str, t: Tensor) -> tuple[int, int, int, int]:
    if t.data.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D NCHW tensor, got {t.data.ndim}-D shape {t.shape}")
    return t.shape  # type: ignore[return-value]


def _window_view(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    """Read-only (N, C, kh, kw, oh, ow) window view of a padded NCHW array."""
    n, c, _, _ = xp.shape
    sn, sc, sh_, sw_ = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh_, sw_, sh_ * sh, sw_ * sw),
        writeable=False,
    )


def _pad_nchw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(x: np.ndarray, geom: ConvGeometry, oh: int, ow: int) -> np.ndarray:
    """(N, G, Cg*kh*kw, oh*ow) patch matrix for grouped convolution."""
    n, c = x.shape[:2]
    (kh, kw), (sh, sw), (ph, pw) = geom.kernel, geom.stride, geom.padding
    xp = _pad_nchw(x, ph, pw)
    view = _window_view(xp, kh, kw, sh, sw, oh, ow)
    g = geom.groups
    cols = view.reshape(n, g, (c // g) * kh * kw, oh * ow)  # copies: view is strided
    return cols


def _col_fold(gcols: np.ndarray, x_shape, geom: ConvGeometry, oh: int, ow: int) -> np.ndarray:
    """Transpose of _im2col: scatter-add patch gradients back onto the input grid."""
    n, c, h, w = x_shape
    (kh, kw), (sh, sw), (ph, pw) = geom.kernel, geom.stride, geom.padding
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=gcols.dtype)
    gc = gcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += gc[:, :, i, j]
    if ph or pw:
        gxp = gxp[:, :, ph : ph + h, pw : pw + w]
    return gxp


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    *,
    stride=1,
    padding=0,
    groups: int = 1,
    geom: ConvGeometry | None = None,
) -> Tensor:
    """2-D cross-correlation of an NCHW tensor with an OIHW weight.

    ``weight`` has shape (Cout, Cin/groups, kh, kw); ``bias``, when given, is
    a length-Cout vector added per output channel.  Output spatial size
    follows ``floor((H + 2p - k)/s) + 1`` per axis.
    """
    n, c, h, w = _require_nchw("conv2d", x)
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D (Cout, Cin/groups, kh, kw), got {weight.shape}")
    cout, cin_g, kh, kw = weight.shape
    if geom is None:
        geom = ConvGeometry(kernel=(kh, kw), stride=_pair(stride), padding=_pair(padding), groups=groups)
    if geom.kernel != (kh, kw):
        raise ShapeError(f"conv2d: geometry kernel {geom.kernel} does not match weight kernel {(kh, kw)}")
    g = geom.groups
    if c % g != 0:
        raise ShapeError(f"conv2d: input channels {c} not divisible by groups {g}")
    if cout % g != 0:
        raise ShapeError(f"conv2d: output channels {cout} not divisible by groups {g}")
    if cin_g != c // g:
        raise ShapeError(f"conv2d: weight expects {cin_g} input channels per group, input supplies {c // g}")
    operands = [x, weight] + ([bias] if bias is not None else [])
    _check_same_dtype("conv2d", *operands)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} must be ({cout},)")
    oh, ow = geom.out_hw(h, w)

    cols = _im2col(x.data, geom, oh, ow)  # (N, G, K, L)
    wm = weight.data.reshape(g, cout // g, cin_g * kh * kw)  # (G, Og, K)
    y = np.matmul(wm[None], cols)  # (N, G, Og, L)
    y = y.reshape(n, cout, oh, ow)
    if bias is not None:
        y = y + bias.data.reshape(1, cout, 1, 1)

    def vjp(grad: np.ndarray):
        go = grad.reshape(n, g, cout // g, oh * ow)
        gcols = np.matmul(wm.transpose(0, 2, 1)[None], go)  # (N, G, K, L)
        gx = _col_fold(gcols, x.data.shape, geom, oh, ow)
        cols_b = _im2col(x.data, geom, oh, ow)  # recompute: cheaper than holding it
        gw = np.matmul(go, cols_b.transpose(0, 1, 3, 2)).sum(axis=0)  # (G, Og, K)
        grads = [gx, gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return grads

    return make_op(np.ascontiguousarray(y), operands, vjp)


def depthwise_conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    *,
    stride=1,
    padding=0,
) -> Tensor:
    """Per-channel convolution: weight (C, 1, kh, kw), groups fixed to C."""
    _, c, _, _ = _require_nchw("depthwise_conv2d", x)
    if weight.data.ndim != 4 or weight.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: weight must be (C, 1, kh, kw), got {weight.shape}")
    if weight.shape[0] != c:
        raise ShapeError(f"depthwise_conv2d: weight covers {weight.shape[0]} channels, input has {c}")
    return conv2d(x, weight, bias, stride=stride, padding=padding, groups=c)


def pointwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution (channel mixing), stride 1, no padding."""
    if weight.data.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise_conv2d: weight must be (Cout, Cin, 1, 1), got {weight.shape}")
    return conv2d(x, weight, bias, stride=1, padding=0, groups=1)


def max_pool2d(x: Tensor, kernel, stride) -> Tensor:
    """Strided max pooling without padding.

    Gradient flows to the first maximal element of each window in row-major
    scan order, which keeps backward passes deterministic on ties.
    """
    n, c, h, w = _require_nchw("max_pool2d", x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    if kh > h or kw > w:
        raise ShapeError(f"max_pool2d: window {kh}x{kw} larger than input {h}x{w}")
    if _op_watch is not None:
        _op_watch.append(("max_pool2d", (x.data, (kh, kw), (sh, sw))))
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    view = _window_view(x.data, kh, kw, sh, sw, oh, ow)
    flat = view.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, oh, ow, kh * kw)
    idx = flat.argmax(axis=4)
    y = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]

    def vjp(grad: np.ndarray):
        ho = np.arange(oh).reshape(1, 1, oh, 1)
        wo = np.arange(ow).reshape(1, 1, 1, ow)
        hi = ho * sh + idx // kw
        wi = wo * sw + idx % kw
        nn = np.arange(n).reshape(n, 1, 1, 1)
        cc = np.arange(c).reshape(1, c, 1, 1)
        lin = ((nn * c + cc) * h + hi) * w + wi
        gx = np.zeros(n * c * h * w, dtype=grad.dtype)
        np.add.at(gx, lin.ravel(), grad.ravel())
        return [gx.reshape(n, c, h, w)]

    return make_op(np.ascontiguousarray(y), [x], vjp)


@lru_cache(maxsize=256)
def _resample_matrix(src: int, dst: int, mode: str) -> np.ndarray:
    """(dst, src) interpolation matrix for one axis; rows sum to 1."""
    m = np.zeros((dst, src))
    if mode == "nearest":
        idx = np.minimum((np.arange(dst) * src) // dst, src - 1)
        m[np.arange(dst), idx] = 1.0
    elif mode == "bilinear":
        u = (np.arange(dst) + 0.5) * (src / dst) - 0.5
        i0 = np.floor(u).astype(int)
        t = u - i0
        lo = np.clip(i0, 0, src - 1)
        hi = np.clip(i0 + 1, 0, src - 1)
        np.add.at(m, (np.arange(dst), lo), 1.0 - t)
        np.add.at(m, (np.arange(dst), hi), t)
    else:
        raise ShapeError(f"upsample: unknown mode {mode!r}")
    return m


def upsample(x: Tensor, target_h: int, target_w: int, mode: str = "bilinear") -> Tensor:
    """Resample to (target_h, target_w); bilinear uses half-pixel centers."""
    n, c, h, w = _require_nchw("upsample", x)
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"upsample: target {target_h}x{target_w} must be >= 1")
    rh = _resample_matrix(h, target_h, mode).astype(x.data.dtype)
    rw = _resample_matrix(w, target_w, mode).astype(x.data.dtype)
    y = np.einsum("ij,ncjk,lk->ncil", rh, x.data, rw, optimize=True)

    def vjp(grad: np.ndarray):
        gx = np.einsum("ij,ncik,kl->ncjl", rh, grad, rw, optimize=True)
        return [gx]

    return make_op(np.ascontiguousarray(y), [x], vjp)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (N, C*r^2, H, W) into (N, C, H*r, W*r).

    out[n, c, h*r + i, w*r + j] = in[n, c*r^2 + i*r + j, h, w].
    """
    n, c, h, w = _require_nchw("pixel_shuffle", x)
    if r < 1:
        raise ShapeError(f"pixel_shuffle: factor {r} must be >= 1")
    if c % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: channels {c} not divisible by r^2={r * r}")
    co = c // (r * r)
    y = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)

    def vjp(grad: np.ndarray):
        g = grad.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w)
        return [g]

    return make_op(np.ascontiguousarray(y), [x], vjp)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    n, c, h, w = _require_nchw("pixel_unshuffle", x)
    if h % r != 0 or w % r != 0:
        raise ShapeError(f"pixel_unshuffle: spatial {h}x{w} not divisible by {r}")
    ho, wo = h // r, w // r
    y = x.data.reshape(n, c, ho, r, wo, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, ho, wo)

    def vjp(grad: np.ndarray):
        g = grad.reshape(n, c, r, r, ho, wo).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h, w)
        return [g]

    return make_op(np.ascontiguousarray(y), [x], vjp)


# ---------------------------------------------------------------------------
# Elementwise activations
# ---------------------------------------------------------------------------

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _elementwise(x: Tensor, y: np.ndarray, dydx: Callable[[], np.ndarray]) -> Tensor:
    def vjp(grad: np.ndarray):
        return [grad * dydx()]

    return make_op(y, [x], vjp)


def relu(x: Tensor) -> Tensor:
    d = x.data
    if _op_watch is not None:
        _op_watch.append(("relu", d))
    return _elementwise(x, np.maximum(d, 0), lambda: (d > 0).astype(d.dtype))


def leaky_relu(x: Tensor, slope: float = 0.05) -> Tensor:
    d = x.data
    y = np.where(d > 0, d, slope * d)
    return _elementwise(x, y.astype(d.dtype), lambda: np.where(d > 0, 1.0, slope).astype(d.dtype))


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form x * Phi(x) (no tanh approximation)."""
    d = x.data
    phi = 0.5 * (1.0 + erf(d / _SQRT2))
    y = (d * phi).astype(d.dtype)
    return _elementwise(
        x, y, lambda: (phi + d * _INV_SQRT_2PI * np.exp(-0.5 * d * d)).astype(d.dtype)
    )


def h_swish(x: Tensor) -> Tensor:
    """x * clamp(x + 3, 0, 6) / 6."""
    d = x.data
    y = (d * np.clip(d + 3.0, 0.0, 6.0) / 6.0).astype(d.dtype)

    def deriv():
        g = np.where(d <= -3.0, 0.0, np.where(d >= 3.0, 1.0, (2.0 * d + 3.0) / 6.0))
        return g.astype(d.dtype)

    return _elementwise(x, y, deriv)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ed = np.exp(d[~pos])
    y[~pos] = ed / (1.0 + ed)
    # keep the output strictly inside (0, 1) even where exp underflows
    fi = np.finfo(d.dtype)
    np.clip(y, fi.tiny, 1.0 - fi.epsneg, out=y)
    return _elementwise(x, y, lambda: (y * (1.0 - y)).astype(d.dtype))


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "gelu": gelu,
    "h_swish": h_swish,
    "sigmoid": sigmoid,
}


# ---------------------------------------------------------------------------
# Structural / arithmetic ops
# ---------------------------------------------------------------------------


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; N, H, W must agree."""
    if not tensors:
        raise ShapeError("concat_channels: need at least one tensor")
    shapes = [_require_nchw("concat_channels", t) for t in tensors]
    n, _, h, w = shapes[0]
    for s in shapes[1:]:
        if (s[0], s[2], s[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: incompatible shapes {shapes}")
    _check_same_dtype("concat_channels", *tensors)
    y = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([s[1] for s in shapes])[:-1]

    def vjp(grad: np.ndarray):
        return list(np.split(grad, splits, axis=1))

    return make_op(y, list(tensors), vjp)


def _binary(op: str, a: Tensor, b: Tensor) -> None:
    _check_same_dtype(op, a, b)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary("add", a, b)
    return make_op(a.data + b.data, [a, b], lambda g: [g, g])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary("sub", a, b)
    return make_op(a.data - b.data, [a, b], lambda g: [g, -g])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary("mul", a, b)
    return make_op(a.data * b.data, [a, b], lambda g: [g * b.data, g * a.data])


def neg(x: Tensor) -> Tensor:
    return make_op(-x.data, [x], lambda g: [-g])


def abs_(x: Tensor) -> Tensor:
    d = x.data
    return make_op(np.abs(d), [x], lambda g: [g * np.sign(d)])  # subgradient 0 at 0


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.data.dtype.type(factor)
    return make_op(x.data * f, [x], lambda g: [g * f])


def sum_all(x: Tensor) -> Tensor:
    d = x.data
    return make_op(d.sum(), [x], lambda g: [np.broadcast_to(g, d.shape).astype(d.dtype)])


def mean_all(x: Tensor) -> Tensor:
    d = x.data
    inv = 1.0 / d.size
    return make_op(
        np.asarray(d.mean(), dtype=d.dtype),
        [x],
        lambda g: [np.broadcast_to(g * inv, d.shape).astype(d.dtype)],
    )


def scale_channels(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply channel c of x by weights[c]."""
    _, c, _, _ = _require_nchw("scale_channels", x)
    if weights.data.ndim != 1 or weights.shape[0] != c:
        raise ShapeError(f"scale_channels: weight length {weights.shape} must be ({c},)")
    _check_same_dtype("scale_channels", x, weights)
    wcol = weights.data.reshape(1, c, 1, 1)
    y = x.data * wcol

    def vjp(grad: np.ndarray):
        return [grad * wcol, (grad * x.data).sum(axis=(0, 2, 3))]

    return make_op(y, [x, weights], vjp)


def scale_by_map(x: Tensor, att: Tensor) -> Tensor:
    """Multiply x by a per-(sample, channel) map of shape (N, C, 1, 1)."""
    n, c, _, _ = _require_nchw("scale_by_map", x)
    if att.shape != (n, c, 1, 1):
        raise ShapeError(f"scale_by_map: map shape {att.shape} must be ({n}, {c}, 1, 1)")
    _check_same_dtype("scale_by_map", x, att)
    y = x.data * att.data

    def vjp(grad: np.ndarray):
        return [grad * att.data, (grad * x.data).sum(axis=(2, 3), keepdims=True)]

    return make_op(y, [x, att], vjp)


def channel_mean_std(x: Tensor) -> Tensor:
    """Per-channel contrast statistic mean + population std, shape (N, C, 1, 1).

    The std term uses the population variance (divide by H*W).  Its gradient
    at a perfectly constant channel is taken as 0.
    """
    n, c, h, w = _require_nchw("channel_mean_std", x)
    d = x.data
    mu = d.mean(axis=(2, 3), keepdims=True)
    centered = d - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    std = np.sqrt(var)
    y = (mu + std).astype(d.dtype)

    def vjp(grad: np.ndarray):
        inv_hw = 1.0 / (h * w)
        safe = np.where(std > 0, std, 1.0)
        dstd = np.where(std > 0, centered / safe * inv_hw, 0.0)
        return [(grad * (inv_hw + dstd)).astype(d.dtype)]

    return make_op(y, [x], vjp)
