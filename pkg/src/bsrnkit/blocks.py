"""Composite layers: convolution decompositions, residual blocks and attention.

Layers are stateless descriptors.  Each one knows three things: which
parameter leaves it owns (``leaves``), how to run them (``forward``), and
what it costs (``plan``).  Parameters themselves live in a flat
``path -> array`` mapping owned by the model; ``ParamView`` binds a trace to
a path prefix so blocks can be nested without threading strings around.

Spatial bookkeeping in ``plan`` uses exact fractions with ratio semantics
for the strided/pooled branch of the spatial attention, so multiply-
accumulate totals scale exactly linearly with output pixel count.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

Hw = tuple[Fraction, Fraction]


class ConvKind(str, Enum):
    STANDARD = "standard"
    DSCONV = "dsconv"
    BSCONV_U = "bsconv_u"
    BSCONV_S = "bsconv_s"


class AttentionMode(str, Enum):
    ESA_CCA = "esa+cca"
    ESA = "esa"
    CCA = "cca"
    ESA_CW = "esa+cw"
    NONE = "none"


@dataclass(frozen=True)
class LeafSpec:
    shape: tuple[int, ...]
    init: str  # "kaiming" | "zeros" | "ones"
    fan_in: int = 0


@dataclass(frozen=True)
class PlanRow:
    """One accounting row: convolution MACs plus informational non-MAC work."""

    path: str
    macs: Fraction
    other: Fraction = Fraction(0)


class ParamView:
    """Prefix-scoped view onto a trace of leaf tensors.

    Also carries the shared list that low-rank convolutions append their
    orthogonality penalties to during a forward pass.
    """

    def __init__(self, trace, prefix: str = "", penalties: list[Tensor] | None = None):
        self._trace = trace
        self.prefix = prefix
        self.penalties = penalties if penalties is not None else []

    def __getitem__(self, rel: str) -> Tensor:
        return self._trace[self.prefix + rel]

    def sub(self, name: str) -> "ParamView":
        return ParamView(self._trace, f"{self.prefix}{name}.", self.penalties)


def _prefixed(prefix: str, rel: str) -> str:
    if not prefix:
        return rel
    return prefix + rel if prefix.endswith(".") else f"{prefix}.{rel}"


def _conv_leaf(cout: int, cin: int, kh: int, kw: int) -> LeafSpec:
    return LeafSpec((cout, cin, kh, kw), "kaiming", fan_in=cin * kh * kw)


def orthogonality_penalty(weight: Tensor) -> Tensor:
    """||A A^T - I||_F^2 for a pointwise weight viewed as an (R, Cin) matrix."""
    r = weight.shape[0]
    a = weight.data.reshape(r, -1)
    gram = a @ a.T - np.eye(r, dtype=a.dtype)
    value = np.asarray((gram * gram).sum(), dtype=a.dtype)

    def vjp(grad: np.ndarray):
        ga = (4.0 * grad) * (gram @ a)
        return [ga.reshape(weight.shape).astype(a.dtype)]

    return T.make_op(value, [weight], vjp)


# ---------------------------------------------------------------------------
# Convolution decompositions
# ---------------------------------------------------------------------------


def bsconv_u(x: Tensor, pw_weight: Tensor, dw_weight: Tensor, bias: Tensor | None,
             *, stride=1, padding=0) -> Tensor:
    """Blueprint separable convolution: 1x1 projection then depthwise."""
    y = T.pointwise_conv2d(x, pw_weight)
    return T.depthwise_conv2d(y, dw_weight, bias, stride=stride, padding=padding)


def dsconv(x: Tensor, dw_weight: Tensor, pw_weight: Tensor, bias: Tensor | None,
           *, stride=1, padding=0) -> Tensor:
    """Depthwise separable convolution: depthwise then 1x1 projection."""
    y = T.depthwise_conv2d(x, dw_weight, None, stride=stride, padding=padding)
    return T.pointwise_conv2d(y, pw_weight, bias)


def bsconv_s(x: Tensor, pwa_weight: Tensor, pwb_weight: Tensor, dw_weight: Tensor,
             bias: Tensor | None, *, stride=1, padding=0) -> tuple[Tensor, Tensor]:
    """Low-rank blueprint convolution; returns (output, orthogonality penalty)."""
    y = T.pointwise_conv2d(x, pwa_weight)
    y = T.pointwise_conv2d(y, pwb_weight)
    y = T.depthwise_conv2d(y, dw_weight, bias, stride=stride, padding=padding)
    return y, orthogonality_penalty(pwa_weight)


def channel_weights(x: Tensor, weights: Tensor) -> Tensor:
    """Learnable per-channel scaling (the lightweight channel-attention stand-in)."""
    return T.scale_channels(x, weights)


class Conv:
    """A convolution site of configurable kind.

    ``kind`` picks the decomposition.  The bias, when enabled, always sits on
    the final stage so every kind exposes one bias of length ``cout``; the
    1x1 projection stages are bias-free.
    """

    def __init__(self, kind: ConvKind, cin: int, cout: int, k: int,
                 *, stride: int = 1, padding: int | None = None, bias: bool = True,
                 lowrank_ratio: float = 0.25):
        self.kind = kind
        self.cin, self.cout, self.k = cin, cout, k
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.bias = bias
        self.rank = max(1, round(lowrank_ratio * cin))

    def leaves(self) -> dict[str, LeafSpec]:
        c_in, c_out, k = self.cin, self.cout, self.k
        out: dict[str, LeafSpec] = {}
        if self.kind is ConvKind.STANDARD:
            out["weight"] = _conv_leaf(c_out, c_in, k, k)
            if self.bias:
                out["bias"] = LeafSpec((c_out,), "zeros")
        elif self.kind is ConvKind.BSCONV_U:
            out["pw.weight"] = _conv_leaf(c_out, c_in, 1, 1)
            out["dw.weight"] = LeafSpec((c_out, 1, k, k), "kaiming", fan_in=k * k)
            if self.bias:
                out["dw.bias"] = LeafSpec((c_out,), "zeros")
        elif self.kind is ConvKind.DSCONV:
            out["dw.weight"] = LeafSpec((c_in, 1, k, k), "kaiming", fan_in=k * k)
            out["pw.weight"] = _conv_leaf(c_out, c_in, 1, 1)
            if self.bias:
                out["pw.bias"] = LeafSpec((c_out,), "zeros")
        elif self.kind is ConvKind.BSCONV_S:
            out["pwa.weight"] = _conv_leaf(self.rank, c_in, 1, 1)
            out["pwb.weight"] = _conv_leaf(c_out, self.rank, 1, 1)
            out["dw.weight"] = LeafSpec((c_out, 1, k, k), "kaiming", fan_in=k * k)
            if self.bias:
                out["dw.bias"] = LeafSpec((c_out,), "zeros")
        else:  # pragma: no cover
            raise ValueError(f"unknown conv kind {self.kind}")
        return out

    def forward(self, p: ParamView, x: Tensor) -> Tensor:
        st, pd = self.stride, self.padding
        if self.kind is ConvKind.STANDARD:
            return T.conv2d(x, p["weight"], p["bias"] if self.bias else None, stride=st, padding=pd)
        if self.kind is ConvKind.BSCONV_U:
            return bsconv_u(x, p["pw.weight"], p["dw.weight"],
                            p["dw.bias"] if self.bias else None, stride=st, padding=pd)
        if self.kind is ConvKind.DSCONV:
            return dsconv(x, p["dw.weight"], p["pw.weight"],
                          p["pw.bias"] if self.bias else None, stride=st, padding=pd)
        y, penalty = bsconv_s(x, p["pwa.weight"], p["pwb.weight"], p["dw.weight"],
                              p["dw.bias"] if self.bias else None, stride=st, padding=pd)
        p.penalties.append(penalty)
        return y

    def out_hw(self, hw: Hw) -> Hw:
        if self.stride == 1 and self.padding == self.k // 2 and self.k % 2 == 1:
            return hw
        # ratio semantics: strided convs in the attention pyramid halve the grid
        return (hw[0] / self.stride, hw[1] / self.stride)

    def plan(self, prefix: str, hw: Hw) -> tuple[list[PlanRow], Hw]:
        out = self.out_hw(hw)
        px = out[0] * out[1]
        k2 = self.k * self.k
        rows: list[PlanRow] = []
        if self.kind is ConvKind.STANDARD:
            rows.append(PlanRow(prefix, k2 * self.cin * self.cout * px))
        elif self.kind is ConvKind.BSCONV_U:
            rows.append(PlanRow(_prefixed(prefix, "pw"), self.cin * self.cout * (hw[0] * hw[1])))
            rows.append(PlanRow(_prefixed(prefix, "dw"), k2 * self.cout * px))
        elif self.kind is ConvKind.DSCONV:
            rows.append(PlanRow(_prefixed(prefix, "dw"), k2 * self.cin * px))
            rows.append(PlanRow(_prefixed(prefix, "pw"), self.cin * self.cout * px))
        else:
            rows.append(PlanRow(_prefixed(prefix, "pwa"), self.cin * self.rank * (hw[0] * hw[1])))
            rows.append(PlanRow(_prefixed(prefix, "pwb"), self.rank * self.cout * (hw[0] * hw[1])))
            rows.append(PlanRow(_prefixed(prefix, "dw"), k2 * self.cout * px))
        return rows, out


class Pointwise:
    """Plain 1x1 convolution site (the layers the architecture pins as 1x1)."""

    def __init__(self, cin: int, cout: int, bias: bool = True):
        self.cin, self.cout, self.bias = cin, cout, bias

    def leaves(self) -> dict[str, LeafSpec]:
        out = {"weight": _conv_leaf(self.cout, self.cin, 1, 1)}
        if self.bias:
            out["bias"] = LeafSpec((self.cout,), "zeros")
        return out

    def forward(self, p: ParamView, x: Tensor) -> Tensor:
        return T.pointwise_conv2d(x, p["weight"], p["bias"] if self.bias else None)

    def plan(self, prefix: str, hw: Hw) -> tuple[list[PlanRow], Hw]:
        return [PlanRow(prefix, self.cin * self.cout * hw[0] * hw[1])], hw


class Bsrb:
    """Blueprint shallow residual block: act(conv(x) + x)."""

    def __init__(self, kind: ConvKind, channels: int, act: Callable[[Tensor], Tensor], k: int = 3):
        self.conv = Conv(kind, channels, channels, k)
        self.act = act

    def leaves(self) -> dict[str, LeafSpec]:
        return self.conv.leaves()

    def forward(self, p: ParamView, x: Tensor) -> Tensor:
        if x.shape[1] != self.conv.cin:
            raise ShapeError(f"bsrb: residual add needs {self.conv.cin} channels, got {x.shape[1]}")
        return self.act(T.add(self.conv.forward(p, x), x))

    def plan(self, prefix: str, hw: Hw) -> tuple[list[PlanRow], Hw]:
        rows, out = self.conv.plan(prefix, hw)
        rows.append(PlanRow(_prefixed(prefix, "residual"), Fraction(0), self.conv.cout * out[0] * out[1]))
        return rows, out


class Esa:
    """Enhanced spatial attention.

    Pipeline: 1x1 reduce -> strided conv -> max pool -> a short group of
    convolutions -> bilinear upsample back -> add the (1x1-projected)
    reduced feature -> 1x1 restore -> sigmoid mask -> gate the input.
    The strided conv and the group use the configured conv decomposition;
    the channel projections stay plain 1x1.
    """

    POOL_KERNEL = 7
    POOL_STRIDE = 3

    def __init__(self, kind: ConvKind, channels: int, reduced: int,
                 act: Callable[[Tensor], Tensor], group_convs: int = 3, embed_skip: bool = True):
        self.channels = channels
        self.reduced = reduced
        self.act = act
        self.group_convs = group_convs
        self.embed_skip = embed_skip
        self.reduce = Pointwise(channels, reduced)
        self.embed = Pointwise(reduced, reduced) if embed_skip else None
        self.down = Conv(kind, reduced, reduced, 3, stride=2, padding=0)
        self.group = [Conv(kind, reduced, reduced, 3) for _ in range(group_convs)]
        self.restore = Pointwise(reduced, channels)

    def min_spatial(self) -> int:
        # strided (k=3, s=2, p=0) output must still fit one pooling window
        return 2 * (self.POOL_KERNEL - 1) + 3

    def leaves(self) -> dict[str, LeafSpec]:
        out = {f"reduce.{k}": v for k, v in self.reduce.leaves().items()}
        if self.embed is not None:
            out.update({f"embed.{k}": v for k, v in self.embed.leaves().items()})
        out.update({f"down.{k}": v for k, v in self.down.leaves().items()})
        for i, conv in enumerate(self.group):
            out.update({f"group{i}.{k}": v for k, v in conv.leaves().items()})
        out.update({f"restore.{k}": v for k, v in self.restore.leaves().items()})
        return out

    def forward(self, p: ParamView, x: Tensor) -> Tensor:
        _, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"esa: expected {self.channels} channels, got {c}")
        if min(h, w) < self.min_spatial():
            raise ShapeError(
                f"esa: spatial size {h}x{w} too small for the pooling pyramid, need >= {self.min_spatial()}"
            )
        reduced = self.reduce.forward(p.sub("reduce"), x)
        d = self.down.forward(p.sub("down"), reduced)
        d = T.max_pool2d(d, self.POOL_KERNEL, self.POOL_STRIDE)
        for i, conv in enumerate(self.group):
            d = conv.forward(p.sub(f"group{i}"), d)
            if i < len(self.group) - 1:
                d = self.act(d)
        d = T.upsample(d, h, w, "bilinear")
        skip = self.embed.forward(p.sub("embed"), reduced) if self.embed is not None else reduced
        mask = T.sigmoid(self.restore.forward(p.sub("restore"), T.add(d, skip)))
        return T.mul(x, mask)

    def plan(self, prefix: str, hw: Hw) -> tuple[list[PlanRow], Hw]:
        rows, _ = self.reduce.plan(_prefixed(prefix, "reduce"), hw)
        r, out = self.down.plan(_prefixed(prefix, "down"), hw)
        rows += r
        pooled = (out[0] / self.POOL_STRIDE, out[1] / self.POOL_STRIDE)
        rows.append(PlanRow(_prefixed(prefix, "pool"), Fraction(0),
                            self.reduced * pooled[0] * pooled[1] * self.POOL_KERNEL ** 2))
        for i, conv in enumerate(self.group):
            r, pooled = conv.plan(_prefixed(prefix, f"group{i}"), pooled)
            rows += r
        rows.append(PlanRow(_prefixed(prefix, "upsample"), Fraction(0),
                            4 * self.reduced * hw[0] * hw[1]))
        if self.embed is not None:
            r, _ = self.embed.plan(_prefixed(prefix, "embed"), hw)
            rows += r
        r, _ = self.restore.plan(_prefixed(prefix, "restore"), hw)
        rows += r
        rows.append(PlanRow(_prefixed(prefix, "gate"), Fraction(0), self.channels * hw[0] * hw[1]))
        return rows, hw


class Cca:
    """Contrast-aware channel attention: gate channels by mean + std statistics."""

    def __init__(self, channels: int, reduction: int = 16):
        self.channels = channels
        self.hidden = max(1, channels // reduction)
        self.down = Pointwise(channels, self.hidden)
        self.up = Pointwise(self.hidden, channels)

    def leaves(self) -> dict[str, LeafSpec]:
        out = {f"down.{k}": v for k, v in self.down.leaves().items()}
        out.update({f"up.{k}": v for k, v in self.up.leaves().items()})
        return out

    def forward(self, p: ParamView, x: Tensor) -> Tensor:
        stat = T.channel_mean_std(x)
        a = T.relu(self.down.forward(p.sub("down"), stat))
        a = T.sigmoid(self.up.forward(p.sub("up"), a))
        return T.scale_by_map(x, a)

    def plan(self, prefix: str, hw: Hw) -> tuple[list[PlanRow], Hw]:
        # the bottleneck convs act on the 1x1 pooled statistic once per image;
        # counting them as MACs would break exact linearity in pixel count for
        # a contribution of ~1e-7 of the total, so they land in `other`
        rows = [PlanRow(_prefixed(prefix, "stat"), Fraction(0), 2 * self.channels * hw[0] * hw[1])]
        rows.append(PlanRow(_prefixed(prefix, "down"), Fraction(0), Fraction(self.channels * self.hidden)))
        rows.append(PlanRow(_prefixed(prefix, "up"), Fraction(0), Fraction(self.hidden * self.channels)))
        rows.append(PlanRow(_prefixed(prefix, "gate"), Fraction(0), self.channels * hw[0] * hw[1]))
        return rows, hw


class ChannelWeights:
    """Per-channel learnable gains replacing channel attention in the small variant."""

    def __init__(self, channels: int):
        self.channels = channels

    def leaves(self) -> dict[str, LeafSpec]:
        return {"weight": LeafSpec((self.channels,), "ones")}

    def forward(self, p: ParamView, x: Tensor) -> Tensor:
        return channel_weights(x, p["weight"])

    def plan(self, prefix: str, hw: Hw) -> tuple[list[PlanRow], Hw]:
        return [PlanRow(_prefixed(prefix, "weight"), Fraction(0), self.channels * hw[0] * hw[1])], hw


class Esdb:
    """Efficient separable distillation block.

    Three distill/refine stages (1x1 distillation + residual refinement),
    a final distillation conv, condensation of the four distilled features
    by a 1x1 conv, then the attention chain and a local residual.
    """

    def __init__(self, kind: ConvKind, channels: int, distilled: int,
                 act: Callable[[Tensor], Tensor], attention: AttentionMode,
                 esa_channels: int, esa_group_convs: int = 3, esa_embed: bool = True,
                 cca_reduction: int = 16):
        self.channels = channels
        self.distilled = distilled
        self.act = act
        self.attention = attention
        self.dl = [Pointwise(channels, distilled) for _ in range(3)]
        self.rl = [Bsrb(kind, channels, act) for _ in range(3)]
        self.dl4 = Conv(kind, channels, distilled, 3)
        self.condense = Pointwise(4 * distilled, channels)
        self.esa = (
            Esa(kind, channels, esa_channels, act, esa_group_convs, esa_embed)
            if attention in (AttentionMode.ESA_CCA, AttentionMode.ESA, AttentionMode.ESA_CW)
            else None
        )
        self.cca = Cca(channels, cca_reduction) if attention in (AttentionMode.ESA_CCA, AttentionMode.CCA) else None
        self.cw = ChannelWeights(channels) if attention is AttentionMode.ESA_CW else None

    def _parts(self) -> list[tuple[str, object]]:
        parts: list[tuple[str, object]] = []
        for i in range(3):
            parts.append((f"dl{i + 1}", self.dl[i]))
            parts.append((f"rl{i + 1}", self.rl[i]))
        parts.append(("dl4", self.dl4))
        parts.append(("condense", self.condense))
        if self.esa is not None:
            parts.append(("esa", self.esa))
        if self.cca is not None:
            parts.append(("cca", self.cca))
        if self.cw is not None:
            parts.append(("cw", self.cw))
        return parts

    def leaves(self) -> dict[str, LeafSpec]:
        out: dict[str, LeafSpec] = {}
        for name, part in self._parts():
            out.update({f"{name}.{k}": v for k, v in part.leaves().items()})
        return out

    def forward(self, p: ParamView, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"esdb: expected {self.channels} channels, got {x.shape[1]}")
        coarse = x
        distilled: list[Tensor] = []
        for i in range(3):
            distilled.append(self.act(self.dl[i].forward(p.sub(f"dl{i + 1}"), coarse)))
            coarse = self.rl[i].forward(p.sub(f"rl{i + 1}"), coarse)
        distilled.append(self.act(self.dl4.forward(p.sub("dl4"), coarse)))
        out = self.act(self.condense.forward(p.sub("condense"), T.concat_channels(distilled)))
        if self.esa is not None:
            out = self.esa.forward(p.sub("esa"), out)
        if self.cca is not None:
            out = self.cca.forward(p.sub("cca"), out)
        if self.cw is not None:
            out = self.cw.forward(p.sub("cw"), out)
        return T.add(out, x)

    def plan(self, prefix: str, hw: Hw) -> tuple[list[PlanRow], Hw]:
        rows: list[PlanRow] = []
        for name, part in self._parts():
            r, _ = part.plan(_prefixed(prefix, name), hw)  # type: ignore[attr-defined]
            rows += r
        rows.append(PlanRow(_prefixed(prefix, "residual"), Fraction(0), self.channels * hw[0] * hw[1]))
        return rows, hw
