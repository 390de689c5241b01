"""Network assembly: configuration, parameter construction, forward pass, checkpoints.

The network has four stages: the input is replicated and concatenated, a
separable convolution lifts it into feature space, a chain of distillation
blocks refines it, then all block outputs are fused (1x1 conv + activation
+ separable refinement), added to the shallow feature over a long skip, and
reconstructed by a standard 3x3 convolution feeding a pixel shuffle.

Parameters live in ``ModelState.leaves`` as a flat, insertion-ordered
``path -> float32 array`` mapping whose schema is fully determined by the
configuration; that is what makes checkpoint validation possible.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Iterator

import numpy as np

from . import tensor as T
from .autodiff import Trace, no_grad
from .blocks import (
    AttentionMode,
    Conv,
    ConvKind,
    Esdb,
    Hw,
    LeafSpec,
    ParamView,
    PlanRow,
    Pointwise,
    _prefixed,
)
from .tensor import ShapeError, Tensor

CHECKPOINT_SCHEMA_VERSION = 1
PRESETS = ("bsrn", "bsrn-s", "bsrn-1", "bsrn-2")


@dataclass(frozen=True)
class ModelConfig:
    """Declarative description of one network variant.

    ``distilled_channels`` and ``esa_channels`` default to C/2 and C/4; the
    small preset keeps the distilled width of the full model (32) while
    shrinking the feature width, which is what lands its parameter count on
    the published figure.
    """

    scale: int
    channels: int = 64
    num_blocks: int = 8
    input_copies: int = 4
    conv_kind: ConvKind = ConvKind.BSCONV_U
    activation: str = "gelu"
    attention: AttentionMode = AttentionMode.ESA_CCA
    distilled_channels: int | None = None
    esa_channels: int | None = None
    esa_group_convs: int = 3
    esa_embed: bool = True
    cca_reduction: int = 16
    lowrank_ratio: float = 0.25
    variant: str = "custom"

    def __post_init__(self):
        if self.scale not in (2, 3, 4):
            raise ValueError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.channels < 1 or self.num_blocks < 0 or self.input_copies < 1:
            raise ValueError("channels and input_copies must be >= 1, num_blocks >= 0")
        if self.activation not in T.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}, choose from {sorted(T.ACTIVATIONS)}")
        if self.distilled < 1 or self.esa_reduced < 1:
            raise ValueError("distilled_channels and esa_channels must resolve to >= 1")

    @property
    def distilled(self) -> int:
        return self.distilled_channels if self.distilled_channels is not None else self.channels // 2

    @property
    def esa_reduced(self) -> int:
        return self.esa_channels if self.esa_channels is not None else self.channels // 4

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["conv_kind"] = self.conv_kind.value
        d["attention"] = self.attention.value
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_kind"] = ConvKind(d["conv_kind"])
        d["attention"] = AttentionMode(d["attention"])
        return ModelConfig(**d)


def preset(name: str, scale: int = 4, **overrides) -> ModelConfig:
    """Named variants; ``overrides`` lets callers tweak any field."""
    key = name.lower().replace("_", "-")
    if key == "bsrn":
        cfg = ModelConfig(scale=scale, variant="bsrn")
    elif key == "bsrn-s":
        cfg = ModelConfig(
            scale=scale,
            channels=48,
            num_blocks=5,
            attention=AttentionMode.ESA_CW,
            distilled_channels=32,
            variant="bsrn-s",
        )
    elif key == "bsrn-1":
        cfg = ModelConfig(scale=scale, channels=48, num_blocks=8, variant="bsrn-1")
    elif key == "bsrn-2":
        cfg = ModelConfig(scale=scale, channels=72, num_blocks=8, variant="bsrn-2")
    else:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    return replace(cfg, **overrides) if overrides else cfg


class BsrnNet:
    """Structure object derived from a config: layers, paths, costs. No parameters."""

    def __init__(self, config: ModelConfig):
        self.config = config
        c, kind = config.channels, config.conv_kind
        act = T.ACTIVATIONS[config.activation]
        self.act = act
        self.shallow = Conv(kind, 3 * config.input_copies, c, 3, lowrank_ratio=config.lowrank_ratio)
        self.body = [
            Esdb(
                kind,
                c,
                config.distilled,
                act,
                config.attention,
                esa_channels=config.esa_reduced,
                esa_group_convs=config.esa_group_convs,
                esa_embed=config.esa_embed,
                cca_reduction=config.cca_reduction,
            )
            for _ in range(config.num_blocks)
        ]
        fused_in = c * config.num_blocks if config.num_blocks > 0 else c
        self.collect = Pointwise(fused_in, c)
        self.refine = Conv(kind, c, c, 3, lowrank_ratio=config.lowrank_ratio)
        self.recon = Conv(ConvKind.STANDARD, c, 3 * config.scale**2, 3)

    def _parts(self) -> Iterator[tuple[str, object]]:
        yield "shallow", self.shallow
        for i, block in enumerate(self.body):
            yield f"body.{i}", block
        yield "fusion.collect", self.collect
        yield "fusion.refine", self.refine
        yield "recon", self.recon

    def leaf_specs(self) -> dict[str, LeafSpec]:
        out: dict[str, LeafSpec] = {}
        for prefix, part in self._parts():
            out.update({f"{prefix}.{k}": v for k, v in part.leaves().items()})  # type: ignore[attr-defined]
        return out

    def forward(self, p: ParamView, x: Tensor) -> Tensor:
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"forward: expected (N, 3, h, w) input, got {x.shape}")
        rep = T.concat_channels([x] * cfg.input_copies)
        f0 = self.shallow.forward(p.sub("shallow"), rep)
        feats = []
        cur = f0
        for i, block in enumerate(self.body):
            try:
                cur = block.forward(p.sub(f"body.{i}"), cur)
            except ShapeError as e:
                raise ShapeError(f"body.{i}: {e}") from None
            feats.append(cur)
        fused_in = T.concat_channels(feats) if feats else f0
        fused = self.act(self.collect.forward(p.sub("fusion.collect"), fused_in))
        fused = self.refine.forward(p.sub("fusion.refine"), fused)
        pre = self.recon.forward(p.sub("recon"), T.add(fused, f0))
        return T.pixel_shuffle(pre, cfg.scale)

    def plan(self, lr_hw: Hw) -> list[PlanRow]:
        rows: list[PlanRow] = []
        for prefix, part in self._parts():
            r, _ = part.plan(prefix, lr_hw)  # type: ignore[attr-defined]
            rows += r
        px = lr_hw[0] * lr_hw[1]
        rows.append(PlanRow("fusion.skip", Fraction(0), self.config.channels * px))
        rows.append(PlanRow("upscale", Fraction(0), 3 * self.config.scale**2 * px))
        return rows


@dataclass
class ModelState:
    """A config plus its materialized float32 parameter leaves."""

    config: ModelConfig
    leaves: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def param_count(self) -> int:
        return sum(a.size for a in self.leaves.values())


def build(config: ModelConfig, init_seed: int = 0) -> ModelState:
    """Materialize all leaves for a config; deterministic in ``init_seed``.

    Convolution weights use uniform fan-in (Kaiming-style) initialization,
    biases start at zero and channel gains at one.
    """
    net = BsrnNet(config)
    rng = np.random.default_rng(init_seed)
    leaves: dict[str, np.ndarray] = {}
    for path, spec in net.leaf_specs().items():
        if spec.init == "kaiming":
            bound = float(1.0 / np.sqrt(spec.fan_in))
            leaves[path] = rng.uniform(-bound, bound, size=spec.shape).astype(np.float32)
        elif spec.init == "zeros":
            leaves[path] = np.zeros(spec.shape, dtype=np.float32)
        elif spec.init == "ones":
            leaves[path] = np.ones(spec.shape, dtype=np.float32)
        else:  # pragma: no cover
            raise ValueError(f"unknown init {spec.init!r}")
    return ModelState(config=config, leaves=leaves)


def forward(state: ModelState, lr: np.ndarray) -> np.ndarray:
    """Inference pass on an (N, 3, h, w) float array in [0, 1]."""
    net = BsrnNet(state.config)
    x = np.asarray(lr, dtype=np.float32)
    with no_grad():
        trace = Trace(state.leaves)
        out = net.forward(ParamView(trace), Tensor(x))
    return out.data


# ---------------------------------------------------------------------------
# Checkpoints: directory of manifest.json + params.bin (little-endian float32)
# ---------------------------------------------------------------------------


def save_checkpoint(state: ModelState, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    table = []
    offset = 0
    chunks = []
    for leaf_path, arr in state.leaves.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        table.append({"path": leaf_path, "shape": list(a.shape), "dtype": "float32", "offset": offset})
        offset += a.nbytes
        chunks.append(a.tobytes())
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": state.config.to_json_dict(),
        "leaves": table,
    }
    _atomic_write(os.path.join(path, "params.bin"), b"".join(chunks))
    _atomic_write(os.path.join(path, "manifest.json"), json.dumps(manifest, indent=1).encode())


def load_checkpoint(path: str) -> ModelState:
    """Load and validate a checkpoint directory against its own config schema."""
    with open(os.path.join(path, "manifest.json"), "rb") as fh:
        manifest = json.load(fh)
    version = manifest.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema version {version!r}")
    config = ModelConfig.from_json_dict(manifest["config"])
    expected = BsrnNet(config).leaf_specs()
    raw = np.fromfile(os.path.join(path, "params.bin"), dtype="<f4")
    leaves: dict[str, np.ndarray] = {}
    seen = set()
    for entry in manifest["leaves"]:
        leaf_path, shape, offset = entry["path"], tuple(entry["shape"]), entry["offset"]
        spec = expected.get(leaf_path)
        if spec is None:
            raise ValueError(f"checkpoint leaf {leaf_path!r} not part of the config schema")
        if shape != spec.shape:
            raise ValueError(f"checkpoint leaf {leaf_path!r} has shape {shape}, config expects {spec.shape}")
        n = int(np.prod(shape)) if shape else 1
        start = offset // 4
        if offset % 4 or start + n > raw.size:
            raise ValueError(f"checkpoint leaf {leaf_path!r} offset/size out of bounds")
        leaves[leaf_path] = raw[start : start + n].reshape(shape).copy()
        seen.add(leaf_path)
    for leaf_path in expected:
        if leaf_path not in seen:
            raise ValueError(f"checkpoint is missing leaf {leaf_path!r}")
    return ModelState(config=config, leaves=leaves)


def validate_against(state: ModelState, config: ModelConfig) -> None:
    """Reject a state whose schema does not match ``config`` (first offender named)."""
    expected = BsrnNet(config).leaf_specs()
    for leaf_path, spec in expected.items():
        arr = state.leaves.get(leaf_path)
        if arr is None:
            raise ValueError(f"state is missing leaf {leaf_path!r}")
        if tuple(arr.shape) != spec.shape:
            raise ValueError(f"leaf {leaf_path!r} has shape {tuple(arr.shape)}, config expects {spec.shape}")
    for leaf_path in state.leaves:
        if leaf_path not in expected:
            raise ValueError(f"state has unexpected leaf {leaf_path!r}")


def _atomic_write(path: str, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
