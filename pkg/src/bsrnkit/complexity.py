"""Static parameter and multiply-accumulate accounting for any model config.

Multi-Adds follow the convention of efficient-SR complexity tables: one MAC
per multiply-accumulate, convolution layers only, evaluated at the low-res
grid implied by a stated ground-truth resolution.  Pooling, interpolation,
activations and elementwise gating are tracked separately in an
informational ``other`` column and never enter the Multi-Adds total.

Spatial sizes inside the attention pyramid use exact downsampling ratios
(Fractions), so the total scales exactly linearly with output pixel count;
at benchmark resolutions this differs from integer-rounded sizes by well
under a tenth of a percent.  The ground-truth size does not need to be
divisible by the scale (the x3 tables are stated at 1280x720).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .model import BsrnNet, ModelConfig

DEFAULT_GT = (720, 1280)


@dataclass(frozen=True)
class LayerCost:
    path: str
    params: int
    macs: int
    other: int


@dataclass(frozen=True)
class ComplexityReport:
    config: ModelConfig
    gt_hw: tuple[int, int]
    params: int
    multi_adds: int
    other_ops: int
    rows: tuple[LayerCost, ...]


def count_params(config: ModelConfig) -> int:
    """Total weight + bias elements; equals the built model's element count."""
    net = BsrnNet(config)
    total = 0
    for spec in net.leaf_specs().values():
        n = 1
        for d in spec.shape:
            n *= d
        total += n
    return total


def count_multi_adds(config: ModelConfig, gt_h: int = DEFAULT_GT[0], gt_w: int = DEFAULT_GT[1]) -> int:
    """Convolution MACs for one forward pass at the stated GT resolution."""
    return report(config, gt_h, gt_w).multi_adds


def report(config: ModelConfig, gt_h: int = DEFAULT_GT[0], gt_w: int = DEFAULT_GT[1]) -> ComplexityReport:
    if gt_h < 1 or gt_w < 1:
        raise ValueError(f"GT resolution {gt_h}x{gt_w} must be >= 1")
    net = BsrnNet(config)
    lr_hw = (Fraction(gt_h, config.scale), Fraction(gt_w, config.scale))
    plan_rows = net.plan(lr_hw)

    # Group leaf parameter counts under the deepest plan row that prefixes them.
    specs = net.leaf_specs()
    row_paths = sorted((r.path for r in plan_rows), key=len, reverse=True)
    params_for: dict[str, int] = {p: 0 for p in row_paths}
    for leaf_path, spec in specs.items():
        n = 1
        for d in spec.shape:
            n *= d
        for rp in row_paths:
            if leaf_path == rp or leaf_path.startswith(rp + "."):
                params_for[rp] += n
                break
        else:  # pragma: no cover - every leaf sits under some plan row
            raise AssertionError(f"leaf {leaf_path} not covered by the plan")

    rows = tuple(
        LayerCost(r.path, params_for.get(r.path, 0), int(round(r.macs)), int(round(r.other)))
        for r in plan_rows
    )
    return ComplexityReport(
        config=config,
        gt_hw=(gt_h, gt_w),
        params=sum(r.params for r in rows),
        multi_adds=sum(r.macs for r in rows),
        other_ops=sum(r.other for r in rows),
        rows=rows,
    )


def render_table(rep: ComplexityReport, breakdown: bool = False) -> str:
    """Text table mirroring the Params[K] / Multi-Adds[G] complexity columns."""
    cfg = rep.config
    name = cfg.variant if cfg.variant != "custom" else "custom"
    lines = [
        f"{'Model':<12} {'Scale':<6} {'GT':<10} {'Params[K]':>10} {'Multi-Adds[G]':>14}",
        f"{name:<12} x{cfg.scale:<5} {rep.gt_hw[1]}x{rep.gt_hw[0]:<5} "
        f"{rep.params / 1e3:>10.2f} {rep.multi_adds / 1e9:>14.3f}",
    ]
    if breakdown:
        lines.append("")
        lines.append(f"{'layer':<28} {'params':>10} {'macs':>14} {'other':>12}")
        for row in rep.rows:
            lines.append(f"{row.path:<28} {row.params:>10} {row.macs:>14} {row.other:>12}")
        lines.append(f"{'total':<28} {rep.params:>10} {rep.multi_adds:>14} {rep.other_ops:>12}")
    return "\n".join(lines)


def report_json_dict(rep: ComplexityReport) -> dict:
    return {
        "config": rep.config.to_json_dict(),
        "gt": {"height": rep.gt_hw[0], "width": rep.gt_hw[1]},
        "params": rep.params,
        "params_k": round(rep.params / 1e3, 3),
        "multi_adds": rep.multi_adds,
        "multi_adds_g": round(rep.multi_adds / 1e9, 4),
        "other_ops": rep.other_ops,
        "layers": [
            {"path": r.path, "params": r.params, "macs": r.macs, "other": r.other} for r in rep.rows
        ],
    }
