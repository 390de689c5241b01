"""Desk-scale optimization: L1 loss, Adam, cosine decay, dihedral augmentation.

The full-scale recipe (batch 64, 48x48 LR patches, 1e6 iterations) is
encoded in the defaults, but the loop is built to be driven at toy scale:
a few thousand iterations on one image is enough to validate the whole
differentiation and update path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .autodiff import Trace, backward
from .blocks import ParamView
from .model import BsrnNet, ModelState
from .tensor import ShapeError, Tensor


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the message names the first offending leaf gradient."""


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int
    batch_size: int = 64
    lr0: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patch_size: int = 48  # LR-side patch edge
    seed: int = 0
    ortho_weight: float = 0.0  # adds the low-rank conv penalty to the loss when > 0
    log_every: int = 50


@dataclass
class OptimizerState:
    """Adam moments per leaf plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_optimizer(leaves: dict[str, np.ndarray]) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(a) for k, a in leaves.items()},
        v={k: np.zeros_like(a) for k, a in leaves.items()},
    )


def l1_loss(sr: Tensor, hr: Tensor) -> Tensor:
    """Mean absolute difference over all elements (subgradient 0 at zero)."""
    if sr.shape != hr.shape:
        raise ShapeError(f"l1_loss: shapes {sr.shape} and {hr.shape} differ")
    return T.mean_all(T.abs_(T.sub(sr, hr)))


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """lr(t) = lr0/2 * (1 + cos(pi t / total)), decaying to 0 at t = total."""
    if not 0 <= t <= total:
        raise ValueError(f"cosine_lr: iteration {t} outside [0, {total}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total))


def adam_step(
    opt: OptimizerState,
    leaves: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update; returns fresh leaves and state."""
    b1, b2 = betas
    t = opt.step + 1
    new_leaves: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for path, w in leaves.items():
        g = grads.get(path)
        if g is None:
            raise ValueError(f"adam_step: missing gradient for leaf {path!r}")
        g = g.astype(w.dtype, copy=False)
        m = b1 * opt.m[path] + (1.0 - b1) * g
        v = b2 * opt.v[path] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_leaves[path] = w - (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(w.dtype)
        new_m[path] = m
        new_v[path] = v
    return new_leaves, OptimizerState(m=new_m, v=new_v, step=t)


def augment(lr_patch: np.ndarray, hr_patch: np.ndarray, code: int) -> tuple[np.ndarray, np.ndarray]:
    """Apply dihedral transform ``code`` (0..7) to an aligned (H, W, C) pair.

    Bit 0 flips horizontally, the upper bits rotate by that many quarter
    turns; code 0 is the identity.
    """
    if not 0 <= code <= 7:
        raise ValueError(f"augment: code {code} outside 0..7")

    def apply(a: np.ndarray) -> np.ndarray:
        if code & 1:
            a = a[:, ::-1]
        return np.rot90(a, k=code >> 1, axes=(0, 1))

    return apply(lr_patch), apply(hr_patch)


def sample_patch(
    lr_img: np.ndarray,
    hr_img: np.ndarray,
    scale: int,
    size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Random aligned crop: (size x size) from LR, (scale*size)^2 from HR."""
    lh, lw = lr_img.shape[:2]
    hh, hw = hr_img.shape[:2]
    if (hh, hw) != (lh * scale, lw * scale):
        raise ValueError(f"sample_patch: HR {hh}x{hw} is not {scale}x the LR {lh}x{lw}")
    if lh < size or lw < size:
        raise ValueError(f"sample_patch: LR image {lh}x{lw} smaller than patch {size}")
    y = int(rng.integers(0, lh - size + 1))
    x = int(rng.integers(0, lw - size + 1))
    lr_patch = lr_img[y : y + size, x : x + size]
    hr_patch = hr_img[y * scale : (y + size) * scale, x * scale : (x + size) * scale]
    return lr_patch, hr_patch


def _batch(
    images: Sequence[tuple[np.ndarray, np.ndarray]],
    scale: int,
    size: int,
    batch: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    lrs, hrs = [], []
    for _ in range(batch):
        lr_img, hr_img = images[int(rng.integers(0, len(images)))]
        lp, hp = sample_patch(lr_img, hr_img, scale, size, rng)
        lp, hp = augment(lp, hp, int(rng.integers(0, 8)))
        lrs.append(lp.transpose(2, 0, 1))
        hrs.append(hp.transpose(2, 0, 1))
    return (
        np.ascontiguousarray(np.stack(lrs), dtype=np.float32),
        np.ascontiguousarray(np.stack(hrs), dtype=np.float32),
    )


def train_loop(
    state: ModelState,
    images: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    on_log: Callable[[int, float, float], None] | None = None,
) -> tuple[ModelState, list[tuple[int, float, float]]]:
    """Optimize ``state`` on (lr, hr) float image pairs in [0, 1], HWC layout.

    Deterministic for a fixed seed.  Returns the trained state and the loss
    trace as (iteration, learning rate, loss) rows sampled every
    ``log_every`` iterations (plus the final one).
    """
    if not images:
        raise ValueError("train_loop: need at least one (lr, hr) image pair")
    net = BsrnNet(state.config)
    scale = state.config.scale
    rng = np.random.default_rng(cfg.seed)
    leaves = dict(state.leaves)
    opt = init_optimizer(leaves)
    trace_rows: list[tuple[int, float, float]] = []
    for it in range(cfg.total_iters):
        lr_now = cosine_lr(it, cfg.total_iters, cfg.lr0)
        batch_lr, batch_hr = _batch(images, scale, cfg.patch_size, cfg.batch_size, rng)
        trace = Trace(leaves)
        view = ParamView(trace)
        sr = net.forward(view, Tensor(batch_lr))
        loss = l1_loss(sr, Tensor(batch_hr))
        if cfg.ortho_weight > 0.0 and view.penalties:
            total_pen = view.penalties[0]
            for pen in view.penalties[1:]:
                total_pen = T.add(total_pen, pen)
            loss = T.add(loss, T.scale(total_pen, cfg.ortho_weight))
        loss_val = loss.item()
        grads = backward(trace, loss)
        if not math.isfinite(loss_val):
            for path in leaves:
                if not np.isfinite(grads[path]).all():
                    raise TrainingDiverged(
                        f"non-finite loss at iteration {it}; first non-finite gradient in leaf {path!r}"
                    )
            raise TrainingDiverged(f"non-finite loss at iteration {it}; all leaf gradients finite")
        leaves, opt = adam_step(opt, leaves, grads, lr_now, cfg.betas, cfg.eps)
        if it % cfg.log_every == 0 or it == cfg.total_iters - 1:
            trace_rows.append((it, lr_now, loss_val))
            if on_log is not None:
                on_log(it, lr_now, loss_val)
    return ModelState(config=state.config, leaves=leaves), trace_rows


def write_loss_csv(rows: Sequence[tuple[int, float, float]], path: str) -> None:
    with open(path, "w") as fh:
        fh.write("iter,lr,loss\n")
        for it, lr_now, loss in rows:
            fh.write(f"{it},{lr_now:.8g},{loss:.8g}\n")
