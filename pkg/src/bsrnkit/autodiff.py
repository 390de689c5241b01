"""Reverse-mode differentiation over the tensor op set.

A :class:`Trace` turns a flat ``path -> array`` parameter mapping into leaf
tensors for one forward pass; :func:`backward` walks the recorded graph once
in reverse topological order and returns a :class:`GradientMap` with one
gradient array per leaf (zeros for leaves the loss never touched).

:func:`finite_diff_check` is the verification harness: central differences
in double precision against the analytic gradients, with optional kink
screening for max-pool windows and ReLU pre-activations.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Mapping

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import tensor as T
from .tensor import ShapeError, Tensor

GradientMap = dict[str, np.ndarray]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference paths); restores the prior state."""
    prev = T._grad_enabled
    T._grad_enabled = False
    try:
        yield
    finally:
        T._grad_enabled = prev


class Trace:
    """Leaf registry for one differentiable forward pass.

    Wraps each parameter array in a leaf Tensor exactly once so fan-out in
    the network accumulates additively into a single gradient per leaf.
    """

    def __init__(self, leaves: Mapping[str, np.ndarray]):
        self.leaves: dict[str, Tensor] = {path: Tensor(arr) for path, arr in leaves.items()}
        self._path_of = {id(t): path for path, t in self.leaves.items()}

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self.leaves[path]
        except KeyError:
            raise KeyError(f"trace has no leaf {path!r}") from None

    def __contains__(self, path: str) -> bool:
        return path in self.leaves

    def paths(self) -> list[str]:
        return list(self.leaves)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # children appear after all their parents


def backward(trace: Trace, loss: Tensor) -> GradientMap:
    """d(loss)/d(leaf) for every leaf registered on the trace.

    The trace is left untouched; calling backward twice on the same loss
    yields identical maps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        if node.vjp is None:
            continue  # leaves and constants keep their accumulated entry
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    out: GradientMap = {}
    for path, leaf in trace.leaves.items():
        g = grads.get(id(leaf))
        out[path] = np.zeros_like(leaf.data) if g is None else g
    return out


def finite_diff_check(
    f: Callable[[Trace], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-4,
    max_samples: int = 64,
    seed: int = 0,
    abs_floor: float = 1e-8,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar function of the trace leaves.  All
    parameters are promoted to double precision.  Per parameter, up to
    ``max_samples`` randomly chosen elements are perturbed by +/- eps.
    Deviations below ``abs_floor`` count as zero error (they are at the
    resolution limit of central differences); anything larger is reported
    relative to the gradient magnitude.
    """
    params64 = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    trace = Trace(params64)
    analytic = backward(trace, f(trace))

    def eval_loss(leaves: Mapping[str, np.ndarray]) -> float:
        with no_grad():
            return f(Trace(leaves)).item()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for path, base in params64.items():
        flat = base.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_samples else rng.choice(n, size=max_samples, replace=False)
        for i in idx:
            bumped = dict(params64)
            plus = base.copy().reshape(-1)
            plus[i] += eps
            bumped[path] = plus.reshape(base.shape)
            lp = eval_loss(bumped)
            minus = base.copy().reshape(-1)
            minus[i] -= eps
            bumped[path] = minus.reshape(base.shape)
            lm = eval_loss(bumped)
            fd = (lp - lm) / (2.0 * eps)
            an = analytic[path].reshape(-1)[i]
            diff = abs(fd - an)
            rel = 0.0 if diff <= abs_floor else diff / max(abs(fd), abs(an))
            worst = max(worst, rel)
    return worst


def kink_margins(f: Callable[[Trace], Tensor], params: Mapping[str, np.ndarray]) -> tuple[float, float]:
    """(max-pool margin, relu margin) observed in one evaluation of ``f``.

    The pool margin is the smallest gap between any pooling window's max and
    its runner-up; the relu margin is the smallest |pre-activation|.  Inputs
    whose margins fall under ~1e-3 sit too close to a kink for central
    differences and should be re-sampled before running a gradient check.
    """
    from . import tensor as _t

    records: list[tuple[str, object]] = []
    prev = _t._op_watch
    _t._op_watch = records
    try:
        with no_grad():
            f(Trace({k: np.asarray(v, dtype=np.float64) for k, v in params.items()}))
    finally:
        _t._op_watch = prev
    pool_margin = np.inf
    relu_margin = np.inf
    for kind, payload in records:
        if kind == "max_pool2d":
            x, kernel, stride = payload  # type: ignore[misc]
            pool_margin = min(pool_margin, _pool_gap(x, kernel, stride))
        elif kind == "relu":
            relu_margin = min(relu_margin, float(np.min(np.abs(payload))))
    return float(pool_margin), float(relu_margin)


def _pool_gap(x: np.ndarray, kernel, stride) -> float:
    kh, kw = kernel
    sh, sw = stride
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    sn, sc, sh_, sw_ = x.strides
    win = as_strided(
        x, shape=(n, c, kh, kw, oh, ow), strides=(sn, sc, sh_, sw_, sh_ * sh, sw_ * sw), writeable=False
    )
    flat = win.reshape(n, c, kh * kw, oh * ow)
    if flat.shape[2] == 1:
        return np.inf
    top2 = np.partition(flat, -2, axis=2)[:, :, -2:, :]
    return float(np.min(top2[:, :, 1, :] - top2[:, :, 0, :]))


def maxpool_margin_ok(x: np.ndarray, kernel, stride, margin: float = 1e-3) -> bool:
    """True when every pooling window's max clears its runner-up by ``margin``.

    Central differences are invalid near max-pool kinks; gradient checks use
    this to reject (and re-sample) inputs whose windows are nearly tied.
    """
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    return _pool_gap(x, (kh, kw), (sh, sw)) >= margin
