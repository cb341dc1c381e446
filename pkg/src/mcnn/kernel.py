"""Numeric primitives with hand-written backward passes.

Every layer the matching networks need lives here: affine maps, the gated
sequence convolution (optionally fused with an image vector), two-unit
max-pooling, inverted dropout, embedding lookup and the ranking hinge.  Each
op takes an optional :class:`Tape`; when one is given the op records a closure
that pushes the output gradient back into its inputs.

Arrays may carry any number of leading batch axes.  Sequence tensors are laid
out ``(..., positions, channels)``.

Subgradient conventions: ReLU'(0) = 0, the hinge has zero slope on its
boundary, and max-pool ties send the gradient to the first of the two slots.
"""
from __future__ import annotations

import warnings
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError


class PoolingWarning(UserWarning):
    """Raised (as a warning) when an odd-length map loses its last slot."""


class Var:
    """A value in the computation graph plus its lazily allocated gradient."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = True):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad

    def accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"


class ParamArray(Var):
    """A named trainable array.

    ``frozen_rows`` lists leading-axis rows that never receive gradient or
    updates (the PAD embedding row).
    """

    __slots__ = ("name", "trainable", "frozen_rows")

    def __init__(self, name: str, value, trainable: bool = True, frozen_rows: Sequence[int] = ()):
        super().__init__(np.ascontiguousarray(value))
        self.name = name
        self.trainable = trainable
        self.frozen_rows = tuple(int(r) for r in frozen_rows)
        self.grad = np.zeros_like(self.value)

    def accumulate(self, g):
        self.grad += g
        if self.frozen_rows:
            self.grad[list(self.frozen_rows)] = 0

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"ParamArray({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


class ParamSet:
    """Ordered, uniquely named collection of :class:`ParamArray`."""

    def __init__(self, params: Iterable[ParamArray] = ()):
        self._params: "OrderedDict[str, ParamArray]" = OrderedDict()
        for p in params:
            self.add(p)

    def add(self, param: ParamArray) -> ParamArray:
        if param.name in self._params:
            raise UsageError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def __getitem__(self, name: str) -> ParamArray:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[ParamArray]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def copy(self, dtype=None) -> "ParamSet":
        out = ParamSet()
        for p in self:
            value = p.value.astype(dtype) if dtype is not None else p.value.copy()
            out.add(ParamArray(p.name, value, p.trainable, p.frozen_rows))
        return out

    def load_values(self, other: "ParamSet") -> None:
        for p in self:
            src = other[p.name].value
            if src.shape != p.value.shape:
                raise ShapeError(f"{p.name}: {src.shape} vs {p.value.shape}")
            p.value[...] = src

    def count(self) -> int:
        return int(sum(p.value.size for p in self))


class Tape:
    """Records backward closures in forward order and replays them reversed."""

    def __init__(self):
        self._ops: list[Callable[[], None]] = []
        self._consumed = False

    def record(self, fn: Callable[[], None]) -> None:
        self._ops.append(fn)

    def __len__(self):
        return len(self._ops)

    def backward(self, loss: Var, seed: float = 1.0) -> None:
        if not self._ops:
            raise UsageError("backward called without a recorded forward pass")
        if self._consumed:
            raise UsageError("tape already replayed; run a fresh forward pass")
        loss.grad = np.full_like(loss.value, seed)
        for fn in reversed(self._ops):
            fn()
        self._consumed = True


def backward(loss: Var, tape: Tape) -> None:
    """Accumulate d(loss)/d(param) into every parameter touched by ``tape``."""
    tape.backward(loss)


def _as_var(x) -> Var:
    # raw arrays enter the graph as constants
    return x if isinstance(x, Var) else Var(x, requires_grad=False)


@dataclass
class FeatureMap:
    """Sequence activations plus a per-position liveness mask.

    ``data.value`` has shape ``(..., positions, channels)`` and ``live`` has
    shape ``(..., positions)``.  Rows with ``live == False`` are all zero.
    """

    data: Var
    live: np.ndarray

    @classmethod
    def from_array(cls, values, live=None) -> "FeatureMap":
        values = np.asarray(values)
        if live is None:
            live = np.ones(values.shape[:-1], dtype=bool)
        live = np.asarray(live, dtype=bool)
        if live.shape != values.shape[:-1]:
            raise ShapeError(f"live mask {live.shape} does not match values {values.shape}")
        return cls(Var(values), live)

    @property
    def values(self) -> np.ndarray:
        return self.data.value

    @property
    def positions(self) -> int:
        return self.data.value.shape[-2]

    @property
    def channels(self) -> int:
        return self.data.value.shape[-1]


_ACTIVATIONS = ("relu", "identity")


def affine_forward(x, weights: ParamArray, bias: ParamArray, activation: str = "identity",
                   tape: Tape | None = None) -> Var:
    """``act(x @ weights.T + bias)`` over the last axis of ``x``."""
    if activation not in _ACTIVATIONS:
        raise UsageError(f"unknown activation {activation!r}")
    x = _as_var(x)
    w, b = weights.value, bias.value
    if w.ndim != 2 or b.shape != (w.shape[0],) or x.value.shape[-1:] != (w.shape[1],):
        raise ShapeError(
            f"affine: input {x.value.shape} incompatible with weights {w.shape} and bias {b.shape}"
        )
    z = x.value @ w.T + b
    out = Var(np.maximum(z, 0) if activation == "relu" else z)

    if tape is not None:
        def _back():
            if out.grad is None:
                return
            dz = out.grad * (z > 0) if activation == "relu" else out.grad
            dz2 = dz.reshape(-1, w.shape[0])
            weights.accumulate(dz2.T @ x.value.reshape(-1, w.shape[1]))
            bias.accumulate(dz2.sum(axis=0))
            if x.requires_grad:
                x.accumulate(dz @ w)
        tape.record(_back)
    return out


def _window_gate(live: np.ndarray, k_rp: int, n_out: int) -> np.ndarray:
    gate = np.zeros(live.shape[:-1] + (n_out,), dtype=bool)
    for j in range(k_rp):
        gate |= live[..., j:j + n_out]
    return gate


def seq_conv_forward(fmap: FeatureMap, filters: ParamArray, bias: ParamArray, k_rp: int = 3,
                     fused=None, tape: Tape | None = None) -> FeatureMap:
    """Narrow stride-1 convolution with ReLU and all-padding gating.

    The segment for output slot ``i`` is rows ``i .. i+k_rp-1`` of ``fmap``
    concatenated, followed by ``fused`` when given.  A slot whose ``k_rp``
    input rows are all non-live is forced to exactly zero; the fused vector
    does not take part in that test.
    """
    x = fmap.data
    xv = x.value
    n_in, c_in = xv.shape[-2], xv.shape[-1]
    if n_in < k_rp:
        raise ShapeError(f"sequence shorter than receptive field ({n_in} < {k_rp})")
    fused = None if fused is None else _as_var(fused)
    d = 0 if fused is None else fused.value.shape[-1]
    w, b = filters.value, bias.value
    seg_width = k_rp * c_in
    if w.ndim != 2 or w.shape[1] != seg_width + d or b.shape != (w.shape[0],):
        raise ShapeError(
            f"conv: filters {w.shape} / bias {b.shape} do not fit segment width "
            f"{k_rp}*{c_in}+{d}={seg_width + d}"
        )
    if fused is not None and fused.value.shape[:-1] != xv.shape[:-2]:
        raise ShapeError(f"conv: fused vector {fused.value.shape} vs input {xv.shape}")
    n_out = n_in - k_rp + 1
    seg = np.concatenate([xv[..., j:j + n_out, :] for j in range(k_rp)], axis=-1)
    w_seq = w[:, :seg_width]
    z = seg @ w_seq.T + b
    if fused is not None:
        w_img = w[:, seg_width:]
        # one image term per pair, shared by every window
        z = z + (fused.value @ w_img.T)[..., None, :]
    gate = _window_gate(fmap.live, k_rp, n_out)
    keep = gate[..., None] & (z > 0)
    out = Var(np.where(keep, z, 0).astype(xv.dtype, copy=False))

    if tape is not None:
        def _back():
            if out.grad is None:
                return
            dz = np.where(keep, out.grad, 0).astype(xv.dtype, copy=False)
            f = w.shape[0]
            dz2 = dz.reshape(-1, f)
            gw = np.zeros_like(w)
            gw[:, :seg_width] = dz2.T @ seg.reshape(-1, seg_width)
            filters_grad_img = None
            if fused is not None:
                dz_sum = dz.sum(axis=-2)
                gw[:, seg_width:] = dz_sum.reshape(-1, f).T @ fused.value.reshape(-1, d)
                filters_grad_img = dz_sum @ w[:, seg_width:]
            filters.accumulate(gw)
            bias.accumulate(dz2.sum(axis=0))
            if x.requires_grad:
                dseg = dz @ w_seq
                dx = np.zeros_like(xv)
                for j in range(k_rp):
                    dx[..., j:j + n_out, :] += dseg[..., j * c_in:(j + 1) * c_in]
                x.accumulate(dx)
            if filters_grad_img is not None:
                fused.accumulate(filters_grad_img)
        tape.record(_back)
    return FeatureMap(out, gate)


def maxpool2_forward(fmap: FeatureMap, tape: Tape | None = None) -> FeatureMap:
    """Stride-2 max over pairs of positions; an odd trailing slot is dropped."""
    x = fmap.data
    xv = x.value
    n_in = xv.shape[-2]
    if n_in < 2:
        raise ShapeError(f"cannot pool a map with {n_in} position(s)")
    if n_in % 2:
        warnings.warn(f"max-pool input has odd length {n_in}; last position dropped",
                      PoolingWarning, stacklevel=2)
    n_out = n_in // 2
    first = xv[..., 0:2 * n_out:2, :]
    second = xv[..., 1:2 * n_out:2, :]
    take_first = first >= second
    out = Var(np.where(take_first, first, second))
    live = fmap.live[..., 0:2 * n_out:2] | fmap.live[..., 1:2 * n_out:2]

    if tape is not None:
        def _back():
            if out.grad is None:
                return
            dx = np.zeros_like(xv)
            dx[..., 0:2 * n_out:2, :] = np.where(take_first, out.grad, 0)
            dx[..., 1:2 * n_out:2, :] = np.where(take_first, 0, out.grad)
            x.accumulate(dx)
        tape.record(_back)
    return FeatureMap(out, live)


def dropout_forward(x, p: float, mode: str = "train", rng: np.random.Generator | None = None,
                    tape: Tape | None = None) -> Var:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` in train mode."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise UsageError(f"unknown mode {mode!r}")
    x = _as_var(x)
    if mode == "eval" or p == 0:
        return x
    if rng is None:
        raise UsageError("train-mode dropout needs an explicit rng")
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.value.dtype)
    mask = (rng.random(x.value.shape) >= p).astype(x.value.dtype) * scale
    out = Var(x.value * mask)

    if tape is not None:
        def _back():
            if out.grad is not None:
                x.accumulate(out.grad * mask)
        tape.record(_back)
    return out


def embedding_lookup(table: ParamArray, indices, tape: Tape | None = None) -> Var:
    indices = np.asarray(indices)
    out = Var(table.value[indices])

    if tape is not None:
        def _back():
            if out.grad is None:
                return
            g = np.zeros_like(table.value)
            np.add.at(g, indices.reshape(-1), out.grad.reshape(-1, table.value.shape[-1]))
            table.accumulate(g)
        tape.record(_back)
    return out


def concat(parts: Sequence, tape: Tape | None = None) -> Var:
    """Concatenate along the last axis."""
    parts = [_as_var(p) for p in parts]
    widths = [p.value.shape[-1] for p in parts]
    out = Var(np.concatenate([p.value for p in parts], axis=-1))

    if tape is not None:
        def _back():
            if out.grad is None:
                return
            start = 0
            for p, wdt in zip(parts, widths):
                p.accumulate(out.grad[..., start:start + wdt])
                start += wdt
        tape.record(_back)
    return out


def flatten_positions(fmap: FeatureMap, tape: Tape | None = None) -> Var:
    """Vectorize ``(..., P, C)`` position-major into ``(..., P*C)``."""
    x = fmap.data
    shape = x.value.shape
    out = Var(x.value.reshape(shape[:-2] + (shape[-2] * shape[-1],)))

    if tape is not None:
        def _back():
            if out.grad is not None:
                x.accumulate(out.grad.reshape(shape))
        tape.record(_back)
    return out


def reshape(x, shape, tape: Tape | None = None) -> Var:
    x = _as_var(x)
    orig = x.value.shape
    out = Var(x.value.reshape(shape))

    if tape is not None:
        def _back():
            if out.grad is not None:
                x.accumulate(out.grad.reshape(orig))
        tape.record(_back)
    return out


def take(x, index, tape: Tape | None = None) -> Var:
    """Gather entries of a 1-D score vector."""
    x = _as_var(x)
    index = np.asarray(index)
    out = Var(x.value[index])

    if tape is not None:
        def _back():
            if out.grad is None:
                return
            g = np.zeros_like(x.value)
            np.add.at(g, index, out.grad)
            x.accumulate(g)
        tape.record(_back)
    return out


def hinge(s_pos, s_neg, margin: float, tape: Tape | None = None) -> Var:
    """Elementwise ``max(0, margin - s_pos + s_neg)``."""
    s_pos, s_neg = _as_var(s_pos), _as_var(s_neg)
    if s_pos.value.shape != s_neg.value.shape:
        raise ShapeError(f"hinge: {s_pos.value.shape} vs {s_neg.value.shape}")
    z = margin - s_pos.value + s_neg.value
    active = z > 0
    out = Var(np.where(active, z, 0).astype(s_pos.value.dtype, copy=False))

    if tape is not None:
        def _back():
            if out.grad is None:
                return
            g = np.where(active, out.grad, 0)
            s_pos.accumulate(-g)
            s_neg.accumulate(g)
        tape.record(_back)
    return out


def reduce_sum(x, scale: float = 1.0, tape: Tape | None = None) -> Var:
    """``scale * sum(x)`` as a scalar."""
    x = _as_var(x)
    out = Var(np.asarray(x.value.sum() * scale, dtype=x.value.dtype))

    if tape is not None:
        def _back():
            if out.grad is not None:
                x.accumulate(np.full_like(x.value, out.grad * scale))
        tape.record(_back)
    return out


def weighted_sum(x, weights, tape: Tape | None = None) -> Var:
    """``sum(x * weights)`` with constant weights; handy for gradient probes."""
    x = _as_var(x)
    weights = np.asarray(weights, dtype=x.value.dtype)
    out = Var(np.asarray((x.value * weights).sum(), dtype=x.value.dtype))

    if tape is not None:
        def _back():
            if out.grad is not None:
                x.accumulate(out.grad * weights)
        tape.record(_back)
    return out


@dataclass(frozen=True)
class GradCheckResult:
    param_name: str
    max_rel_error: float
    passed: bool
    n_checked: int = 0


def finite_diff_check(model_forward: Callable[[Tape | None], Var], params: ParamSet,
                      epsilon: float = 1e-5, tolerance: float = 1e-5,
                      rng: np.random.Generator | None = None,
                      full_sweep_below: int = 1000, n_samples: int = 64) -> list[GradCheckResult]:
    """Compare tape gradients against central differences.

    ``model_forward(tape)`` must return a scalar :class:`Var` and be
    deterministic.  Arrays smaller than ``full_sweep_below`` entries are swept
    completely, larger ones at ``n_samples`` random entries.  Entries in frozen
    rows are skipped since their gradient is zero by construction.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)

    params.zero_grad()
    tape = Tape()
    loss = model_forward(tape)
    tape.backward(loss)

    def f() -> float:
        return float(model_forward(None).value)

    results = []
    for p in params:
        if not p.trainable:
            continue
        analytic = p.grad.reshape(-1).copy()
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"non-finite analytic gradient in {p.name}")
        flat = p.value.reshape(-1)
        allowed = np.ones(flat.size, dtype=bool)
        if p.frozen_rows:
            row = flat.size // p.value.shape[0]
            for r in p.frozen_rows:
                allowed[r * row:(r + 1) * row] = False
        candidates = np.flatnonzero(allowed)
        if candidates.size >= full_sweep_below:
            candidates = rng.choice(candidates, size=min(n_samples, candidates.size), replace=False)
        worst = 0.0
        for j in candidates:
            orig = flat[j]
            flat[j] = orig + epsilon
            f_plus = f()
            flat[j] = orig - epsilon
            f_minus = f()
            flat[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite loss while perturbing {p.name}[{j}]")
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = float(analytic[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        results.append(GradCheckResult(p.name, worst, worst < tolerance, int(candidates.size)))
    return results


def sgd_step(params: ParamSet, learning_rate: float) -> ParamSet:
    """Plain SGD in place: ``value -= learning_rate * grad``.

    All gradients are validated before any array is touched, so a non-finite
    gradient leaves the parameters intact.
    """
    for p in params:
        if p.trainable and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {p.name}")
    if learning_rate == 0:
        return params
    for p in params:
        if not p.trainable:
            continue
        update = learning_rate * p.grad
        if p.frozen_rows:
            update[list(p.frozen_rows)] = 0
        p.value -= update.astype(p.value.dtype, copy=False)
    return params


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)
