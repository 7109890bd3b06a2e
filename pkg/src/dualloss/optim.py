"""AdamW with decoupled weight decay, and a central-difference gradient checker."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import DimensionError, NumericError


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    no_decay: frozenset[str] = frozenset()


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState) -> None:
    """One AdamW step over every parameter named in ``grads``, in place.

    theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)

    Decay is applied multiplicatively first, so a zero-gradient step scales
    decayed parameters by exactly ``1 - lr * wd``. Nothing is modified if
    any gradient is non-finite or misshapen.
    """
    for name, g in grads.items():
        if name not in params:
            raise DimensionError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    decay = 1.0 - state.lr * state.weight_decay
    for name in sorted(grads):
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p = params[name]
        if state.weight_decay and name not in state.no_decay:
            p *= decay
        p -= state.lr * step


@dataclass
class GradCheckResult:
    max_rel_error: float  # worst over blocks of |a - n| / max(|a|, |n|, floor), norms per block
    worst_block: str | None
    block_errors: dict[str, float]
    max_coord_error: float  # worst single-coordinate relative error, for diagnostics
    worst_index: int | None
    checked: int
    skipped: int
    analytic: np.ndarray
    numeric: np.ndarray

    def __bool__(self):
        raise TypeError("compare max_rel_error against a tolerance instead")


def numeric_gradient(f: Callable[[np.ndarray], object], x: np.ndarray, h: float = 1e-5,
                     coords: Iterable[int] | None = None):
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for each listed coordinate.

    ``f`` returns either a float or ``(value, signature)``. A signature is any
    comparable summary of the piecewise branch taken (ReLU masks, margin
    branch); coordinates whose two probes disagree straddle a kink and come
    back as NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    idx = range(x.size) if coords is None else coords
    out = np.full(x.size, np.nan)
    for i in idx:
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fp, fm = f(xp), f(xm)
        if isinstance(fp, tuple):
            (fp, sp), (fm, sm) = fp, fm
            if sp != sm:
                continue
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value probing coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out


def grad_check(f: Callable[[np.ndarray], object], analytic: np.ndarray, x: np.ndarray, h: float = 1e-5,
               floor: float = 1e-8, coords: Iterable[int] | None = None,
               blocks: dict[str, slice] | None = None) -> GradCheckResult:
    """Compare ``analytic`` against central differences of ``f`` at ``x``.

    The gating error is computed per block (default: one block covering
    everything) as ``||a - n|| / max(||a||, ||n||, floor)`` over the checked
    coordinates. Per-coordinate relative error is reported too but is
    dominated by roundoff wherever a true gradient entry is below about
    ``eps * |f| / h``.
    """
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    x = np.asarray(x, dtype=np.float64)
    if analytic.size != x.size:
        raise DimensionError(f"analytic gradient has {analytic.size} entries, point has {x.size}")
    coords = list(range(x.size)) if coords is None else list(coords)
    numeric = numeric_gradient(f, x, h, coords)
    ok = np.zeros(x.size, dtype=bool)
    ok[coords] = True
    ok &= ~np.isnan(numeric)
    checked = int(ok.sum())
    blocks = blocks or {"all": slice(0, x.size)}
    errors: dict[str, float] = {}
    for name, sl in blocks.items():
        m = ok[sl]
        if not m.any():
            continue
        a, n = analytic[sl][m], numeric[sl][m]
        errors[name] = float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))
    worst_block = max(errors, key=errors.get) if errors else None
    sel = np.flatnonzero(ok)
    coord_err, worst_index = 0.0, None
    if sel.size:
        a, n = analytic[sel], numeric[sel]
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        j = int(np.argmax(rel))
        coord_err, worst_index = float(rel[j]), int(sel[j])
    return GradCheckResult(errors[worst_block] if worst_block else 0.0, worst_block, errors, coord_err, worst_index,
                           checked, len(coords) - checked, analytic, numeric)
