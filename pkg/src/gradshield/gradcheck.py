"""Finite-difference checks for tape gradients, first and second order."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ad.ShapeError(f"relative_error: shapes {a.shape} and {n.shape} differ")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numerical_gradient(scalar: Node, variable: Node, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of ``scalar`` w.r.t. a named variable, by tape replay.

    With ``indices`` (flat positions) only those coordinates are probed and a
    1-D array in the same order is returned.
    """
    tape: Tape = scalar.tape
    if variable.op != "variable":
        raise ValueError("finite differences need a named variable node")
    base = np.array(variable.value)
    flat = base.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    out = np.zeros(len(positions))
    for j, i in enumerate(positions):
        orig = flat[i]
        flat[i] = orig + h
        plus = tape.replay({variable.name: base}, upto=scalar)[scalar.id]
        flat[i] = orig - h
        minus = tape.replay({variable.name: base}, upto=scalar)[scalar.id]
        flat[i] = orig
        out[j] = (plus - minus) / (2 * h)
    return out.reshape(base.shape) if indices is None else out


def check_gradient(
    scalar: Node, wrt: Sequence[Node], h: float = 1e-5, max_coords: int | None = None, seed: int = 0
) -> float:
    """Max relative error between tape gradients and central differences.

    ``max_coords`` caps the probed coordinates per variable (a seeded random
    sample) for models too large to check exhaustively.
    """
    grads = scalar.tape.gradient(scalar, wrt)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for g, w in zip(grads, wrt):
        size = int(np.prod(w.shape))
        if max_coords is None or size <= max_coords:
            err = relative_error(g.value, numerical_gradient(scalar, w, h))
        else:
            idx = np.sort(rng.choice(size, max_coords, replace=False))
            err = relative_error(g.value.reshape(-1)[idx], numerical_gradient(scalar, w, h, idx))
        worst = max(worst, err)
    return worst


def input_gradient_penalty(scalar: Node, inner: Sequence[Node]) -> Node:
    """``sum_w ||d scalar / d w||^2`` as a differentiable node."""
    grads = scalar.tape.gradient(scalar, inner)
    total = ad.sum_squares(grads[0])
    for g in grads[1:]:
        total = total + ad.sum_squares(g)
    return total


def second_order_check(
    scalar: Node, inner: Sequence[Node], outer: Sequence[Node], h: float = 1e-5
) -> float:
    """Check d/d(outer) of ``||d scalar/d inner||^2`` against finite differences.

    The penalty is rebuilt on every perturbation by replaying the tape, which
    recomputes the recorded gradient nodes too.
    """
    penalty = input_gradient_penalty(scalar, inner)
    return check_gradient(penalty, outer, h)
