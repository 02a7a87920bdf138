"""Gradient-sign attacks (FGSM, TGSM, iterated) and the JSMA."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import container
from .data import check_one_hot
from .models import ModelSpec, Params, bind, forward, predict


@dataclass
class AttackResult:
    X_adv: np.ndarray
    success: np.ndarray
    iterations: int
    linf: np.ndarray
    l0: np.ndarray
    kind: str = ""
    eps: float = 0.0
    targets: np.ndarray | None = None

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success)) if len(self.success) else float("nan")


def cross_entropy(targets, logits: ad.Node) -> ad.Node:
    """Summed cross entropy H(targets, softmax(logits)), via a stable log softmax."""
    return -ad.sum(ad.mul(logits.tape.constant(targets), ad.log_softmax(logits)))


def loss_input_gradient(
    spec: ModelSpec, params: Params, X: np.ndarray, targets: np.ndarray, batch_size: int = 500
) -> np.ndarray:
    """Gradient of H(targets, y_hat) w.r.t. the inputs, in eval mode."""
    X = np.asarray(X, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if X.shape[0] != targets.shape[0]:
        raise ad.ShapeError(f"inputs {X.shape} and targets {targets.shape} disagree on N")
    out = np.zeros_like(X)
    for i in range(0, len(X), batch_size):
        tape = ad.Tape()
        x = tape.variable("x", X[i : i + batch_size])
        z = forward(spec, bind(tape, params), x, None, params.eval_temperature)
        if z.shape[1] != targets.shape[1]:
            raise ad.ShapeError(f"targets have {targets.shape[1]} classes, model has {z.shape[1]}")
        (g,) = tape.gradient(cross_entropy(targets[i : i + batch_size], z), [x])
        out[i : i + batch_size] = g.value
        tape.release()
    return out


def _distortion(X, X_adv):
    diff = np.abs(X_adv - X)
    return diff.max(axis=1, initial=0.0), (diff > 0).sum(axis=1)


def _check_labels(y, X):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or len(y) != len(X):
        raise ad.ShapeError(f"labels {y.shape} do not match inputs {np.shape(X)}")
    check_one_hot(y)
    return y


def fgsm(spec: ModelSpec, params: Params, X, y, eps: float) -> AttackResult:
    """X + eps * sign(grad_x H(y, y_hat)), clipped to [0, 1]; sign(0) = 0."""
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    X = np.asarray(X, dtype=np.float64)
    y = _check_labels(y, X)
    step = np.sign(loss_input_gradient(spec, params, X, y))
    X_adv = np.clip(X + eps * step, 0.0, 1.0)
    linf, l0 = _distortion(X, X_adv)
    success = predict(spec, params, X_adv) != y.argmax(axis=1)
    return AttackResult(X_adv, success, 1, linf, l0, "fgsm", eps)


def tgsm(spec: ModelSpec, params: Params, X, y_target, eps: float) -> AttackResult:
    """X - eps * sign(grad_x H(y_target, y_hat)), clipped to [0, 1]."""
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    X = np.asarray(X, dtype=np.float64)
    y_target = _check_labels(y_target, X)
    step = np.sign(loss_input_gradient(spec, params, X, y_target))
    X_adv = np.clip(X - eps * step, 0.0, 1.0)
    linf, l0 = _distortion(X, X_adv)
    success = predict(spec, params, X_adv) == y_target.argmax(axis=1)
    return AttackResult(X_adv, success, 1, linf, l0, "tgsm", eps, y_target)


def iterate(
    attack: Callable[..., AttackResult],
    spec: ModelSpec,
    params: Params,
    X,
    labels,
    steps: int,
    eps: float,
) -> AttackResult:
    """Repeat a single-step attack, re-deriving gradients and clipping at every step.

    ``labels`` are the true labels for FGSM and the targets for TGSM; success
    and distortion are measured against the original ``X``.
    """
    if steps < 1:
        raise ValueError(f"steps must be at least 1, got {steps}")
    X = np.asarray(X, dtype=np.float64)
    current = X
    for _ in range(steps):
        result = attack(spec, params, current, labels, eps)
        current = result.X_adv
    linf, l0 = _distortion(X, current)
    result.linf, result.l0 = linf, l0
    result.iterations = steps
    result.kind = "i" + result.kind
    return result


def y_plus_1(y) -> np.ndarray:
    """Shift one-hot labels c -> (c + 1) mod 10."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != 10:
        raise ValueError(f"y_plus_1 expects (N, 10) one-hot labels, got {y.shape}")
    check_one_hot(y)
    return np.roll(y, 1, axis=1)


def fixed_target(n: int, k: int, num_classes: int = 10) -> np.ndarray:
    out = np.zeros((n, num_classes))
    out[:, k] = 1.0
    return out


# --------------------------------------------------------------------------
# JSMA


def class_jacobian(spec: ModelSpec, params: Params, x: np.ndarray, use_logits: bool = False) -> np.ndarray:
    """(K, D) Jacobian of class probabilities (or logits) for one example.

    The example is replicated K times so one backward pass yields every row.
    """
    k = spec.num_classes
    tape = ad.Tape()
    xs = tape.variable("x", np.repeat(np.asarray(x, dtype=np.float64)[None, :], k, axis=0))
    z = forward(spec, bind(tape, params), xs, None, params.eval_temperature)
    out = z if use_logits else ad.exp(ad.log_softmax(z))
    picked = ad.sum(ad.mul(out, tape.constant(np.eye(k))))
    (g,) = tape.gradient(picked, [xs])
    tape.release()
    return np.array(g.value)


def select_pair(jacobian: np.ndarray, target: int, domain: np.ndarray) -> tuple[int, int] | None:
    """Pixel pair (p < q) in ``domain`` maximizing -alpha*beta with alpha > 0, beta < 0.

    Ties go to the first pair in row-major order; ``None`` when nothing is admissible.
    """
    a = jacobian[target]
    b = jacobian.sum(axis=0) - a
    A = a[:, None] + a[None, :]
    B = b[:, None] + b[None, :]
    ok = (A > 0) & (B < 0) & domain[:, None] & domain[None, :]
    ok &= np.triu(np.ones(ok.shape, dtype=bool), k=1)
    if not ok.any():
        return None
    score = np.where(ok, -A * B, -np.inf)
    p, q = np.unravel_index(np.argmax(score), score.shape)
    return int(p), int(q)


def jsma(
    spec: ModelSpec,
    params: Params,
    x,
    y_target,
    gamma: float = 0.25,
    use_logits: bool = False,
) -> AttackResult:
    """Greedy pair-saturating targeted attack on one flattened example.

    Each round saturates (sets to 1.0) the admissible pixel pair with the best
    saliency score. Stops on reaching the target, when another pair would push
    the changed-pixel count past gamma * D, or when no pair is admissible.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != spec.input_dim:
        raise ad.ShapeError(f"jsma: example of size {x.shape[0]} does not match model input {spec.input_dim}")
    y_target = np.asarray(y_target, dtype=np.float64).reshape(1, -1)
    check_one_hot(y_target)
    target = int(y_target.argmax())
    budget = gamma * x.shape[0]

    adv = x.copy()
    domain = adv < 1.0
    changed = 0
    rounds = 0
    success = False
    while True:
        if predict(spec, params, adv[None, :])[0] == target:
            success = True
            break
        if changed + 2 > budget:
            break
        pair = select_pair(class_jacobian(spec, params, adv, use_logits), target, domain)
        if pair is None:
            break
        for p in pair:
            adv[p] = 1.0
            domain[p] = False
        changed += 2
        rounds += 1
    linf, l0 = _distortion(x[None, :], adv[None, :])
    return AttackResult(adv[None, :], np.array([success]), rounds, linf, l0, "jsma", gamma, y_target)


def jsma_batch(spec, params, X, y_target, gamma: float = 0.25, use_logits: bool = False) -> AttackResult:
    results = [jsma(spec, params, x, t, gamma, use_logits) for x, t in zip(X, y_target)]
    if not results:
        empty = np.zeros((0, spec.input_dim))
        return AttackResult(empty, np.zeros(0, bool), 0, np.zeros(0), np.zeros(0, int), "jsma", gamma, np.zeros((0, spec.num_classes)))
    return AttackResult(
        np.vstack([r.X_adv for r in results]),
        np.concatenate([r.success for r in results]),
        max(r.iterations for r in results),
        np.concatenate([r.linf for r in results]),
        np.concatenate([r.l0 for r in results]),
        "jsma",
        gamma,
        np.vstack([r.targets for r in results]),
    )


def save_batch(path, result: AttackResult, labels: np.ndarray, generator_hash: str, settings: dict | None = None) -> str:
    """Store an adversarial batch with its provenance; returns the file hash."""
    tensors = {"X_adv": result.X_adv, "labels": labels, "success": result.success.astype(np.float64)}
    if result.targets is not None:
        tensors["targets"] = result.targets
    meta = {
        "kind": "adversarial_batch",
        "attack": result.kind,
        "iterations": result.iterations,
        "generator_checkpoint_sha256": generator_hash,
        "settings": dict(settings or {}),
    }
    return container.save(path, tensors, meta)


def load_batch(path) -> tuple[dict[str, np.ndarray], dict]:
    tensors, meta = container.load(path)
    if meta.get("kind") != "adversarial_batch":
        raise container.ContainerError(f"{path}: not an adversarial batch")
    return tensors, meta
