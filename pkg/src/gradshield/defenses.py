"""Training objectives, Adam, the training loop and the defenses built on it.

Objectives are summed (not averaged) over the batch, so the input-gradient
penalty strength ``lam`` is a per-example trade-off.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .attacks import cross_entropy, fgsm, loss_input_gradient
from .data import Dataset, check_one_hot
from .models import (
    ARCHITECTURES,
    ModelSpec,
    Params,
    accuracy,
    bind,
    forward,
    init,
    predict_logits,
    predict_probs,
    sample_dropout_masks,
)

log = logging.getLogger(__name__)

KINDS = ("normal", "doubleback", "certainty", "distilled", "adversarial", "doubleback+adversarial")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.key = key


class NumericError(FloatingPointError):
    def __init__(self, iteration: int, loss: float, max_grad: float):
        super().__init__(f"non-finite training loss at iteration {iteration}: loss={loss!r} max|grad|={max_grad!r}")
        self.iteration = iteration
        self.loss = loss
        self.max_grad = max_grad


class InfeasibleLambdaError(ValueError):
    pass


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "normal"
    lam: float = 0.0
    temperature: float = 50.0
    eps_train: float = 0.3
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-4
    batch_size: int = 128
    iterations: int = 2000
    seed: int = 0
    report_every: int = 0
    arch: str = "desk_cnn"
    eval_temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kind {self.kind!r}; expected one of {', '.join(KINDS)}", key="kind")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative", key="lam")
        if not self.temperature > 0 or not self.eval_temperature > 0:
            raise ConfigError("temperatures must be positive", key="temperature")
        if not 0.0 <= self.eps_train <= 1.0:
            raise ConfigError("eps_train must lie in [0, 1]", key="eps_train")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("batch_size must be >= 1 and iterations >= 0", key="batch_size")
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown arch {self.arch!r}", key="arch")

    def replace(self, **changes) -> "DefenseConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


PROFILES: dict[str, dict] = {
    "desk": {},
    "paper": {
        "alpha": 0.0002,
        "eps_adam": 1e-4,
        "batch_size": 256,
        "iterations": 15000,
        "arch": "paper_cnn",
    },
}


def parse_kv(text: str) -> dict[str, tuple[str, int]]:
    """``key = value`` lines with ``#`` comments -> {key: (value, line number)}."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", lineno)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", lineno, key)
        out[key] = (value, lineno)
    return out


def config_from_text(text: str, profile: str | None = None, require=("kind",)) -> DefenseConfig:
    entries = parse_kv(text)
    for key in require:
        if key not in entries:
            raise ConfigError(f"missing required key {key!r}", key=key)
    if profile is None and "profile" in entries:
        profile = entries["profile"][0]
    entries.pop("profile", None)
    if profile not in (None, *PROFILES):
        raise ConfigError(f"unknown profile {profile!r}", key="profile")
    values = dict(PROFILES.get(profile or "desk", {}))
    types = {f.name: f.type for f in dataclasses.fields(DefenseConfig)}
    for key, (value, lineno) in entries.items():
        if key not in types:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        kind = types[key]
        try:
            values[key] = int(value) if kind == "int" else float(value) if kind == "float" else value
        except ValueError:
            raise ConfigError(f"bad value {value!r} for {key} ({kind})", lineno, key) from None
    try:
        return DefenseConfig(**values)
    except ConfigError as exc:
        line = entries.get(exc.key, (None, None))[1]
        raise ConfigError(str(exc), line, exc.key) from None


# --------------------------------------------------------------------------
# objectives


LOG_FLOOR = 1e-20


def _clamped_entropy(targets, probs: ad.Node) -> ad.Node:
    return -ad.sum(ad.mul(probs.tape.constant(targets), ad.log(ad.clamp_min(probs, LOG_FLOOR))))


def loss_standard(probs: ad.Node, y) -> ad.Node:
    """-sum y * log(probs), with probabilities floored at 1e-20 before the log."""
    y = np.asarray(y, dtype=np.float64)
    if probs.shape != y.shape or probs.value.ndim != 2:
        raise ad.ShapeError(f"loss_standard: probs {probs.shape} vs labels {y.shape}")
    check_one_hot(y)
    return _clamped_entropy(y, probs)


def soft_cross_entropy(targets, z: ad.Node, T: float = 1.0) -> ad.Node:
    """H(targets, softmax(z / T)) summed over the batch, log floored like loss_standard."""
    if T != 1.0:
        z = ad.div(z, z.tape.constant(float(T)))
    return _clamped_entropy(np.asarray(targets, dtype=np.float64), ad.softmax(z))


def _penalized(H_data: ad.Node, H_pen: ad.Node, x: ad.Node, lam: float) -> ad.Node:
    if lam == 0:
        return H_data
    (gx,) = x.tape.gradient(H_pen, [x])
    return H_data + lam * ad.sum_squares(gx)


def doubleback_term(spec, nodes, x: ad.Node, y, lam: float, masks=None, uniform=False, eval_temperature=1.0):
    z = forward(spec, nodes, x, masks, eval_temperature)
    probs = ad.softmax(z)
    H = _clamped_entropy(np.asarray(y, dtype=np.float64), probs)
    if uniform:
        H_pen = _clamped_entropy(np.full(z.shape, 1.0 / z.shape[1]), probs)
    else:
        H_pen = H
    return _penalized(H, H_pen, x, lam)


def _fresh(params: Params, X):
    tape = ad.Tape()
    x = tape.variable("x", np.asarray(X, dtype=np.float64))
    return x, bind(tape, params)


def loss_doubleback(spec: ModelSpec, params: Params, X, y, lam: float, masks=None) -> ad.Node:
    """H(y, y_hat) + lam * ||grad_x H(y, y_hat)||^2, differentiable w.r.t. params."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    check_one_hot(np.asarray(y))
    x, nodes = _fresh(params, X)
    return doubleback_term(spec, nodes, x, y, lam, masks, False, params.eval_temperature)


def loss_certainty(spec: ModelSpec, params: Params, X, y, lam: float, masks=None) -> ad.Node:
    """H(y, y_hat) + lam * ||grad_x H(1/K, y_hat)||^2."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    check_one_hot(np.asarray(y))
    x, nodes = _fresh(params, X)
    return doubleback_term(spec, nodes, x, y, lam, masks, True, params.eval_temperature)


def fgsm_predicted(spec, nodes, X: np.ndarray, eps: float, masks=None, eval_temperature=1.0) -> tuple[np.ndarray, np.ndarray]:
    """FGSM against the model's own hard predictions; returns (X_adv, predicted one-hot).

    Runs on a private tape so nothing here is differentiated by the caller.
    """
    tape = ad.Tape()
    x = tape.variable("x", X)
    local = {name: tape.constant(node.value) for name, node in nodes.items()}
    z = forward(spec, local, x, masks, eval_temperature)
    pred = np.eye(z.shape[1])[z.value.argmax(axis=1)]
    (g,) = tape.gradient(cross_entropy(pred, z), [x])
    tape.release()
    return np.clip(X + eps * np.sign(g.value), 0.0, 1.0), pred


def adversarial_term(spec, nodes, x: ad.Node, y, eps: float, lam: float = 0.0, masks=None, eval_temperature=1.0):
    """Average of the (optionally penalized) loss on clean and FGSM inputs.

    The adversarial batch enters as a constant: no gradient flows through its
    construction.
    """
    tape = x.tape
    X_adv, _ = fgsm_predicted(spec, nodes, x.value, eps, masks, eval_temperature)
    clean = doubleback_term(spec, nodes, x, y, lam, masks, False, eval_temperature)
    if lam == 0:
        xa = tape.constant(X_adv)
    else:
        # the penalty needs an input gradient, so the batch is a variable
        xa = tape.variable(f"x_adv{len(tape.nodes)}", X_adv)
    adv = doubleback_term(spec, nodes, xa, y, lam, masks, False, eval_temperature)
    return 0.5 * clean + 0.5 * adv


def adversarial_step_loss(spec: ModelSpec, params: Params, X, y, eps: float, masks=None, lam: float = 0.0) -> ad.Node:
    """0.5 * H(y, y_hat(X)) + 0.5 * H(y, y_hat(X_adv)), X_adv = FGSM(X, argmax y_hat, eps)."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    check_one_hot(np.asarray(y))
    x, nodes = _fresh(params, X)
    return adversarial_term(spec, nodes, x, y, eps, lam, masks, params.eval_temperature)


def objective(spec, params: Params, X, targets, config: DefenseConfig, masks=None) -> ad.Node:
    """Training loss for ``config.kind`` on one batch, on a fresh tape."""
    x, nodes = _fresh(params, X)
    kind = config.kind
    if kind == "normal":
        return soft_cross_entropy(targets, forward(spec, nodes, x, masks))
    if kind == "distilled":
        return soft_cross_entropy(targets, forward(spec, nodes, x, masks), config.temperature)
    if kind == "doubleback":
        return doubleback_term(spec, nodes, x, targets, config.lam, masks)
    if kind == "certainty":
        return doubleback_term(spec, nodes, x, targets, config.lam, masks, uniform=True)
    if kind == "adversarial":
        return adversarial_term(spec, nodes, x, targets, config.eps_train, 0.0, masks)
    if kind == "doubleback+adversarial":
        return adversarial_term(spec, nodes, x, targets, config.eps_train, config.lam, masks)
    raise ConfigError(f"unknown kind {kind!r}", key="kind")


# --------------------------------------------------------------------------
# optimizer and loop


class Adam:
    def __init__(self, alpha=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.alpha = alpha
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] = params[name] - self.alpha * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)

    COLUMNS = ("iteration", "loss", "clean_acc", "bb_fgsm_acc", "mean_grad_norm")

    def add(self, iteration, loss, clean_acc, bb_fgsm_acc, mean_grad_norm):
        if self.rows and iteration <= self.rows[-1][0]:
            raise ValueError("report iterations must increase")
        self.rows.append((int(iteration), float(loss), float(clean_acc), float(bb_fgsm_acc), float(mean_grad_norm)))

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        lines += [",".join([str(it)] + [repr(float(v)) for v in (loss, c, a, g)]) for it, loss, c, a, g in self.rows]
        return "\n".join(lines) + "\n"

    @property
    def final(self):
        return self.rows[-1] if self.rows else None


@dataclass
class TrainData:
    """Training split plus optional validation set and black-box FGSM validation inputs."""

    train: Dataset
    val: Dataset | None = None
    val_adv: np.ndarray | None = None


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[i : i + batch_size]


def mean_grad_norm(spec, params, X, y) -> float:
    g = loss_input_gradient(spec, params, X, y)
    return float(np.mean(np.linalg.norm(g, axis=1))) if len(g) else float("nan")


def _checkpoint_metrics(spec, params, data: TrainData):
    if data.val is None or len(data.val) == 0:
        return float("nan"), float("nan"), float("nan")
    clean = accuracy(spec, params, data.val.X, data.val.y)
    adv = accuracy(spec, params, data.val_adv, data.val.y) if data.val_adv is not None else float("nan")
    return clean, adv, mean_grad_norm(spec, params, data.val.X, data.val.y)


def train(
    spec: ModelSpec,
    data: TrainData | Dataset,
    config: DefenseConfig,
    targets: np.ndarray | None = None,
    params: Params | None = None,
) -> tuple[Params, TrainReport]:
    """Optimize ``config.kind``'s objective with Adam; deterministic given ``config.seed``.

    ``targets`` overrides the one-hot training labels (soft labels for the
    second distillation stage).
    """
    if isinstance(data, Dataset):
        data = TrainData(data)
    if len(data.train) == 0:
        raise ValueError("training set is empty")
    X = data.train.X
    Y = data.train.y if targets is None else np.asarray(targets, dtype=np.float64)
    params = (params or init(spec, config.seed)).copy()
    rng = np.random.default_rng(config.seed)
    batches = _batches(len(X), min(config.batch_size, len(X)), rng)
    adam = Adam(config.alpha, config.beta1, config.beta2, config.eps_adam)
    report = TrainReport()
    every = config.report_every or config.iterations
    names = list(params.tensors)

    for it in range(1, config.iterations + 1):
        idx = next(batches)
        masks = sample_dropout_masks(spec, len(idx), rng)
        loss = objective(spec, params, X[idx], Y[idx], config, masks)
        grad_nodes = loss.tape.gradient(loss, [loss.tape.variables[n] for n in names])
        grads = {n: g.value for n, g in zip(names, grad_nodes)}
        value = float(loss.value)
        loss.tape.release()
        if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            max_grad = max(float(np.max(np.abs(g))) if g.size else 0.0 for g in grads.values())
            raise NumericError(it, value, max_grad)
        adam.step(params.tensors, grads)
        if it % every == 0 or it == config.iterations:
            clean, adv, gnorm = _checkpoint_metrics(spec, params, data)
            report.add(it, value, clean, adv, gnorm)
            log.info("%s it=%d loss=%.4f clean=%.4f bb=%.4f |g|=%.4g", config.kind, it, value, clean, adv, gnorm)
    return params, report


def distill_train(
    spec: ModelSpec, data: TrainData | Dataset, config: DefenseConfig
) -> tuple[Params, Params, TrainReport]:
    """Two-stage defensive distillation at temperature ``config.temperature``.

    Stage one fits one-hot labels through softmax(z / T); stage two fits a
    fresh model to the teacher's softmax(z / T) outputs. The returned student
    predicts with ``config.eval_temperature`` (1.0: raw logits).
    """
    if isinstance(data, Dataset):
        data = TrainData(data)
    cfg = config.replace(kind="distilled")
    teacher, _ = train(spec, TrainData(data.train), cfg)
    soft = teacher_targets(spec, teacher, data.train.X, cfg.temperature)
    student, report = train(spec, data, cfg.replace(seed=cfg.seed + 1), targets=soft)
    student.eval_temperature = config.eval_temperature
    return teacher, student, report


def teacher_targets(spec, teacher: Params, X, T: float) -> np.ndarray:
    return predict_probs(predict_logits(spec, teacher, X), T)


def distillation_loss(spec, params: Params, X, soft_targets, T: float) -> ad.Node:
    x, nodes = _fresh(params, X)
    z = forward(spec, nodes, x)
    return soft_cross_entropy(soft_targets, z, T)


def train_defense(spec, data: TrainData, config: DefenseConfig) -> tuple[Params, TrainReport]:
    """Dispatch on kind; distillation returns the student."""
    if config.kind == "distilled":
        _, student, report = distill_train(spec, data, config)
        return student, report
    return train(spec, data, config)


# --------------------------------------------------------------------------
# lambda selection


@dataclass
class LambdaSelection:
    lam: float
    table: list  # (lam, clean_acc, bb_fgsm_acc, feasible)
    reference_acc: float
    models: dict = field(default_factory=dict)


def choose_lambda(table: Sequence[tuple[float, float, float]], reference_acc: float, ratio: float = 0.97):
    """Pick the lambda with best adversarial accuracy among those keeping
    ``ratio`` of the reference clean accuracy; ties go to the smallest lambda."""
    rows = sorted(table, key=lambda r: r[0])
    feasible = [r for r in rows if r[1] >= ratio * reference_acc]
    if not feasible:
        detail = ", ".join(f"lam={lam:g}: clean={c:.4f}" for lam, c, _ in rows)
        raise InfeasibleLambdaError(
            f"no lambda keeps {ratio:.0%} of reference accuracy {reference_acc:.4f} ({detail})"
        )
    best = feasible[0]
    for r in feasible[1:]:
        if r[2] > best[2]:
            best = r
    return best[0]


def select_lambda(
    spec: ModelSpec,
    data: TrainData,
    grid: Sequence[float],
    config: DefenseConfig,
    proxy: tuple[ModelSpec, Params],
    eps: float = 0.3,
    kind: str = "doubleback",
    train_fn=None,
) -> LambdaSelection:
    """Train one gradient-regularized model per grid point and choose by
    black-box FGSM validation accuracy, examples crafted on ``proxy``.

    ``train_fn(spec, data, config) -> (Params, TrainReport)`` defaults to
    :func:`train`; callers may substitute a caching wrapper.
    """
    train_fn = train_fn or train
    if not grid:
        raise ValueError("lambda grid is empty")
    if data.val is None or len(data.val) == 0:
        raise ValueError("lambda selection needs a validation set")
    proxy_spec, proxy_params = proxy
    val_adv = fgsm(proxy_spec, proxy_params, data.val.X, data.val.y, eps).X_adv
    reference = accuracy(proxy_spec, proxy_params, data.val.X, data.val.y)
    run_data = TrainData(data.train, data.val, val_adv)
    table, models = [], {}
    for lam in sorted(float(v) for v in grid):
        params, _ = train_fn(spec, run_data, config.replace(kind=kind, lam=lam))
        clean = accuracy(spec, params, data.val.X, data.val.y)
        adv = accuracy(spec, params, val_adv, data.val.y)
        table.append((lam, clean, adv))
        models[lam] = params
        log.info("lambda=%g clean=%.4f bb_fgsm=%.4f", lam, clean, adv)
    lam = choose_lambda(table, reference)
    rows = [(l, c, a, c >= 0.97 * reference) for l, c, a in table]
    return LambdaSelection(lam, rows, reference, models)
