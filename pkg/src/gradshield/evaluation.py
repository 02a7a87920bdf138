"""Measurement artifacts: transfer matrices, accuracy curves, gradient and
log-probability distributions, fooled-set overlaps, saliency maps and
iterated-TGSM confusion grids, plus their CSV / PGM writers."""
from __future__ import annotations

import io
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attacks as A
from .autodiff import ShapeError
from .container import atomic_write
from .data import Dataset
from .models import ModelSpec, Params, accuracy, predict, predict_logits, predict_probs

GRAD_FLOOR = 1e-20
ATTACK_KINDS = ("fgsm", "tgsm", "ifgsm", "itgsm", "jsma")


@dataclass(frozen=True)
class NamedModel:
    name: str
    spec: ModelSpec
    params: Params


def _check_compatible(models: Sequence[NamedModel]):
    if not models:
        raise ValueError("need at least one model")
    dims = {(m.spec.input_dim, m.spec.num_classes) for m in models}
    if len(dims) > 1:
        raise ShapeError(f"models disagree on (input dim, classes): {sorted(dims)}")


def default_targets(y: np.ndarray) -> np.ndarray:
    return A.y_plus_1(y) if y.shape[1] == 10 else np.roll(y, 1, axis=1)


def generate(model: NamedModel, attack: str, X, y, eps: float, steps: int = 1, targets=None) -> A.AttackResult:
    """Craft a batch against ``model``; targeted kinds default to y+1 targets."""
    spec, params = model.spec, model.params
    if attack in ("tgsm", "itgsm", "jsma") and targets is None:
        targets = default_targets(y)
    if attack == "fgsm":
        return A.fgsm(spec, params, X, y, eps)
    if attack == "tgsm":
        return A.tgsm(spec, params, X, targets, eps)
    if attack == "ifgsm":
        return A.iterate(A.fgsm, spec, params, X, y, steps, eps)
    if attack == "itgsm":
        return A.iterate(A.tgsm, spec, params, X, targets, steps, eps)
    if attack == "jsma":
        return A.jsma_batch(spec, params, X, targets, eps)
    raise ValueError(f"unknown attack {attack!r}; expected one of {', '.join(ATTACK_KINDS)}")


@dataclass
class TransferMatrix:
    names: list
    accuracy: np.ndarray  # [generator, victim]
    attack: str
    eps: float
    n: int

    def entry(self, generator: str, victim: str) -> float:
        return float(self.accuracy[self.names.index(generator), self.names.index(victim)])

    def rows(self):
        for gi, g in enumerate(self.names):
            for vi, v in enumerate(self.names):
                yield g, v, self.attack, self.eps, float(self.accuracy[gi, vi])


def transfer_matrix(models: Sequence[NamedModel], attack: str, eps: float, data: Dataset, steps: int = 1) -> TransferMatrix:
    """Accuracy of every victim on examples crafted once per generator."""
    _check_compatible(models)
    acc = np.zeros((len(models), len(models)))
    for gi, gen in enumerate(models):
        X_adv = generate(gen, attack, data.X, data.y, eps, steps).X_adv
        for vi, victim in enumerate(models):
            acc[gi, vi] = accuracy(victim.spec, victim.params, X_adv, data.y)
    return TransferMatrix([m.name for m in models], acc, attack, float(eps), len(data))


def accuracy_curve(models: Sequence[NamedModel], attack: str, eps_list: Sequence[float], data: Dataset, steps: int = 1):
    """Rows (model, role, eps, accuracy); role is ``white`` or ``black:<generator>``."""
    eps_list = [float(e) for e in eps_list]
    if eps_list != sorted(eps_list):
        raise ValueError("eps list must be sorted ascending")
    rows = []
    matrices = []
    for eps in eps_list:
        tm = transfer_matrix(models, attack, eps, data, steps)
        matrices.append(tm)
        for g, v, _, _, a in tm.rows():
            rows.append((v, "white" if g == v else f"black:{g}", eps, a))
    return rows, matrices


@dataclass
class DistributionReport:
    # model name -> metric -> sorted values
    metrics: dict = field(default_factory=dict)

    def rows(self):
        for model, by_metric in self.metrics.items():
            for metric, values in by_metric.items():
                for v in values:
                    yield model, metric, float(v)


def gradient_norms(spec, params, X, targets) -> np.ndarray:
    g = A.loss_input_gradient(spec, params, X, targets)
    return np.maximum(np.linalg.norm(g, axis=1), GRAD_FLOOR)


def distribution_report(models: Sequence[NamedModel], data: Dataset) -> DistributionReport:
    """Per model: L2 norms of FGSM- and TGSM-loss input gradients and every
    predicted log probability, each floored at 1e-20 and sorted."""
    report = DistributionReport()
    for m in models:
        fg = gradient_norms(m.spec, m.params, data.X, data.y)
        tg = gradient_norms(m.spec, m.params, data.X, default_targets(data.y))
        probs = predict_probs(predict_logits(m.spec, m.params, data.X))
        logp = np.log(np.maximum(probs, GRAD_FLOOR)).ravel()
        report.metrics[m.name] = {
            "fgsm_grad_norm": np.sort(fg),
            "tgsm_grad_norm": np.sort(tg),
            "log_prob": np.sort(logp),
        }
    return report


def fooled_overlap(victims: Sequence[NamedModel], generators: Sequence[NamedModel], attack: str, eps: float, data: Dataset):
    """For each generator, example counts per exact set of fooled victims.

    Keys are tuples of victim names (the empty tuple counts examples that
    fooled nobody), covering every subset of the victims.
    """
    if len(victims) < 2:
        raise ValueError("need at least two victims")
    _check_compatible(list(victims) + list(generators))
    names = [v.name for v in victims]
    labels = data.y.argmax(axis=1)
    out = {}
    for gen in generators:
        X_adv = generate(gen, attack, data.X, data.y, eps).X_adv
        fooled = np.stack([predict(v.spec, v.params, X_adv) != labels for v in victims], axis=1)
        regions = {}
        for r in range(len(names) + 1):
            for combo in itertools.combinations(range(len(names)), r):
                member = np.zeros(len(names), dtype=bool)
                member[list(combo)] = True
                regions[tuple(names[i] for i in combo)] = int(np.sum(np.all(fooled == member, axis=1)))
        out[gen.name] = regions
    return out


def saliency(spec: ModelSpec, params: Params, x) -> np.ndarray:
    """Raw input gradient of H(1/K, y_hat) for one example."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    uniform = np.full((1, spec.num_classes), 1.0 / spec.num_classes)
    return A.loss_input_gradient(spec, params, x, uniform)[0]


@dataclass
class ConfusionGrid:
    images: np.ndarray  # (K, K, D): row = source class, column = target class
    converged: np.ndarray  # (K, K) bool; diagonal True

    @property
    def off_diagonal_rate(self) -> float:
        k = len(self.converged)
        mask = ~np.eye(k, dtype=bool)
        return float(self.converged[mask].mean()) if k > 1 else float("nan")


def confusion_grid(spec: ModelSpec, params: Params, seeds: np.ndarray, steps: int = 15, eps: float = 0.1) -> ConfusionGrid:
    """Iterated TGSM from one seed per class towards every other class."""
    seeds = np.asarray(seeds, dtype=np.float64)
    k = spec.num_classes
    if seeds.shape != (k, spec.input_dim):
        raise ShapeError(f"need one seed per class, shape {(k, spec.input_dim)}, got {seeds.shape}")
    images = np.repeat(seeds[:, None, :], k, axis=1)
    converged = np.eye(k, dtype=bool)
    if steps == 0:
        return ConfusionGrid(images, converged)
    for target in range(k):
        rows = [i for i in range(k) if i != target]
        tgt = np.zeros((len(rows), k))
        tgt[:, target] = 1.0
        res = A.iterate(A.tgsm, spec, params, seeds[rows], tgt, steps, eps)
        images[rows, target] = res.X_adv
        converged[rows, target] = res.success
    return ConfusionGrid(images, converged)


def class_seeds(data: Dataset) -> np.ndarray:
    """First example of each class, in class order."""
    labels = data.labels
    idx = []
    for c in range(data.num_classes):
        hits = np.flatnonzero(labels == c)
        if not len(hits):
            raise ValueError(f"no example of class {c}")
        idx.append(hits[0])
    return data.X[idx]


# --------------------------------------------------------------------------
# writers


def csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in row) + "\n")
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    atomic_write(path, csv_text(header, rows).encode())


def to_gray(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def signed_to_gray(img: np.ndarray) -> np.ndarray:
    """Map signed values symmetrically around mid-gray (128)."""
    scale = np.max(np.abs(img))
    if scale == 0:
        return np.full(img.shape, 128, dtype=np.uint8)
    return np.rint(128 + 127 * img / scale).astype(np.uint8)


def pgm_bytes(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def write_pgm(path, pixels: np.ndarray) -> None:
    atomic_write(path, pgm_bytes(pixels))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


def composite(images: np.ndarray, image_shape=(28, 28), pad: int = 1) -> np.ndarray:
    """Tile a (rows, cols, D) stack of [0, 1] images into one 8-bit canvas."""
    rows, cols = images.shape[:2]
    h, w = image_shape
    canvas = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            y0, x0 = pad + r * (h + pad), pad + c * (w + pad)
            canvas[y0 : y0 + h, x0 : x0 + w] = to_gray(images[r, c].reshape(h, w))
    return canvas
