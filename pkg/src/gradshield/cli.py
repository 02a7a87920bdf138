"""Batch command line: ``gradshield {train,select-lambda,attack,eval}``.

Exit codes: 0 success, 2 usage/config, 3 data, 4 numeric failure. Failures
print one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import attacks as A
from . import container
from . import data as D
from . import defenses as F
from . import evaluation as E
from . import models as M

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code = code
        self.kind = kind
        self.extra = extra


def _hash_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command: str, settings: dict, inputs: list, outputs: list, started: float, seeds: dict) -> None:
    manifest = {
        "command": command,
        "settings": settings,
        "seeds": seeds,
        "inputs": {str(p): _hash_file(p) for p in inputs},
        "outputs": {str(p): _hash_file(p) for p in outputs},
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    container.atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _load_data(args):
    images = args.data_images or str(D.DEFAULT_MNIST_DIR / D.MNIST_IMAGES)
    labels = args.data_labels or str(D.DEFAULT_MNIST_DIR / D.MNIST_LABELS)
    try:
        fractions = tuple(float(f) for f in args.split.split(","))
        full = D.load_idx(images, labels)
        parts = D.split(full, fractions, args.split_seed)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_DATA, "data", str(exc)) from None
    return dict(zip(("train", "val", "test"), parts)), [images, labels]


def _limit(ds: D.Dataset, n: int | None) -> D.Dataset:
    return ds if not n else ds.subset(np.arange(min(n, len(ds))))


def _read_config(args) -> F.DefenseConfig:
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise CliError(EXIT_CONFIG, "config", str(exc)) from None
    try:
        cfg = F.config_from_text(text, args.profile)
    except F.ConfigError as exc:
        raise CliError(EXIT_CONFIG, "config", str(exc), key=exc.key, line=exc.line) from None
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _load_model(path, name: str | None = None) -> tuple[E.NamedModel, str]:
    try:
        spec, params, _ = M.load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_DATA, "data", f"{path}: {exc}") from None
    return E.NamedModel(name or Path(path).stem, spec, params), _hash_file(path)


def model_ids(paths) -> list[str]:
    """File stems, or ``<dir>_<stem>`` when stems collide (e.g. several run/model.gsh)."""
    paths = [Path(p) for p in paths]
    ids = [p.stem for p in paths]
    if len(set(ids)) < len(ids):
        ids = [f"{p.parent.name}_{p.stem}" for p in paths]
    if len(set(ids)) < len(ids):
        raise CliError(EXIT_CONFIG, "config", f"checkpoints need distinct names, got {ids}")
    return ids


def _seed_pool(splits, part: str) -> D.Dataset:
    order = [part] + [k for k in ("test", "val", "train") if k != part]
    parts = [splits[k] for k in order if len(splits[k])]
    return D.Dataset(np.vstack([p.X for p in parts]), np.vstack([p.y for p in parts]))


def cmd_train(args) -> int:
    started = time.time()
    cfg = _read_config(args)
    splits, inputs = _load_data(args)
    spec = M.ARCHITECTURES[cfg.arch]()
    if splits["train"].X.shape[1] != spec.input_dim:
        raise CliError(EXIT_DATA, "data", f"inputs have {splits['train'].X.shape[1]} features, {cfg.arch} expects {spec.input_dim}")
    out = Path(args.out)
    tdata = F.TrainData(splits["train"], splits["val"])
    if args.proxy:
        proxy, _ = _load_model(args.proxy)
        inputs.append(args.proxy)
        tdata.val_adv = A.fgsm(proxy.spec, proxy.params, splits["val"].X, splits["val"].y, args.proxy_eps).X_adv
    outputs = []
    try:
        if cfg.kind == "distilled":
            teacher, params, report = F.distill_train(spec, tdata, cfg)
            M.save_checkpoint(out / "teacher.gsh", spec, teacher, {"config": cfg.to_text(), "role": "teacher"})
            outputs.append(out / "teacher.gsh")
        else:
            params, report = F.train(spec, tdata, cfg)
    except F.NumericError as exc:
        raise CliError(EXIT_NUMERIC, "numeric", str(exc), iteration=exc.iteration) from None
    M.save_checkpoint(out / "model.gsh", spec, params, {"config": cfg.to_text()})
    container.atomic_write(out / "report.csv", report.to_csv().encode())
    outputs += [out / "model.gsh", out / "report.csv"]
    settings = {"config": cfg.to_text(), "profile": args.profile, "split": args.split, "split_seed": args.split_seed}
    write_manifest(out / "manifest.json", "train", settings, inputs, outputs, started, {"train": cfg.seed, "split": args.split_seed})
    print(out / "model.gsh")
    return EXIT_OK


def cmd_select_lambda(args) -> int:
    started = time.time()
    cfg = _read_config(args)
    splits, inputs = _load_data(args)
    spec = M.ARCHITECTURES[cfg.arch]()
    proxy, _ = _load_model(args.proxy)
    inputs.append(args.proxy)
    grid = [float(v) for v in args.grid.split(",")]
    try:
        sel = F.select_lambda(spec, F.TrainData(splits["train"], splits["val"]), grid, cfg, (proxy.spec, proxy.params), args.proxy_eps, cfg.kind if cfg.kind != "normal" else "doubleback")
    except F.InfeasibleLambdaError as exc:
        raise CliError(EXIT_NUMERIC, "infeasible", str(exc)) from None
    out = Path(args.out)
    E.write_csv(out / "lambda.csv", ("lam", "clean_acc", "bb_fgsm_acc", "feasible"), [(l, c, a, int(f)) for l, c, a, f in sel.table])
    M.save_checkpoint(out / "model.gsh", spec, sel.models[sel.lam], {"config": cfg.replace(lam=sel.lam).to_text()})
    outputs = [out / "lambda.csv", out / "model.gsh"]
    write_manifest(out / "manifest.json", "select-lambda", {"grid": grid, "config": cfg.to_text(), "selected": sel.lam}, inputs, outputs, started, {"train": cfg.seed})
    print(sel.lam)
    return EXIT_OK


def _targets(spec: str, y: np.ndarray) -> np.ndarray:
    if spec == "y+1":
        return E.default_targets(y)
    if spec.startswith("fixed:"):
        k = int(spec.split(":", 1)[1])
        if not 0 <= k < y.shape[1]:
            raise CliError(EXIT_CONFIG, "config", f"target class {k} out of range")
        return A.fixed_target(len(y), k, y.shape[1])
    raise CliError(EXIT_CONFIG, "config", f"unknown targets {spec!r}")


def cmd_attack(args) -> int:
    started = time.time()
    model, ck_hash = _load_model(args.checkpoint)
    splits, inputs = _load_data(args)
    ds = _limit(splits[args.part], args.limit)
    targets = _targets(args.targets, ds.y) if args.attack in ("tgsm", "itgsm", "jsma") else None
    budget = args.gamma if args.attack == "jsma" else args.eps
    result = E.generate(model, args.attack, ds.X, ds.y, budget, args.steps, targets)
    settings = {"attack": args.attack, "eps": args.eps, "steps": args.steps, "gamma": args.gamma, "targets": args.targets, "part": args.part, "limit": args.limit}
    out = Path(args.out)
    A.save_batch(out, result, ds.y, ck_hash, settings)
    write_manifest(out.with_name(out.name + ".manifest.json"), "attack", settings, inputs + [args.checkpoint], [out], started, {"split": args.split_seed, "run": args.seed})
    print(f"success_rate={result.success_rate:.4f}")
    return EXIT_OK


def _fmt_eps(eps: float) -> str:
    return f"{eps:g}"


def cmd_eval(args) -> int:
    started = time.time()
    models = [_load_model(p, name)[0] for p, name in zip(args.checkpoint, model_ids(args.checkpoint))]
    try:
        E._check_compatible(models)
    except ValueError as exc:
        raise CliError(EXIT_DATA, "data", str(exc)) from None
    splits, inputs = _load_data(args)
    ds = _limit(splits[args.part], args.limit)
    eps_list = sorted(float(e) for e in args.eps.split(","))
    out = Path(args.out)
    outputs = []

    rows, matrices = E.accuracy_curve(models, args.attack, eps_list, ds, args.steps)
    E.write_csv(out / "matrix.csv", ("generator", "victim", "attack", "eps", "accuracy"), [r for tm in matrices for r in tm.rows()])
    E.write_csv(out / "curve.csv", ("model", "role", "eps", "accuracy"), rows)
    dist = E.distribution_report(models, ds)
    E.write_csv(out / "dist.csv", ("model", "metric", "value"), dist.rows())
    outputs += [out / "matrix.csv", out / "curve.csv", out / "dist.csv"]

    if not args.no_images:
        h, w = models[0].spec.input_shape[:2] if len(models[0].spec.input_shape) == 3 else (1, models[0].spec.input_dim)
        try:
            seeds = E.class_seeds(_seed_pool(splits, args.part))
        except ValueError as exc:
            raise CliError(EXIT_DATA, "data", str(exc)) from None
        for m in models:
            sal = np.stack([E.saliency(m.spec, m.params, s) for s in seeds])
            canvas = np.hstack([E.signed_to_gray(s.reshape(h, w)) for s in sal])
            path = out / f"saliency_{m.name}.pgm"
            E.write_pgm(path, canvas)
            outputs.append(path)
            grid = E.confusion_grid(m.spec, m.params, seeds, args.grid_steps, args.grid_eps)
            path = out / f"grid_{m.name}_eps{_fmt_eps(args.grid_eps)}.pgm"
            E.write_pgm(path, E.composite(grid.images, (h, w)))
            outputs.append(path)
            for eps in eps_list:
                adv = E.generate(m, args.attack, ds.X[:10], ds.y[:10], eps, args.steps).X_adv
                path = out / f"adv_{m.name}_eps{_fmt_eps(eps)}.pgm"
                E.write_pgm(path, E.composite(adv[None], (h, w)))
                outputs.append(path)

    settings = {"attack": args.attack, "eps": eps_list, "steps": args.steps, "part": args.part, "examples": len(ds), "grid_steps": args.grid_steps, "grid_eps": args.grid_eps}
    write_manifest(out / "manifest.json", "eval", settings, inputs + list(args.checkpoint), outputs, started, {"split": args.split_seed, "run": args.seed})
    print(out / "matrix.csv")
    return EXIT_OK


def _data_flags(p):
    p.add_argument("--data-images", help="IDX image file (default: bundled 10k MNIST)")
    p.add_argument("--data-labels", help="IDX label file")
    p.add_argument("--split", default="0.5,0.1,0.4", help="train,val,test fractions")
    p.add_argument("--split-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradshield")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one defense")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=sorted(F.PROFILES))
    p.add_argument("--proxy", help="normal-model checkpoint for black-box validation accuracy")
    p.add_argument("--proxy-eps", type=float, default=0.3)
    _data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select-lambda", help="grid-search the penalty strength")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--proxy", required=True)
    p.add_argument("--proxy-eps", type=float, default=0.3)
    p.add_argument("--grid", default="0.1,1,10,100")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=sorted(F.PROFILES))
    _data_flags(p)
    p.set_defaults(func=cmd_select_lambda)

    p = sub.add_parser("attack", help="craft an adversarial batch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attack", choices=E.ATTACK_KINDS, required=True)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--gamma", type=float, default=0.25)
    p.add_argument("--targets", default="y+1", help="y+1 or fixed:<k>")
    p.add_argument("--part", choices=("train", "val", "test"), default="test")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True, help="output batch file")
    p.add_argument("--seed", type=int, help="recorded in the manifest; attacks are deterministic")
    _data_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="transfer matrices, curves, distributions and images")
    p.add_argument("--checkpoint", action="append", required=True, help="repeat for each model")
    p.add_argument("--attack", choices=("fgsm", "tgsm", "ifgsm", "itgsm"), default="fgsm")
    p.add_argument("--eps", default="0.1,0.2,0.3,0.4", help="comma-separated, ascending")
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--grid-steps", type=int, default=15)
    p.add_argument("--grid-eps", type=float, default=0.1)
    p.add_argument("--part", choices=("train", "val", "test"), default="test")
    p.add_argument("--limit", type=int)
    p.add_argument("--no-images", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="recorded in the manifest; evaluation is deterministic")
    _data_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        payload = {"error": exc.kind, "message": str(exc), **exc.extra}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
