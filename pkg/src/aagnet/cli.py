"""Command-line entry point: ``aagnet {train,evaluate,gate-report,inspect,predict}``.

Settings come from flags, optionally overlaid on a ``key=value`` file given
with ``--config`` (flags win over the file, the file over built-in defaults).
Set ``AAGNET_NUM_THREADS`` to cap kernel threads.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("aagnet")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    data: str | None = None
    out: str = "runs"
    seed: int = 0
    scale: float = 1.0
    epochs: int = 50
    batch_size: int = 20
    lr: float = 1e-4
    checkpoint: str | None = None
    freeze_alpha: bool = False
    split: str = "test"
    train_split: str = "train"
    val_fraction: float = 0.1
    augment: bool = True
    image: str | None = None
    workers: int = 1


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment. Dashes in keys map
    to underscores so ``batch-size=8`` and ``batch_size=8`` are equivalent."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aagnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, ckpt=False):
        sp.add_argument("--config", help="key=value file overlaying the defaults")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="base directory for run outputs")
        if data:
            sp.add_argument("--data", help="dataset root containing split directories")
            sp.add_argument("--workers", type=int, help="image decoding threads")
        if ckpt:
            sp.add_argument("--checkpoint", help="checkpoint file (config read from <file>.json)")
            sp.add_argument("--freeze-alpha", dest="freeze_alpha", action="store_const", const=True,
                            help="ablation: pin the gate at 0.5")

    t = sub.add_parser("train", help="train and write checkpoint, log and validation report")
    common(t)
    t.add_argument("--scale", type=float, help="uniform width/input scale factor (default 1)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--train-split", dest="train_split")
    t.add_argument("--val-fraction", dest="val_fraction", type=float)
    t.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    t.add_argument("--freeze-alpha", dest="freeze_alpha", action="store_const", const=True)

    e = sub.add_parser("evaluate", help="metrics report for a checkpoint on a split")
    common(e, ckpt=True)
    e.add_argument("--split", help="split directory, or 'val' for the seeded training holdout")
    e.add_argument("--train-split", dest="train_split")
    e.add_argument("--val-fraction", dest="val_fraction", type=float)

    g = sub.add_parser("gate-report", help="per-class gate activation statistics")
    common(g, ckpt=True)
    g.add_argument("--split")
    g.add_argument("--train-split", dest="train_split")
    g.add_argument("--val-fraction", dest="val_fraction", type=float)

    i = sub.add_parser("inspect", help="per-layer output shapes and parameter counts")
    common(i, data=False)
    i.add_argument("--scale", type=float)
    i.add_argument("--checkpoint")

    pr = sub.add_parser("predict", help="class probabilities for one image, as JSON")
    common(pr, data=False, ckpt=True)
    pr.add_argument("--image", required=True)
    return p


_TYPES = {"seed": int, "scale": float, "epochs": int, "batch_size": int, "lr": float,
          "val_fraction": float, "workers": int, "freeze_alpha": _bool, "augment": _bool}


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(command=args.command)
    overlay = read_config_file(args.config) if getattr(args, "config", None) else {}
    for k, v in overlay.items():
        if not hasattr(cfg, k) or k == "command":
            raise ConfigError(f"unknown config key {k!r}")
        try:
            setattr(cfg, k, _TYPES.get(k, str)(v))
        except ValueError as e:
            raise ConfigError(f"bad value for {k}: {v!r}") from e
    for k, v in vars(args).items():
        if v is not None and hasattr(cfg, k) and k != "command":
            setattr(cfg, k, v)
    if cfg.epochs < 1:
        raise ConfigError(f"--epochs must be >= 1, got {cfg.epochs}")
    if cfg.batch_size < 1:
        raise ConfigError(f"--batch-size must be >= 1, got {cfg.batch_size}")
    if cfg.scale <= 0:
        raise ConfigError(f"--scale must be positive, got {cfg.scale}")
    if not 0 < cfg.val_fraction < 1:
        raise ConfigError(f"--val-fraction must lie in (0, 1), got {cfg.val_fraction}")
    if cfg.lr <= 0:
        raise ConfigError(f"--lr must be positive, got {cfg.lr}")
    return cfg


def make_run_dir(base, seed: int) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    run = Path(base) / f"{stamp}-seed{seed}"
    k = 1
    while run.exists():
        run = Path(base) / f"{stamp}-seed{seed}-{k}"
        k += 1
    run.mkdir(parents=True)
    return run


# ---------------------------------------------------------------- commands


def _model_config(scale: float, **overrides):
    from .model import ModelConfig

    try:
        if scale == 1.0:
            return ModelConfig(**overrides)
        return ModelConfig.scaled(scale, **overrides)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _require(value, flag):
    if not value:
        raise ConfigError(f"{flag} is required")
    return value


def _load_split(cfg: RunConfig, image_size: int):
    from .data import holdout_split, load_dataset

    data = _require(cfg.data, "--data")
    if cfg.split == "val":
        full = load_dataset(data, cfg.train_split, image_size, cfg.workers)
        return holdout_split(full, cfg.val_fraction, cfg.seed)[1]
    return load_dataset(data, cfg.split, image_size, cfg.workers)


def _load_model(cfg: RunConfig):
    from .checkpoint import load_checkpoint, read_sidecar

    ckpt = _require(cfg.checkpoint, "--checkpoint")
    config, class_names = read_sidecar(ckpt)
    model = load_checkpoint(ckpt, config)
    model.freeze_alpha = bool(cfg.freeze_alpha)
    return model, class_names


def cmd_train(cfg: RunConfig) -> int:
    from .checkpoint import write_sidecar
    from .data import AugmentConfig, holdout_split, load_dataset
    from .metrics import evaluate
    from .model import build_model
    from .train import TrainConfig, fit

    data = _require(cfg.data, "--data")
    probe = _model_config(cfg.scale)
    full = load_dataset(data, cfg.train_split, probe.input_hw, cfg.workers)
    if len(full) == 0:
        from .data import DatasetError

        raise DatasetError(f"no readable images under {data}/{cfg.train_split}")
    model_cfg = _model_config(cfg.scale, num_classes=len(full.class_names))
    train, val = holdout_split(full, cfg.val_fraction, cfg.seed)

    run = make_run_dir(cfg.out, cfg.seed)
    ckpt = run / "model.ckpt"
    model = build_model(model_cfg, seed=cfg.seed)
    model.freeze_alpha = cfg.freeze_alpha
    write_sidecar(ckpt, model_cfg, full.class_names)
    tc = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed,
                     augment=AugmentConfig(seed=cfg.seed) if cfg.augment else None,
                     checkpoint_path=str(ckpt), log_path=str(run / "training_log.csv"))
    history = fit(model, train, val, tc)
    report = evaluate(model, val)
    report.write(run, prefix="val")
    summary = {"run_dir": str(run), "checkpoint": str(ckpt), "epochs_run": len(history),
               "stopped_early": history.stopped_early, "best_epoch": history.best_epoch,
               "best_val_acc": history.best_val_acc, "val_accuracy": report.accuracy}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    from .metrics import evaluate

    model, class_names = _load_model(cfg)
    split = _load_split(cfg, model.config.input_hw)
    if len(split) == 0:
        from .data import DatasetError

        raise DatasetError(f"split {cfg.split!r} contains no readable images")
    report = evaluate(model, split)
    run = make_run_dir(cfg.out, cfg.seed)
    report.write(run, prefix=cfg.split)
    print(json.dumps({"run_dir": str(run), "accuracy": report.accuracy,
                      "macro_auc": None if np.isnan(report.macro_auc) else report.macro_auc,
                      "weighted_f1": report.weighted.f1}, indent=2))
    return EXIT_OK


def cmd_gate_report(cfg: RunConfig) -> int:
    from .gates import collect_gates, gate_summary_csv

    model, _ = _load_model(cfg)
    split = _load_split(cfg, model.config.input_hw)
    if len(split) == 0:
        from .data import DatasetError

        raise DatasetError(f"split {cfg.split!r} contains no readable images")
    report = collect_gates(model, split)
    run = make_run_dir(cfg.out, cfg.seed)
    digest = gate_summary_csv(report, run / "gates.csv")
    by_true = {n: s.mean for n, s in zip(report.class_names, report.by_true)}
    print(json.dumps({"run_dir": str(run), "gates_csv": str(run / "gates.csv"), "sha256": digest,
                      "mean_alpha": report.population_mean, "mean_alpha_by_true_class": by_true},
                     indent=2, default=lambda v: None))
    return EXIT_OK


def cmd_inspect(cfg: RunConfig) -> int:
    from .checkpoint import read_sidecar
    from .model import analytic_param_count, build_model, layer_summary

    if cfg.checkpoint:
        model_cfg, _ = read_sidecar(cfg.checkpoint)
    else:
        model_cfg = _model_config(cfg.scale)
    model = build_model(model_cfg, seed=cfg.seed)
    rows = layer_summary(model)
    width = max(len(r[0]) for r in rows)
    print(f"{'layer':<{width}}  {'output shape':<20}  {'params':>10}")
    for name, shape, n in rows:
        print(f"{name:<{width}}  {str(tuple(shape)):<20}  {n:>10,}")
    total = model.total_params
    assert total == sum(r[2] for r in rows) == analytic_param_count(model_cfg)
    print(f"{'total':<{width}}  {'':<20}  {total:>10,}")
    return EXIT_OK


def cmd_predict(cfg: RunConfig) -> int:
    from .data import _load_image
    from .model import forward

    model, class_names = _load_model(cfg)
    path = Path(_require(cfg.image, "--image"))
    try:
        img = _load_image(path, model.config.input_hw)
    except Exception as e:
        from .data import DatasetError

        raise DatasetError(f"cannot read image {path}: {e}") from e
    probs = forward(model, img[None]).probs.data[0].astype(float)
    names = class_names or [str(i) for i in range(len(probs))]
    print(json.dumps({"image": str(path), "predicted": names[int(probs.argmax())],
                      "probabilities": dict(zip(names, probs.tolist()))}, indent=2))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "gate-report": cmd_gate_report,
            "inspect": cmd_inspect, "predict": cmd_predict}


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .data import DatasetError
    from .tensor import NonFiniteError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[cfg.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
