"""Experiment command line: data generation, training, evaluation,
calibration, and the consistency-weight sweep.

Configuration is flat key=value text (sections model., train., loss.,
data.); defaults < config file < --set overrides < dedicated flags. Every
emitted CSV echoes the full configuration as # comments. Exit codes:
0 success, 2 usage error, 3 data error, 4 numerical abort; failures print
one machine-readable "MM-ERR:" line on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .data import (AugmentConfig, CaseSet, casewise_normalize, gen_caseset,
                   load_caseset, make_streams, save_caseset)
from .errors import (ConfigError, DimensionError, FormatError, MisMatchError,
                     NumericalAbort, ParameterError)
from .metrics import (MetricsRow, binarize, ece, emit_metrics_csv,
                      emit_reliability_csv, fmt_float, iou, reliability_bins)
from .nets import DECODER_LAYOUTS, average_prediction, init_params, model_forward
from .training import (TrainConfig, save_checkpoint, train, write_history_csv)

DEFAULT_CONFIG: dict[str, str] = {
    "model.channels": "8",
    "model.in_channels": "1",
    "train.lr": "0.001",
    "train.epochs": "10",
    "train.batch_size": "1",
    "train.save_last_k": "10",
    "train.seed": "0",
    "loss.alpha_max": "0.05",
    "loss.warmup_fraction": "0.2",
    "loss.alpha_schedule": "warmup",
    "loss.dice_smooth": "1.0",
    "loss.consistency_mode": "symmetric",
    "data.labelled_slices": "4",
    "data.augment_noise": "0.2",
}


@dataclass(frozen=True)
class VariantSpec:
    """Training-time traits of an experiment arm."""
    name: str
    semi_supervised: bool
    augment_flip: bool
    augment_noise: bool


VARIANTS: dict[str, VariantSpec] = {
    "MM": VariantSpec("MM", True, False, False),
    "MM-a": VariantSpec("MM-a", True, False, False),
    "MM-b": VariantSpec("MM-b", True, False, False),
    "MM-c": VariantSpec("MM-c", True, False, False),
    "Sup1": VariantSpec("Sup1", False, True, True),
    "Sup2": VariantSpec("Sup2", False, True, True),
    "Morph": VariantSpec("Morph", True, False, True),
}


# ---------------------------------------------------------------------------
# configuration plumbing

def parse_config_file(path) -> dict[str, str]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{ln}: expected key=value, got "
                                  f"{line!r}")
            out[key.strip()] = value.strip()
    return out


def merge_config(file_path=None, overrides=()) -> dict[str, str]:
    cfg = dict(DEFAULT_CONFIG)
    if file_path:
        for k, v in parse_config_file(file_path).items():
            if k not in cfg:
                raise ConfigError(f"unknown config key {k!r}")
            cfg[k] = v
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ParameterError(f"--set expects key=value, got {item!r}")
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = value
    return cfg


def train_config_from(cfg: dict[str, str]) -> TrainConfig:
    try:
        return TrainConfig(
            alpha_max=float(cfg["loss.alpha_max"]),
            warmup_fraction=float(cfg["loss.warmup_fraction"]),
            alpha_schedule=cfg["loss.alpha_schedule"],
            lr=float(cfg["train.lr"]),
            epochs=int(cfg["train.epochs"]),
            batch_size=int(cfg["train.batch_size"]),
            seed=int(cfg["train.seed"]),
            channels=int(cfg["model.channels"]),
            in_channels=int(cfg["model.in_channels"]),
            save_last_k=int(cfg["train.save_last_k"]),
            dice_smooth=float(cfg["loss.dice_smooth"]),
            consistency_mode=cfg["loss.consistency_mode"],
        ).validate()
    except ValueError as e:
        if isinstance(e, MisMatchError):
            raise
        raise ConfigError(f"bad config value: {e}") from None


def echo_lines(cfg: dict[str, str]) -> tuple[str, ...]:
    return tuple(f"{k}={cfg[k]}" for k in sorted(cfg))


# ---------------------------------------------------------------------------
# shared run logic

def _load_normalized(manifest) -> CaseSet:
    caseset = load_caseset(manifest)
    caseset.cases = [casewise_normalize(c) for c in caseset.cases]
    return caseset


def run_training(variant: str, cfg: dict[str, str], manifest, out_dir):
    """Train one arm and write final.ckpt, averaged.ckpt and history.csv."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of "
                          f"{sorted(VARIANTS)}")
    spec = VARIANTS[variant]
    cfg = dict(cfg)
    if not spec.semi_supervised:
        cfg["loss.alpha_max"] = "0"  # supervised arms carry no consistency
    cfg["model.variant"] = variant
    tc = train_config_from(cfg)

    caseset = _load_normalized(manifest)
    augment = None
    if spec.augment_flip or spec.augment_noise:
        sigma = float(cfg["data.augment_noise"])
        if sigma < 0:
            raise ConfigError("data.augment_noise must be >= 0")
        augment = AugmentConfig(flip=spec.augment_flip,
                                noise_sigma=sigma if spec.augment_noise else 0.0)
    labelled, unlabelled = make_streams(
        caseset, int(cfg["data.labelled_slices"]), tc.seed, tc.batch_size,
        labelled_augment=augment)
    if not spec.semi_supervised:
        unlabelled = None
    if unlabelled is None and spec.semi_supervised:
        raise ConfigError(f"variant {variant} needs an unlabelled_train split")

    model = init_params(variant, tc.channels, tc.in_channels, seed=tc.seed)
    final, averaged, history = train(tc, model, labelled, unlabelled)

    os.makedirs(out_dir, exist_ok=True)
    comments = echo_lines(cfg)
    write_history_csv(os.path.join(out_dir, "history.csv"), history, comments)
    save_checkpoint(os.path.join(out_dir, "final.ckpt"), final, cfg)
    save_checkpoint(os.path.join(out_dir, "averaged.ckpt"), averaged, cfg)
    return {
        "final": os.path.join(out_dir, "final.ckpt"),
        "averaged": os.path.join(out_dir, "averaged.ckpt"),
        "history": os.path.join(out_dir, "history.csv"),
        "config": cfg,
    }


def _head_names(model) -> list[str]:
    return ["p"] if len(model.decoders) == 1 else ["p1", "p2", "avg"]


def _case_probs(model, case) -> dict[str, np.ndarray]:
    """Forward a whole case (slices as the batch axis); no tape is active,
    so nothing is recorded."""
    probs = model_forward(model, Tensor(case.image.astype(np.float32)))
    if len(probs) == 1:
        return {"p": probs[0].data}
    return {"p1": probs[0].data, "p2": probs[1].data,
            "avg": average_prediction(probs).data}


def _slice_label(case, s: int) -> str:
    return f"{case.case_id}_s{s:03d}"


def evaluate_split(model, caseset: CaseSet, split: str, m_bins: int = 10):
    """Per-slice IoU/ECE on the averaged head plus pooled calibration.

    Returns (per_slice rows, mean_iou, std_iou, pooled_ece).
    """
    eval_head = "avg" if len(model.decoders) == 2 else "p"
    rows = []
    pooled_p, pooled_g = [], []
    for case in caseset.cases_in(split):
        probs = _case_probs(model, case)[eval_head]
        for s in range(case.image.shape[0]):
            p = probs[s, 0]
            g = case.mask[s, 0]
            slice_iou = iou(binarize(p), g)
            slice_ece = ece(reliability_bins(p, g, m_bins))
            rows.append((_slice_label(case, s), slice_iou, slice_ece))
            pooled_p.append(p.ravel())
            pooled_g.append(g.ravel())
    if not rows:
        raise ConfigError(f"split {split!r} has no slices to evaluate")
    ious = np.array([r[1] for r in rows])
    pooled = reliability_bins(np.concatenate(pooled_p),
                              np.concatenate(pooled_g), m_bins)
    return rows, float(ious.mean()), float(ious.std()), ece(pooled)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    caseset = gen_caseset(args.seed, args.kind, args.cases, args.slices,
                          args.size, args.noise_sigma)
    manifest = save_caseset(args.out, caseset)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = merge_config(args.config, args.set)
    if args.seed is not None:
        cfg["train.seed"] = str(args.seed)
    if args.labelled_slices is not None:
        cfg["data.labelled_slices"] = str(args.labelled_slices)
    out = run_training(args.variant, cfg, args.data, args.out)
    print(out["averaged"])
    return 0


def cmd_eval(args) -> int:
    from .training import load_model
    model, echo = load_model(args.checkpoint)
    caseset = _load_normalized(args.data)
    rows, mean_iou, std_iou, pooled_ece = evaluate_split(
        model, caseset, args.split, args.bins)

    comments = tuple(f"{k}={echo[k]}" for k in sorted(echo))
    os.makedirs(args.out, exist_ok=True)
    per_image = os.path.join(args.out, "per_image.csv")
    with open(per_image, "w", newline="") as f:
        for line in comments:
            f.write(f"# {line}\n")
        f.write("image,iou,ece\n")
        for label, iou_v, ece_v in rows:
            f.write(f"{label},{fmt_float(iou_v)},{fmt_float(ece_v)}\n")

    experiment = args.experiment or echo.get("experiment", "default")
    row = MetricsRow(experiment=experiment,
                     seed=int(echo.get("train.seed", "0")),
                     model=echo.get("model.variant", "unknown"),
                     iou=mean_iou, ece=pooled_ece)
    emit_metrics_csv([row], os.path.join(args.out, "metrics.csv"), comments)
    print(f"{args.split} iou {fmt_float(mean_iou)} +/- {fmt_float(std_iou)} "
          f"ece {fmt_float(pooled_ece)}")
    return 0


def cmd_calibrate(args) -> int:
    from .training import load_model
    model, echo = load_model(args.checkpoint)
    caseset = _load_normalized(args.data)
    cases = caseset.cases_in(args.split)
    if not cases:
        raise ConfigError(f"split {args.split!r} is empty")
    heads = _head_names(model)
    comments = tuple(f"{k}={echo[k]}" for k in sorted(echo))
    os.makedirs(args.out, exist_ok=True)

    pooled: dict[str, list[np.ndarray]] = {h: [] for h in heads}
    pooled_gt: list[np.ndarray] = []
    summary: list[tuple[str, str, float]] = []
    per_image_files = []
    for case in cases:
        probs = _case_probs(model, case)
        for s in range(case.image.shape[0]):
            g = case.mask[s, 0].ravel()
            pooled_gt.append(g)
            for h in heads:
                p = probs[h][s, 0].ravel()
                pooled[h].append(p)
                bins = reliability_bins(p, g, args.bins)
                label = _slice_label(case, s)
                fname = f"reliability_{label}_{h}.csv"
                emit_reliability_csv(bins, os.path.join(args.out, fname),
                                     comments)
                per_image_files.append(fname)
                summary.append((label, h, ece(bins)))

    gt_all = np.concatenate(pooled_gt)
    pooled_rows = []
    for h in heads:
        bins = reliability_bins(np.concatenate(pooled[h]), gt_all, args.bins)
        emit_reliability_csv(
            bins, os.path.join(args.out, f"reliability_pooled_{h}.csv"),
            comments)
        pooled_rows.append(("pooled", h, ece(bins)))

    with open(os.path.join(args.out, "calibration.csv"), "w", newline="") as f:
        for line in comments:
            f.write(f"# {line}\n")
        f.write("scope,head,ece\n")
        for scope, h, e in pooled_rows + summary:
            f.write(f"{scope},{h},{fmt_float(e)}\n")
    print(os.path.join(args.out, "calibration.csv"))
    return 0


def cmd_sweep_alpha(args) -> int:
    tokens = [t.strip() for t in args.values.split(",") if t.strip()]
    if not tokens:
        raise ParameterError("--values needs at least one alpha")
    for t in tokens:
        try:
            v = float(t)
        except ValueError:
            raise ParameterError(f"bad alpha value {t!r}") from None
        if v < 0:
            raise ParameterError(f"alpha must be >= 0, got {t}")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ParameterError("--seeds needs at least one seed")
    base_cfg = merge_config(args.config, args.set)
    if args.labelled_slices is not None:
        base_cfg["data.labelled_slices"] = str(args.labelled_slices)

    def run_arm(arm):
        token, seed = arm
        cfg = dict(base_cfg)
        cfg["loss.alpha_max"] = token
        cfg["train.seed"] = str(seed)
        out_dir = os.path.join(args.out, f"alpha_{token}", f"seed_{seed}")
        paths = run_training(args.variant, cfg, args.data, out_dir)
        from .training import load_model
        model, _ = load_model(paths["averaged"])
        caseset = _load_normalized(args.data)
        _, mean_iou, _, _ = evaluate_split(model, caseset, "test", args.bins)
        return mean_iou

    arms = [(t, s) for t in tokens for s in seeds]
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            results = dict(zip(arms, pool.map(run_arm, arms)))
    else:
        results = {arm: run_arm(arm) for arm in arms}

    summary_path = os.path.join(args.out, "alpha_sweep.csv")
    os.makedirs(args.out, exist_ok=True)
    with open(summary_path, "w", newline="") as f:
        for line in echo_lines(base_cfg):
            f.write(f"# {line}\n")
        f.write("alpha,mean_iou\n")
        for t in tokens:   # alpha column echoes the input tokens exactly
            mean_iou = float(np.mean([results[(t, s)] for s in seeds]))
            f.write(f"{t},{fmt_float(mean_iou)}\n")
    print(summary_path)
    return 0


# ---------------------------------------------------------------------------
# parser and entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"MM-ERR: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mismatch",
                description="Semi-supervised segmentation experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[], help="generate a synthetic "
                       "case set and manifest")
    g.add_argument("--kind", choices=("tubes", "blobs"), required=True)
    g.add_argument("--cases", type=int, default=10)
    g.add_argument("--slices", type=int, default=8)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-sigma", type=float, default=0.8)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant on a manifest")
    t.add_argument("--variant", choices=sorted(VARIANTS), required=True)
    t.add_argument("--data", required=True, help="manifest path")
    t.add_argument("--labelled-slices", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--bins", type=int, default=10)
    e.add_argument("--experiment", default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("calibrate", help="reliability diagrams and ECE")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--split", default="test")
    c.add_argument("--bins", type=int, default=10)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("sweep-alpha", help="train/evaluate over consistency "
                       "weights")
    s.add_argument("--values", default="0,0.0005,0.001,0.002,0.004")
    s.add_argument("--seeds", default="0")
    s.add_argument("--variant", choices=sorted(VARIANTS), default="MM")
    s.add_argument("--data", required=True)
    s.add_argument("--labelled-slices", type=int, default=None)
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--config", default=None)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep_alpha)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ParameterError as e:
        print(f"MM-ERR: {e}", file=sys.stderr)
        return 2
    except NumericalAbort as e:
        print(f"MM-ERR: {e}", file=sys.stderr)
        return 4
    except (ConfigError, FormatError, DimensionError, MisMatchError) as e:
        print(f"MM-ERR: {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(f"MM-ERR: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
