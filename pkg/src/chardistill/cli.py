"""Command-line surface: dataset generation, pseudo-labeling, clustering
grid search, pre-training, probing, segmentation evaluation, and overlays.

Every subcommand is deterministic given its inputs and --seed; exit codes
are 0 on success, 1 for validation problems, and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import traceback

import numpy as np

from . import datagen, pseudolabel as pl, trainer
from .distill import DistillConfig
from .imaging import AugmentConfig
from .model import EncoderConfig, HeadConfig, segment_logits
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


CONFIG_DEFAULTS: dict[str, str] = {
    "encoder": "tiny",
    "patch": "4",
    "in_channels": "1",
    "tau_s": "0.1",
    "tau_t": "0.04",
    "lambda_start": "0.996",
    "lambda_end": "1.0",
    "lr": "3.1e-5",
    "lr_final": "0.0",
    "wd_start": "0.04",
    "wd_end": "0.4",
    "warmup_frac": "0.1",
    "freeze_last_steps": "200",
    "batch": "16",
    "steps": "2000",
    "n": "1024",
    "center_momentum": "0.9",  # or "off"
    "eps": "1.5",
    "min_samples": "4",
    "seg_weight": "1.0",
    "rotate_deg": "15.0",
    "shear_deg": "10.0",
    "scale_min": "0.8",
    "scale_max": "1.2",
    "translate_frac": "0.1",
    "perspective_frac": "0.1",
    "brightness": "0.4",
    "contrast": "0.4",
    "grayscale_prob": "0.2",
    "channel_dropout_prob": "0.1",
    "log_every": "50",
    "eval_every": "100",
    "seed": "0",
}


def parse_config_file(path: str | None) -> dict[str, str]:
    values = dict(CONFIG_DEFAULTS)
    if path is None:
        return values
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in CONFIG_DEFAULTS:
                raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
            values[key] = value.strip()
    return values


def dump_config(values: dict[str, str], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in CONFIG_DEFAULTS:
            fh.write(f"{key}={values[key]}\n")


@dataclasses.dataclass
class RunConfig:
    """Typed view over the flat key=value configuration."""

    raw: dict[str, str]

    def _float(self, key: str) -> float:
        try:
            return float(self.raw[key])
        except ValueError as exc:
            raise ConfigError(f"config key {key}={self.raw[key]!r} is not a number") from exc

    def _int(self, key: str) -> int:
        try:
            return int(self.raw[key])
        except ValueError as exc:
            raise ConfigError(f"config key {key}={self.raw[key]!r} is not an integer") from exc

    def encoder_cfg(self) -> EncoderConfig:
        return EncoderConfig.from_preset(self.raw["encoder"], patch=self._int("patch"),
                                         in_channels=self._int("in_channels"))

    def head_cfg(self) -> HeadConfig:
        return HeadConfig(proj_out=self._int("n"))

    def distill_cfg(self) -> DistillConfig:
        cm = self.raw["center_momentum"]
        momentum = None if cm.lower() == "off" else float(cm)
        return DistillConfig(tau_s=self._float("tau_s"), tau_t=self._float("tau_t"),
                             lambda_start=self._float("lambda_start"),
                             lambda_end=self._float("lambda_end"),
                             center_momentum=momentum,
                             seg_weight=self._float("seg_weight"), n=self._int("n"))

    def cluster_cfg(self) -> pl.ClusterConfig:
        return pl.ClusterConfig(eps=self._float("eps"), min_samples=self._int("min_samples"))

    def augment_cfg(self) -> AugmentConfig:
        return AugmentConfig(
            rotate_deg=self._float("rotate_deg"), shear_deg=self._float("shear_deg"),
            scale_range=(self._float("scale_min"), self._float("scale_max")),
            translate_frac=self._float("translate_frac"),
            perspective_frac=self._float("perspective_frac"),
            brightness=self._float("brightness"), contrast=self._float("contrast"),
            grayscale_prob=self._float("grayscale_prob"),
            channel_dropout_prob=self._float("channel_dropout_prob"))

    def train_cfg(self) -> TrainConfig:
        return TrainConfig(steps=self._int("steps"), batch=self._int("batch"),
                           lr=self._float("lr"), lr_final=self._float("lr_final"),
                           wd_start=self._float("wd_start"), wd_end=self._float("wd_end"),
                           warmup_frac=self._float("warmup_frac"),
                           freeze_last_steps=self._int("freeze_last_steps"),
                           log_every=self._int("log_every"),
                           eval_every=self._int("eval_every"), seed=self._int("seed"))


def _load_config(args: argparse.Namespace) -> RunConfig:
    values = parse_config_file(getattr(args, "config", None))
    for key in ("steps", "seed"):
        override = getattr(args, key, None)
        if override is not None:
            values[key] = str(override)
    return RunConfig(values)


def _load_samples(data_dir: str) -> list[datagen.GlyphSample]:
    if not os.path.isdir(data_dir):
        raise UsageError(f"data directory not found: {data_dir}")
    return list(datagen.read_dataset(data_dir))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg_kwargs = {}
    if args.touching is not None:
        cfg_kwargs["touching_prob"] = args.touching
    if args.noise is not None:
        cfg_kwargs["noise_sigma"] = args.noise
    cfg = datagen.GenConfig(**cfg_kwargs)
    samples = datagen.generate_dataset(args.count, args.seed, cfg)
    os.makedirs(args.out, exist_ok=True)
    manifest = datagen.write_dataset(samples, args.out)
    print(f"wrote {len(manifest)} samples to {args.out}")
    return 0


def cmd_pseudolabel(args) -> int:
    samples = _load_samples(args.data)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for i, sample in enumerate(samples):
        theta, _ = pl.kmeans2(sample.image)
        m_pl, report = pl.select_text_polarity(theta)
        datagen.write_pgm(os.path.join(args.out, f"{i:06d}_mpl.pgm"),
                          (m_pl * 255).astype(np.uint8))
        gt_union = np.zeros(m_pl.shape, dtype=np.uint8)
        for mask in sample.gt_masks.masks:
            gt_union |= mask
        iou = pl.binary_iou(m_pl, gt_union)
        rows.append((f"{i:06d}", iou, report.gamma, int(report.inverted)))
    if args.report:
        with open(args.report, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("id,iou_vs_gt,gamma,inverted\n")
            for sid, iou, gamma, inv in rows:
                fh.write(f"{sid},{iou:.6f},{gamma},{inv}\n")
    mean_iou = float(np.mean([r[1] for r in rows])) if rows else 0.0
    print(f"pseudo-labeled {len(rows)} samples, mean IoU vs ground truth {mean_iou:.4f}")
    return 0


def _parse_grid(text: str | None, default, cast):
    if text is None:
        return default
    try:
        values = tuple(cast(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise UsageError(f"bad grid value in {text!r}") from exc
    if not values:
        raise UsageError("empty grid")
    return values


def cmd_cluster_search(args) -> int:
    samples = _load_samples(args.data)
    eps_grid = _parse_grid(args.eps, pl.DEFAULT_EPS_GRID, float)
    ms_grid = _parse_grid(args.min_samples, pl.DEFAULT_MIN_SAMPLES_GRID, int)
    dataset = []
    for sample in samples:
        theta, _ = pl.kmeans2(sample.image)
        m_pl, _ = pl.select_text_polarity(theta)
        dataset.append((m_pl, sample.gt_masks))
    best, table = pl.grid_search(dataset, eps_grid, ms_grid)
    pl.write_grid_csv(table, args.report)
    best_score = max(point.mean_iou for point in table)
    print(f"best eps={best.eps} min_samples={best.min_samples} mean_iou={best_score:.4f}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    samples = _load_samples(args.data)
    state = trainer.init_train_state(cfg.encoder_cfg(), cfg.head_cfg(), cfg.distill_cfg(),
                                     cfg.cluster_cfg(), cfg.augment_cfg(), cfg.train_cfg())
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    dump_config(cfg.raw, args.out + ".cfg")
    log_path = args.log or args.out + ".log.csv"

    def progress(row: dict) -> None:
        print(f"step {row['step']:6d}  l_dis {row['l_dis']:.4f}  l_seg {row['l_seg']:.4f}  "
              f"chars {row['characters_seen']}", flush=True)

    trainer.pretrain(samples, state, log_path=log_path, ckpt_path=args.out,
                     progress=progress)
    print(f"checkpoint written to {args.out}")
    return 0


def _upsert_csv_row(path: str, header: str, key_prefix: str, row: str) -> None:
    """Write or replace one keyed row, keeping reruns idempotent."""
    lines: list[str] = []
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            content = [ln.rstrip("\n") for ln in fh if ln.strip()]
        if content and content[0] == header:
            lines = [ln for ln in content[1:] if not ln.startswith(key_prefix)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for ln in sorted(lines + [row]):
            fh.write(ln + "\n")


def cmd_probe(args) -> int:
    samples = _load_samples(args.data)
    if len(samples) <= args.holdout:
        raise UsageError(f"need more than {args.holdout} samples, got {len(samples)}")
    train_samples = samples[:len(samples) - args.holdout]
    test_samples = samples[len(samples) - args.holdout:]

    if args.random_init:
        ckpt_header, _ = trainer.load_checkpoint(args.ckpt)
        enc = ckpt_header["cfg"]["encoder"]
        enc_cfg = EncoderConfig(embed_dim=enc["embed_dim"], depth=enc["depth"],
                                heads=enc["heads"], patch=enc["patch"],
                                input_hw=tuple(enc["input_hw"]),
                                in_channels=enc["in_channels"],
                                tap_blocks=tuple(enc["tap_blocks"]))
        model = trainer.CharDistillModel(enc_cfg, HeadConfig(**ckpt_header["cfg"]["heads"]))
        trainer.init_params(model, args.seed)
        mode = "random-init"
    else:
        student, teacher, _ = trainer.load_models(args.ckpt)
        model = teacher if args.branch == "teacher" else student
        mode = f"pretrained-{args.branch}"

    acc = trainer.linear_probe(model, train_samples, test_samples, seed=args.seed)
    header = "mode,accuracy,train_samples,test_samples,seed"
    row = f"{mode},{acc:.6f},{len(train_samples)},{len(test_samples)},{args.seed}"
    _upsert_csv_row(args.report, header, mode + ",", row)
    print(f"{mode} probe accuracy: {acc:.4f}")
    return 0


def cmd_eval_seg(args) -> int:
    samples = _load_samples(args.data)
    student, _, _ = trainer.load_models(args.ckpt)
    rows = []
    for i, sample in enumerate(samples):
        logits = segment_logits(student, sample.image)
        pred = (logits[:, :, 1] > logits[:, :, 0]).astype(np.uint8)
        m_pl = trainer.pseudo_label(sample.image)
        gt_union = np.zeros(pred.shape, dtype=np.uint8)
        for mask in sample.gt_masks.masks:
            gt_union |= mask
        rows.append((f"{i:06d}", pl.binary_iou(pred, m_pl), pl.binary_iou(pred, gt_union),
                     pl.binary_iou(m_pl, gt_union)))
    mean_pl = float(np.mean([r[1] for r in rows]))
    mean_gt = float(np.mean([r[2] for r in rows]))
    mean_pl_gt = float(np.mean([r[3] for r in rows]))
    with open(args.report, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,seg_iou_vs_pseudo,seg_iou_vs_gt,pseudo_iou_vs_gt\n")
        for sid, a, b, c in rows:
            fh.write(f"{sid},{a:.6f},{b:.6f},{c:.6f}\n")
        fh.write(f"MEAN,{mean_pl:.6f},{mean_gt:.6f},{mean_pl_gt:.6f}\n")
    print(f"seg IoU vs pseudo-labels {mean_pl:.4f}, vs ground truth {mean_gt:.4f} "
          f"(pseudo-labels vs ground truth {mean_pl_gt:.4f})")
    return 0


def cmd_overlay(args) -> int:
    samples = _load_samples(args.data)
    if args.count is not None:
        samples = samples[:args.count]
    student, _, _ = trainer.load_models(args.ckpt)
    cfg = _load_config(args)
    cluster_cfg = cfg.cluster_cfg()
    os.makedirs(args.out, exist_ok=True)
    for i, sample in enumerate(samples):
        logits = segment_logits(student, sample.image)
        pred = (logits[:, :, 1] > logits[:, :, 0]).astype(np.uint8)
        datagen.write_pgm(os.path.join(args.out, f"{i:06d}_seg.pgm"),
                          (pred * 255).astype(np.uint8))
        masks = pl.char_masks_from_seg(pred, cluster_cfg)
        canvas = np.zeros(pred.shape, dtype=np.uint8)
        total = max(len(masks), 1)
        for k, mask in enumerate(masks.masks):
            level = 60 + round(195 * (k + 1) / total)
            canvas[mask > 0] = min(level, 255)
        datagen.write_pgm(os.path.join(args.out, f"{i:06d}_clusters.pgm"), canvas)
    print(f"wrote overlays for {len(samples)} samples to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    report = trainer.grad_check(seed=args.seed)
    print(f"max relative gradient error: {report.max_rel_error:.3e} "
          f"({report.checked} coordinates)")
    return 0 if report.max_rel_error < args.tol else 2


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="chardistill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--touching", type=float, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pseudolabel", help="write text/background pseudo-labels")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("cluster-search", help="grid search clustering parameters")
    p.add_argument("--data", required=True)
    p.add_argument("--eps", default=None, help="comma-separated eps grid")
    p.add_argument("--min-samples", dest="min_samples", default=None,
                   help="comma-separated min_samples grid")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_cluster_search)

    p = sub.add_parser("pretrain", help="run self-supervised pre-training")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear-probe a frozen encoder")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--random-init", dest="random_init", action="store_true")
    p.add_argument("--report", required=True)
    p.add_argument("--holdout", type=int, default=1000)
    p.add_argument("--branch", choices=("student", "teacher"), default="student")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval-seg", help="segmentation-head IoU report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser("overlay", help="write segmentation and cluster overlays")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config", default=None)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (UsageError, ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


def entrypoint() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    entrypoint()
