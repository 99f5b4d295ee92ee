"""Optimization machinery and the self-distillation pre-training loop.

The loop follows a fixed per-step order: build the two views, compute the
pseudo-label, train the segmentation head on it, cluster a text mask into
per-character masks, align them across views, pool and project characters
through both branches, backpropagate through the student only, step the
optimizer, refresh the teacher center, and finally move the teacher by EMA.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import distill as D
from .datagen import GlyphSample
from .imaging import AugmentConfig, ImageBuffer, make_view_pair, to_grayscale
from .model import (CharDistillModel, EncoderConfig, HeadConfig, init_params,
                    load_checkpoint, load_into_model, pool_with_weights, role_of,
                    save_checkpoint, state_arrays, token_weight_stack)
from .pseudolabel import (CharMaskSet, ClusterConfig, binary_iou, char_masks_from_seg,
                          kmeans2, select_text_polarity)

METRICS_HEADER = "step,lr,wd,lambda,l_dis,l_seg,teacher_std,chars_per_batch"


class OptimizerError(RuntimeError):
    """Raised when a gradient is unusable."""


@dataclasses.dataclass(frozen=True)
class Schedule:
    """Cosine schedule with an optional linear warmup from zero."""

    base: float
    final: float
    total_steps: int
    warmup_steps: int = 0

    def __post_init__(self):
        if self.total_steps < 0 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"bad schedule steps: total {self.total_steps}, "
                             f"warmup {self.warmup_steps}")


def schedule_value(s: Schedule, step: int) -> float:
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.base * step / s.warmup_steps
    span = s.total_steps - s.warmup_steps
    if span == 0:
        return s.base if step == s.warmup_steps else s.final
    t = step - s.warmup_steps
    return s.final + 0.5 * (s.base - s.final) * (1.0 + math.cos(math.pi * t / span))


class AdamW:
    """Decoupled-weight-decay Adam over named parameters.

    Decay is applied before the Adam delta and skipped for 1-D tensors
    (biases and normalization gains). Rows of unit-norm linear directions
    are re-normalized after every step, so their stored magnitude stays 1.
    """

    def __init__(self, named_params: dict[str, nn.Parameter],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float, wd: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            grad = p.grad
            if grad is None:
                continue
            if not torch.isfinite(grad).all():
                raise OptimizerError(f"non-finite gradient in {name!r}")
            m = self.m[name].mul_(self.beta1).add_(grad, alpha=1 - self.beta1)
            v = self.v[name].mul_(self.beta2).addcmul_(grad, grad, value=1 - self.beta2)
            if wd != 0.0 and p.ndim > 1:
                p.add_(p, alpha=-lr * wd)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
            if name.endswith("weight_v"):
                p.div_(p.norm(dim=1, keepdim=True).clamp_min(1e-12))


@dataclasses.dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 16
    # reference recipe: 5e-4 at batch 288; linear scaling for the default batch
    lr: float = 3.1e-5
    lr_final: float = 0.0
    wd_start: float = 0.04
    wd_end: float = 0.4
    warmup_frac: float = 0.1
    freeze_last_steps: int = 200
    log_every: int = 50
    eval_every: int = 100
    bootstrap_holdout: int = 64
    bootstrap_iou: float = 0.5
    seed: int = 0


@dataclasses.dataclass
class TrainState:
    student: CharDistillModel
    teacher: CharDistillModel
    opt: AdamW
    center: torch.Tensor
    step: int
    rng: np.random.Generator
    encoder_cfg: EncoderConfig
    head_cfg: HeadConfig
    distill_cfg: D.DistillConfig
    cluster_cfg: ClusterConfig
    augment_cfg: AugmentConfig
    train_cfg: TrainConfig
    lr_schedule: Schedule
    wd_schedule: Schedule
    lambda_schedule: Schedule
    use_seg_masks: bool = False


def init_train_state(encoder_cfg: EncoderConfig, head_cfg: HeadConfig,
                     distill_cfg: D.DistillConfig, cluster_cfg: ClusterConfig,
                     augment_cfg: AugmentConfig, train_cfg: TrainConfig) -> TrainState:
    """Fresh student/teacher pair; the teacher starts as an exact copy."""
    student = CharDistillModel(encoder_cfg, head_cfg, with_seg_head=True)
    init_params(student, train_cfg.seed)
    teacher = CharDistillModel(encoder_cfg, head_cfg, with_seg_head=False)
    teacher_params = dict(teacher.named_parameters())
    with torch.no_grad():
        for name, param in student.named_parameters():
            if name in teacher_params:
                teacher_params[name].copy_(param)
    for param in teacher.parameters():
        param.requires_grad_(False)
    student.train()
    teacher.train()

    warmup = int(round(train_cfg.warmup_frac * train_cfg.steps))
    total = max(train_cfg.steps, 1)
    return TrainState(
        student=student,
        teacher=teacher,
        opt=AdamW(dict(student.named_parameters())),
        center=torch.zeros(head_cfg.proj_out),
        step=0,
        rng=np.random.default_rng(train_cfg.seed),
        encoder_cfg=encoder_cfg,
        head_cfg=head_cfg,
        distill_cfg=distill_cfg,
        cluster_cfg=cluster_cfg,
        augment_cfg=augment_cfg,
        train_cfg=train_cfg,
        lr_schedule=Schedule(train_cfg.lr, train_cfg.lr_final, total, min(warmup, total)),
        wd_schedule=Schedule(train_cfg.wd_start, train_cfg.wd_end, total),
        lambda_schedule=Schedule(distill_cfg.lambda_start, distill_cfg.lambda_end, total),
    )


def _to_batch(images: Sequence[ImageBuffer]) -> torch.Tensor:
    stack = np.stack([np.transpose(img.data, (2, 0, 1)) for img in images])
    return torch.from_numpy(stack).float()


def pseudo_label(img: ImageBuffer) -> np.ndarray:
    theta, _ = kmeans2(to_grayscale(img))
    m_pl, _ = select_text_polarity(theta)
    return m_pl


def _char_masks_for_sample(state: TrainState, m_pl: np.ndarray,
                           seg_pred: np.ndarray | None) -> CharMaskSet:
    if state.use_seg_masks and seg_pred is not None:
        source, _ = select_text_polarity(seg_pred)
    else:
        source = m_pl
    return char_masks_from_seg(source, state.cluster_cfg)


def pretrain_step(images: Sequence[ImageBuffer], state: TrainState) -> dict:
    """One optimization step over a batch of raw images."""
    cfg = state.distill_cfg
    patch = state.encoder_cfg.patch
    batch = len(images)

    pairs = [make_view_pair(img, state.rng, state.augment_cfg) for img in images]
    m_pls = [pseudo_label(pair.x_reg) for pair in pairs]

    x = torch.cat([_to_batch([p.x_reg for p in pairs]),
                   _to_batch([p.x_irr for p in pairs])])
    grids, taps = state.student.encoder(x)
    reg_taps = [t[:batch] for t in taps]
    seg_logits = state.student.seg_head(reg_taps)
    l_seg = D.seg_loss(seg_logits, torch.from_numpy(np.stack(m_pls)))

    seg_preds = seg_logits.argmax(dim=1).detach().numpy().astype(np.uint8) \
        if state.use_seg_masks else [None] * batch
    weight_pairs = []
    for k in range(batch):
        masks = _char_masks_for_sample(state, m_pls[k], seg_preds[k])
        quad = D.align_masks(masks, pairs[k].pi_irr, patch)
        if len(quad) == 0:
            continue
        weight_pairs.append((k, token_weight_stack(quad.s_reg, patch),
                             token_weight_stack(quad.s_irr, patch)))

    pooled_reg, pooled_irr = [], []
    for k, w_reg, w_irr in weight_pairs:
        pooled_reg.append(pool_with_weights(grids[k], w_reg))
        pooled_irr.append(pool_with_weights(grids[batch + k], w_irr))
    total_chars = sum(p.shape[0] for p in pooled_reg)

    if total_chars > 0:
        v_reg = torch.cat(pooled_reg)
        v_irr = torch.cat(pooled_irr)
        r_s = state.student.proj_head(v_reg)
        i_s = state.student.proj_head(v_irr)
        with torch.no_grad():
            t_grids, _ = state.teacher.encoder(x)
            tv_reg = torch.cat([pool_with_weights(t_grids[k], w) for k, w, _ in weight_pairs])
            tv_irr = torch.cat([pool_with_weights(t_grids[batch + k], w)
                                for k, _, w in weight_pairs])
            r_t = state.teacher.proj_head(tv_reg)
            i_t = state.teacher.proj_head(tv_irr)
        center = state.center if cfg.center_momentum is not None else None
        l_dis = (D.xi_loss(r_t, i_s, cfg, center)
                 + D.xi_loss(i_t, r_s, cfg, center)) / total_chars
        teacher_out = torch.cat([r_t, i_t])
        teacher_std = float(teacher_out.std(dim=0, unbiased=False).mean()) \
            if teacher_out.shape[0] > 1 else 0.0
    else:
        l_dis = torch.zeros(())
        teacher_out = None
        teacher_std = 0.0

    l_total = l_dis + cfg.seg_weight * l_seg
    state.opt.zero_grad()
    l_total.backward()
    if state.step < state.train_cfg.freeze_last_steps:
        # weight-normed final layer held at init early on; without this the
        # sharpened objective tends to collapse to the uniform distribution
        for name, param in state.student.named_parameters():
            if name.endswith("weight_v"):
                param.grad = None
    lr = schedule_value(state.lr_schedule, state.step)
    wd = schedule_value(state.wd_schedule, state.step)
    state.opt.step(lr=lr, wd=wd)

    if cfg.center_momentum is not None and teacher_out is not None:
        state.center = D.update_center(state.center, teacher_out, cfg.center_momentum)
    lam = schedule_value(state.lambda_schedule, state.step)
    D.ema_update(state.teacher, state.student, lam)
    state.step += 1

    return {
        "step": state.step - 1,
        "lr": lr,
        "wd": wd,
        "lambda": lam,
        "l_dis": float(l_dis.detach()),
        "l_seg": float(l_seg.detach()),
        "l_total": float(l_total.detach()),
        "teacher_std": teacher_std,
        "characters_seen": total_chars,
    }


def _bootstrap_iou(state: TrainState, holdout: Sequence[ImageBuffer]) -> float:
    """Segmentation-head IoU against pseudo-labels on held-out images."""
    state.student.eval()
    scores = []
    with torch.no_grad():
        for img in holdout:
            x = _to_batch([img])
            _, taps = state.student.encoder(x)
            pred = state.student.seg_head(taps).argmax(dim=1)[0].numpy()
            scores.append(binary_iou(pred, pseudo_label(img)))
    state.student.train()
    return float(np.mean(scores)) if scores else 0.0


def pretrain(samples: Sequence[GlyphSample], state: TrainState,
             log_path: str | None = None, ckpt_path: str | None = None,
             progress: Callable[[dict], None] | None = None) -> list[dict]:
    """Run the configured number of steps and write the log and checkpoint.

    The last ``bootstrap_holdout`` samples are reserved for the internal
    segmentation-quality check that decides when per-character masks switch
    from the raw pseudo-label to the segmentation head's prediction.
    """
    if not samples:
        raise ValueError("empty dataset")
    cfg = state.train_cfg
    n_holdout = min(cfg.bootstrap_holdout, max(len(samples) - 1, 0))
    train_samples = samples[:len(samples) - n_holdout] if n_holdout else list(samples)
    holdout = [s.image for s in samples[len(samples) - n_holdout:]] if n_holdout else []

    rows: list[dict] = []
    for step in range(cfg.steps):
        idx = state.rng.integers(0, len(train_samples), size=cfg.batch)
        metrics = pretrain_step([train_samples[i].image for i in idx], state)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rows.append(metrics)
            if progress is not None:
                progress(metrics)
        if holdout and not state.use_seg_masks and step > 0 and step % cfg.eval_every == 0:
            if _bootstrap_iou(state, holdout) > cfg.bootstrap_iou:
                state.use_seg_masks = True

    if log_path:
        write_metrics_csv(rows, log_path)
    if ckpt_path:
        save_train_checkpoint(state, ckpt_path)
    return rows


def write_metrics_csv(rows: Sequence[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in rows:
            fh.write(f"{r['step']},{r['lr']:.10g},{r['wd']:.10g},{r['lambda']:.10g},"
                     f"{r['l_dis']:.10g},{r['l_seg']:.10g},{r['teacher_std']:.10g},"
                     f"{r['characters_seen']}\n")


def save_train_checkpoint(state: TrainState, path: str) -> None:
    tensors = state_arrays(state.student)
    out = type(tensors)()
    for name, arr in tensors.items():
        out["student." + name] = arr
    for name, arr in state_arrays(state.teacher).items():
        out["teacher." + name] = arr
    out["center"] = state.center.numpy().astype(np.float32)
    cfg = {
        "encoder": dataclasses.asdict(state.encoder_cfg),
        "heads": dataclasses.asdict(state.head_cfg),
        "step": state.step,
    }
    save_checkpoint(path, out, cfg)


def load_models(path: str) -> tuple[CharDistillModel, CharDistillModel, dict]:
    """Student and teacher models restored from a training checkpoint."""
    header, tensors = load_checkpoint(path)
    enc = header["cfg"]["encoder"]
    enc_cfg = EncoderConfig(embed_dim=enc["embed_dim"], depth=enc["depth"],
                            heads=enc["heads"], patch=enc["patch"],
                            input_hw=tuple(enc["input_hw"]),
                            in_channels=enc["in_channels"],
                            tap_blocks=tuple(enc["tap_blocks"]))
    head_cfg = HeadConfig(**header["cfg"]["heads"])
    student = CharDistillModel(enc_cfg, head_cfg, with_seg_head=True)
    teacher = CharDistillModel(enc_cfg, head_cfg, with_seg_head=False)
    load_into_model(student, tensors, prefix="student.")
    load_into_model(teacher, tensors, prefix="teacher.")
    student.eval()
    teacher.eval()
    return student, teacher, header["cfg"]


# ---------------------------------------------------------------------------
# Finite-difference gradient verification
# ---------------------------------------------------------------------------

TINY_ENCODER = EncoderConfig(embed_dim=16, depth=2, heads=2, patch=4,
                             input_hw=(8, 16), tap_blocks=(1, 2))
TINY_HEADS = HeadConfig(seg_width=8, seg_fuse_width=8, seg_out_width=8,
                        proj_hidden=24, proj_bottleneck=12, proj_out=32)


@dataclasses.dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float]
    checked: int


def build_tiny_problem(seed: int = 0, encoder_cfg: EncoderConfig = TINY_ENCODER,
                       head_cfg: HeadConfig = TINY_HEADS, seg_only: bool = False,
                       ) -> tuple[CharDistillModel, Callable[[], torch.Tensor]]:
    """A double-precision model and a pure loss closure for verification.

    The closure rebuilds the full differentiable path (encoder, segmentation
    head, pooled projections against a frozen teacher) on fixed random data;
    masks and pseudo-labels are constants, exactly as in training. With
    ``seg_only`` the distillation term is dropped from the loss.

    Temperatures are softened and the init scale raised relative to the
    training defaults: central differences at step 1e-5 bottom out near
    1e-10 absolute, so coordinates whose true gradient is microscopic (or
    whose third derivative explodes under a 0.04 temperature) would report
    pure round-off instead of implementation errors.
    """
    rng = np.random.default_rng(seed)
    dcfg = D.DistillConfig(tau_s=1.0, tau_t=0.5, n=head_cfg.proj_out)
    student = CharDistillModel(encoder_cfg, head_cfg, with_seg_head=True).double()
    init_params(student, seed, std=0.1)
    teacher = CharDistillModel(encoder_cfg, head_cfg, with_seg_head=False).double()
    init_params(teacher, seed + 1, std=0.1)
    for p in teacher.parameters():
        p.requires_grad_(False)
    student.train()

    h_img, w_img = encoder_cfg.input_hw
    batch = 2
    x = torch.from_numpy(rng.random((2 * batch, encoder_cfg.in_channels, h_img, w_img)))
    m_pl = torch.from_numpy((rng.random((batch, h_img, w_img)) < 0.3).astype(np.int64))
    weights = []
    for _ in range(2 * batch):
        w = rng.random((3,) + encoder_cfg.grid_hw)
        weights.append(torch.from_numpy(w / w.max()))
    center = torch.from_numpy(rng.random(head_cfg.proj_out) * 0.1)

    with torch.no_grad():
        t_grids, _ = teacher.encoder(x)
        tv = torch.cat([pool_with_weights(t_grids[i], weights[i]) for i in range(2 * batch)])
        t_out = teacher.proj_head(tv)

    def loss_fn() -> torch.Tensor:
        grids, taps = student.encoder(x)
        logits = student.seg_head([t[:batch] for t in taps])
        l_seg = D.seg_loss(logits, m_pl)
        if seg_only:
            return l_seg
        sv = torch.cat([pool_with_weights(grids[i], weights[i]) for i in range(2 * batch)])
        s_out = student.proj_head(sv)
        l_dis = D.xi_loss(t_out, s_out, dcfg, center) / s_out.shape[0]
        return l_dis + dcfg.seg_weight * l_seg

    return student, loss_fn


def analytic_gradients(model: nn.Module, loss_fn: Callable[[], torch.Tensor],
                       ) -> dict[str, torch.Tensor]:
    for p in model.parameters():
        p.grad = None
    loss_fn().backward()
    return {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for name, p in model.named_parameters()}


def finite_difference_check(model: nn.Module, loss_fn: Callable[[], torch.Tensor],
                            grads: dict[str, torch.Tensor], n_coords: int = 240,
                            fd_eps: float = 1e-5, seed: int = 0,
                            agree_floor: float = 5e-6) -> GradCheckReport:
    """Central differences on a random subset of coordinates of every tensor.

    rel = |g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8) per coordinate.

    A coordinate where both the analytic and the finite-difference value
    fall below ``agree_floor`` is counted as agreement: central differences
    at this step size bottom out near 1e-10 absolute, so such pairs carry
    no signal either way. The skip cannot hide a fault: a wrong-but-large
    analytic value or a zeroed analytic value against a real gradient keeps
    one side above the floor and the coordinate is scored normally.
    """
    rng = np.random.default_rng(seed)
    names = [n for n, _ in model.named_parameters()]
    base = max(1, n_coords // max(len(names), 1))
    extra = max(0, n_coords - base * len(names))
    per_tensor: dict[str, float] = {}
    checked = 0
    params = dict(model.named_parameters())
    for i, name in enumerate(names):
        p = params[name]
        flat = p.detach().reshape(-1)
        k = min(base + (1 if i < extra else 0), flat.numel())
        # draw spares so vacuous coordinates can be replaced
        draw = min(4 * k, flat.numel())
        coords = rng.choice(flat.numel(), size=draw, replace=False)
        worst = 0.0
        kept = 0
        for c in coords:
            if kept >= k:
                break
            with torch.no_grad():
                orig = flat[c].item()
                flat[c] = orig + fd_eps
                up = loss_fn().item()
                flat[c] = orig - fd_eps
                down = loss_fn().item()
                flat[c] = orig
            fd = (up - down) / (2 * fd_eps)
            an = grads[name].reshape(-1)[c].item()
            if abs(an) < agree_floor and abs(fd) < agree_floor:
                continue
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            worst = max(worst, rel)
            kept += 1
            checked += 1
        per_tensor[name] = worst
    return GradCheckReport(max_rel_error=max(per_tensor.values()), per_tensor=per_tensor,
                           checked=checked)


def grad_check(seed: int = 0, n_coords: int = 240,
               encoder_cfg: EncoderConfig = TINY_ENCODER,
               head_cfg: HeadConfig = TINY_HEADS) -> GradCheckReport:
    model, loss_fn = build_tiny_problem(seed, encoder_cfg, head_cfg)
    grads = analytic_gradients(model, loss_fn)
    report = finite_difference_check(model, loss_fn, grads, n_coords=n_coords, seed=seed)
    roles = {role_of(n) for n in report.per_tensor}
    if not {"encoder", "seg_head", "projection"} <= roles:
        raise RuntimeError(f"gradient check covered only roles {sorted(roles)}")
    return report


# ---------------------------------------------------------------------------
# Linear probing of frozen character features
# ---------------------------------------------------------------------------

class ProbeError(ValueError):
    pass


def extract_char_features(encoder_model: CharDistillModel, samples: Sequence[GlyphSample],
                          batch: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth-mask pooled encoder features and labels per character."""
    patch = encoder_model.cfg.patch
    encoder_model.eval()
    feats, labels = [], []
    with torch.no_grad():
        for start in range(0, len(samples), batch):
            chunk = samples[start:start + batch]
            x = _to_batch([s.image for s in chunk])
            grids, _ = encoder_model.encoder(x)
            for i, sample in enumerate(chunk):
                weights = token_weight_stack(sample.gt_masks, patch)
                keep = weights.sum(dim=(1, 2)) > 0
                pooled = pool_with_weights(grids[i], weights[keep])
                feats.append(pooled.numpy())
                labels.extend(lab for lab, k in zip(sample.labels, keep.tolist()) if k)
    features = np.concatenate(feats) if feats else np.zeros((0, encoder_model.cfg.embed_dim))
    return features, np.asarray(labels, dtype=np.int64)


def fit_linear_probe(train_x: np.ndarray, train_y: np.ndarray,
                     test_x: np.ndarray, test_y: np.ndarray,
                     n_classes: int, seed: int = 0) -> float:
    """Multinomial logistic regression on frozen features; returns accuracy."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    present = np.unique(train_y)
    missing = sorted(set(range(n_classes)) - set(present.tolist()))
    if missing:
        raise ProbeError(f"classes absent from training split: {missing}")
    scaler = StandardScaler().fit(train_x)
    clf = LogisticRegression(max_iter=2000, tol=1e-7, random_state=seed)
    clf.fit(scaler.transform(train_x), train_y)
    return float((clf.predict(scaler.transform(test_x)) == test_y).mean())


def linear_probe(encoder_model: CharDistillModel, train_samples: Sequence[GlyphSample],
                 test_samples: Sequence[GlyphSample], n_classes: int = 26,
                 seed: int = 0) -> float:
    train_x, train_y = extract_char_features(encoder_model, train_samples)
    test_x, test_y = extract_char_features(encoder_model, test_samples)
    return fit_linear_probe(train_x, train_y, test_x, test_y, n_classes, seed)
