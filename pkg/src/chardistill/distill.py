"""Cross-view mask alignment, the sharpened distillation loss, and the
teacher-side updates (EMA weights plus the optional output centering)."""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imaging import Homography, warp_mask
from .model import mask_token_weights
from .pseudolabel import CharMaskSet


@dataclasses.dataclass(frozen=True)
class DistillConfig:
    tau_s: float = 0.1
    tau_t: float = 0.04
    lambda_start: float = 0.996
    lambda_end: float = 1.0
    center_momentum: float | None = 0.9  # None disables centering
    seg_weight: float = 1.0
    n: int = 1024

    def __post_init__(self):
        if not 0 < self.tau_t < self.tau_s:
            raise ValueError(f"need 0 < tau_t < tau_s, got {self.tau_t}, {self.tau_s}")
        for lam in (self.lambda_start, self.lambda_end):
            if not 0.0 <= lam <= 1.0:
                raise ValueError(f"lambda {lam} outside [0, 1]")
        if self.center_momentum is not None and not 0.0 <= self.center_momentum <= 1.0:
            raise ValueError("center_momentum must be in [0, 1] or None")


@dataclasses.dataclass
class AlignedMaskQuad:
    """Per-character masks for both views and branches, index-aligned.

    The teacher sets reuse the student's masks; entry k refers to the same
    physical character in all four sets.
    """

    s_reg: CharMaskSet
    s_irr: CharMaskSet
    t_reg: CharMaskSet
    t_irr: CharMaskSet

    def __len__(self) -> int:
        return len(self.s_reg)

    def __post_init__(self):
        lens = {len(self.s_reg), len(self.s_irr), len(self.t_reg), len(self.t_irr)}
        if len(lens) != 1:
            raise ValueError(f"mask sets differ in length: {sorted(lens)}")


def align_masks(s_reg: CharMaskSet, pi_irr: Homography, patch: int = 4) -> AlignedMaskQuad:
    """Move the regular-view masks into the warped view and mirror both to
    the teacher.

    The regular view has identity geometry, so the warped view's mask for
    character k is simply the warp of mask k. Characters whose warped mask
    carries no weight on the token grid (fully out of frame or aliased
    away) are removed from all four sets at once, keeping indices aligned.
    """
    kept_reg, kept_irr = [], []
    for mask in s_reg.masks:
        warped = warp_mask(mask, pi_irr)
        if mask_token_weights(warped, patch).sum() <= 0:
            continue
        if mask_token_weights(mask, patch).sum() <= 0:
            continue
        kept_reg.append(mask)
        kept_irr.append(warped)
    reg = CharMaskSet(kept_reg)
    irr = CharMaskSet(kept_irr)
    return AlignedMaskQuad(s_reg=reg, s_irr=irr, t_reg=reg, t_irr=irr)


def _check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"non-finite values in {name}")


def xi_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor,
            cfg: DistillConfig, center: torch.Tensor | None = None) -> torch.Tensor:
    """Sharpened cross-entropy summed over character rows.

    The teacher side is softened at tau_t after subtracting the running
    center (a zero center reproduces the plain form); the student side uses
    tau_s. Teacher logits are constants: no gradient flows into them.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"logit shapes differ: {tuple(teacher_logits.shape)} "
                         f"vs {tuple(student_logits.shape)}")
    _check_finite("teacher logits", teacher_logits)
    _check_finite("student logits", student_logits)
    a = teacher_logits.detach()
    if center is not None:
        a = a - center
    p = torch.softmax(a / cfg.tau_t, dim=-1)
    log_q = torch.log_softmax(student_logits / cfg.tau_s, dim=-1)
    return -(p * log_q).sum()


def distill_loss(r_t: torch.Tensor, i_t: torch.Tensor,
                 r_s: torch.Tensor, i_s: torch.Tensor,
                 cfg: DistillConfig, center: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-branch, cross-view loss averaged per character.

    Pairs the teacher's regular view with the student's warped view and vice
    versa; zero characters contribute nothing.
    """
    rows = {r_t.shape[0], i_t.shape[0], r_s.shape[0], i_s.shape[0]}
    if len(rows) != 1:
        raise ValueError(f"character counts differ: {sorted(rows)}")
    l = r_t.shape[0]
    if l == 0:
        return r_s.new_zeros(())
    total = xi_loss(r_t, i_s, cfg, center) + xi_loss(i_t, r_s, cfg, center)
    return total / l


def seg_loss(logits: torch.Tensor, m_pl: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Mean per-pixel two-class cross-entropy against the pseudo-label."""
    if isinstance(m_pl, np.ndarray):
        m_pl = torch.from_numpy(np.ascontiguousarray(m_pl))
    target = m_pl.long()
    if logits.ndim == 3:
        logits = logits[None]
        target = target[None]
    if logits.shape[0] != target.shape[0] or logits.shape[-2:] != target.shape[-2:]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match "
                         f"target {tuple(target.shape)}")
    return F.cross_entropy(logits, target)


def ema_update(teacher: nn.Module, student: nn.Module, lam: float) -> None:
    """teacher <- lam * teacher + (1 - lam) * student, matched by name.

    The student may own extra tensors (its segmentation head); every teacher
    parameter must exist in the student with an identical shape.
    """
    student_params = dict(student.named_parameters())
    with torch.no_grad():
        for name, t_param in teacher.named_parameters():
            s_param = student_params.get(name)
            if s_param is None:
                raise ValueError(f"student has no parameter {name!r}")
            if s_param.shape != t_param.shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"{tuple(t_param.shape)} vs {tuple(s_param.shape)}")
            t_param.mul_(lam).add_(s_param.detach(), alpha=1.0 - lam)


def update_center(center: torch.Tensor, teacher_logits: torch.Tensor,
                  momentum: float) -> torch.Tensor:
    """Exponential moving average of the teacher's pre-softmax outputs."""
    if teacher_logits.numel() == 0:
        return center
    batch_mean = teacher_logits.detach().mean(dim=0)
    return momentum * center + (1.0 - momentum) * batch_mean
