"""Differentiable objectives: pixel contrast, instance agreement, behavior cloning."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .pairs import PairMask

DEFAULT_TEMPERATURE = 0.06
DEFAULT_ALPHA = 1.0


def _masked_logsumexp(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Row-wise logsumexp over masked entries; -inf rows where the mask is empty."""
    neg_inf = torch.finfo(logits.dtype).min
    masked = torch.where(mask, logits, torch.full_like(logits, neg_inf))
    return torch.logsumexp(masked, dim=1)


def pixel_loss_one_side(
    x: torch.Tensor,
    x_other: torch.Tensor,
    mask: PairMask,
    tau: float = DEFAULT_TEMPERATURE,
) -> tuple[torch.Tensor, int]:
    """Contrastive loss of view-1 cells against view-2 cells under one mask.

    For each valid cell i with a nonempty positive set, the loss is
    -log( sum_pos e^{cos/tau} / (sum_pos e^{cos/tau} + sum_neg e^{cos/tau}) ),
    averaged over contributing cells. Cells with no positives are skipped;
    returns (0, 0) when nothing contributes. The logsumexp form subtracts the
    row max before exponentiation, which matters at tau = 0.06.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if mask.a.shape != (x.shape[0], x_other.shape[0]):
        raise ValueError(
            f"mask shape {mask.a.shape} incompatible with features "
            f"({x.shape[0]}, {x_other.shape[0]})"
        )
    valid = torch.as_tensor(mask.valid, device=x.device)
    pos = torch.as_tensor(mask.a, device=x.device).bool() & valid
    contributing = pos.any(dim=1)
    n = int(contributing.sum())
    if n == 0:
        return x.sum() * 0.0, 0

    logits = (F.normalize(x, dim=1) @ F.normalize(x_other, dim=1).T) / tau
    lse_all = _masked_logsumexp(logits[contributing], valid[contributing])
    lse_pos = _masked_logsumexp(logits[contributing], pos[contributing])
    return (lse_all - lse_pos).mean(), n


def pixel_loss(
    x: torch.Tensor,
    x_other: torch.Tensor,
    masks: list[PairMask],
    tau: float = DEFAULT_TEMPERATURE,
) -> torch.Tensor:
    """Symmetric pixel contrast averaged over the threshold-pair masks."""
    if not masks:
        raise ValueError("at least one mask is required")
    terms = []
    for m in masks:
        side1, _ = pixel_loss_one_side(x, x_other, m, tau)
        side2, _ = pixel_loss_one_side(x_other, x, m.transposed(), tau)
        terms.append((side1 + side2) / 2)
    return torch.stack(terms).mean()


def instance_loss(
    k: torch.Tensor,
    k_other: torch.Tensor,
    q: torch.Tensor,
    q_other: torch.Tensor,
) -> torch.Tensor:
    """Negative symmetric cosine agreement between predictions and targets.

    k, k_other are online-branch predictions; q, q_other are momentum-branch
    projections and are gradient-stopped here. All inputs are unit-normalized
    internally, so the value lies in [-1, 1] and is scale-invariant.
    """
    vecs = []
    for v in (k, k_other, q, q_other):
        norm = v.norm(dim=-1)
        if (norm < 1e-12).any():
            raise ValueError("zero-norm vector cannot be normalized")
        vecs.append(F.normalize(v, dim=-1))
    k, k_other, q, q_other = vecs
    q = q.detach()
    q_other = q_other.detach()
    sim = (k * q_other).sum(dim=-1) + (k_other * q).sum(dim=-1)
    return -(sim / 2).mean()


def total_loss(l_pix: torch.Tensor, l_ins: torch.Tensor, alpha: float = DEFAULT_ALPHA):
    return l_pix + alpha * l_ins


def bc_loss(predicted_action: torch.Tensor, expert_action: torch.Tensor) -> torch.Tensor:
    """Squared L2 action error, averaged over the batch."""
    if predicted_action.shape != expert_action.shape:
        raise ValueError(
            f"action shape mismatch: {tuple(predicted_action.shape)} vs "
            f"{tuple(expert_action.shape)}"
        )
    sq = ((predicted_action - expert_action) ** 2).sum(dim=-1)
    return sq.mean()
