"""Differentiable attack objectives.

All functions take batched tensors and return one value per sample so the
optimizer can sum them and still obtain per-image gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch

from .types import REAL


def detection_loss(class_logits: torch.Tensor, target: int = REAL) -> torch.Tensor:
    """Cross-entropy of softmax(class_logits) against `target`, via log-softmax."""
    return -torch.log_softmax(class_logits, dim=-1)[:, target]


def mislead_loss(attention: torch.Tensor, hotspot: torch.Tensor, tamper: torch.Tensor,
                 lambda_s: float = 1.0) -> torch.Tensor:
    """Decoy amplification plus tampered-region suppression.

    -mean_{R_bg}(M * G) + lambda_s * mean_{R_tamper}(M), for (B, H, W) inputs.
    """
    t = tamper.to(attention.dtype)
    n_t = t.flatten(1).sum(1)
    n_bg = (1 - t).flatten(1).sum(1)
    if (n_t == 0).any() or (n_bg == 0).any():
        raise ValueError("mislead loss needs nonempty tampered and background regions")
    decoy = (attention * hotspot * (1 - t)).flatten(1).sum(1) / n_bg
    suppress = (attention * t).flatten(1).sum(1) / n_t
    return -decoy + lambda_s * suppress


def hide_loss(image: torch.Tensor, region: torch.Tensor) -> torch.Tensor:
    """Total variation at region pixels: |x[i+1,j]-x[i,j]| + |x[i,j+1]-x[i,j]|.

    image: (B, C, H, W); region: (B, H, W). Channels are summed and neighbor
    terms that fall outside the image are dropped.
    """
    r = region.to(image.dtype).unsqueeze(1)
    down = (image[..., 1:, :] - image[..., :-1, :]).abs() * r[..., :-1, :]
    right = (image[..., :, 1:] - image[..., :, :-1]).abs() * r[..., :, :-1]
    return down.flatten(1).sum(1) + right.flatten(1).sum(1)


def attention_interference_loss(l_mislead, l_hide, alpha: float = 0.7):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * l_mislead + (1.0 - alpha) * l_hide


def visual_total_loss(l_det, l_att, delta: torch.Tensor, lambda1: float = 1.0,
                      lambda2: float = 0.01):
    """l_det + lambda1 * l_att + lambda2 * ||delta||_2^2 (per sample)."""
    sq = (delta**2).flatten(1).sum(1) if delta.dim() > 1 else (delta**2).sum()
    return l_det + lambda1 * l_att + lambda2 * sq


def coherence_loss(embedding: torch.Tensor, vocab: torch.Tensor, k: int = 100) -> torch.Tensor:
    """Sum over prompt tokens of the squared distance to the nearest vocabulary row.

    The k nearest rows are gathered first and the minimum is taken among them,
    which is the nearest-neighbor distance; `k` only bounds the candidate set.
    embedding: (n, d) or (B, n, d); returns a scalar or (B,).
    """
    if vocab.shape[0] == 0:
        raise ValueError("empty vocabulary")
    squeeze = embedding.dim() == 2
    e = embedding.unsqueeze(0) if squeeze else embedding
    d2 = ((e.unsqueeze(-2) - vocab) ** 2).sum(-1)  # (B, n, V)
    k = min(k, vocab.shape[0])
    near = torch.topk(d2, k, dim=-1, largest=False).values
    out = near.min(dim=-1).values.sum(-1)
    return out[0] if squeeze else out


def semantic_loss(class_logits: torch.Tensor, l_coherence, beta: float = 0.1,
                  target: int = REAL) -> torch.Tensor:
    """CE(F(I + delta, E), y_real) + beta * coherence."""
    return detection_loss(class_logits, target) + beta * l_coherence


@dataclass
class LossBreakdown:
    l_det: float
    l_mislead: float
    l_hide: float
    l_att: float
    l_l2: float
    l_vis: float
    l_semantic_ce: float
    l_coherence: float
    l_text: float

    @classmethod
    def compose(cls, *, l_det, l_mislead, l_hide, l_l2, l_semantic_ce, l_coherence,
                alpha, lambda1, lambda2, beta) -> "LossBreakdown":
        l_att = alpha * l_mislead + (1.0 - alpha) * l_hide
        return cls(
            l_det=l_det, l_mislead=l_mislead, l_hide=l_hide, l_att=l_att, l_l2=l_l2,
            l_vis=l_det + lambda1 * l_att + lambda2 * l_l2,
            l_semantic_ce=l_semantic_ce, l_coherence=l_coherence,
            l_text=l_semantic_ce + beta * l_coherence,
        )

    def to_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}
