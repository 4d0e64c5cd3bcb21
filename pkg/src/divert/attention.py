"""Grad-CAM attribution, head/layer aggregation, EMA smoothing and ADS."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .types import FAKE, REAL, AttentionMap, TamperMask


def upsample(maps: torch.Tensor, size) -> torch.Tensor:
    """Bilinear patch-grid -> pixel-grid resize of (..., h, w) maps."""
    lead = maps.shape[:-2]
    flat = maps.reshape(-1, 1, *maps.shape[-2:])
    out = F.interpolate(flat, size=tuple(size), mode="bilinear", align_corners=False)
    return out.reshape(*lead, *out.shape[-2:])


def grad_cam(feature_maps: torch.Tensor, gradients: torch.Tensor, size=None) -> torch.Tensor:
    """ReLU(sum_k alpha_k A^k) with alpha_k the spatial mean of ReLU'd gradients.

    `feature_maps` and `gradients` are (..., K, h, w). Stays on the autograd
    graph of both inputs, so it can be differentiated again.
    """
    if gradients is None:
        raise ValueError("grad_cam needs gradients of the target score")
    if feature_maps.shape != gradients.shape:
        raise ValueError("feature maps and gradients must have the same shape")
    alpha = F.relu(gradients).mean(dim=(-2, -1), keepdim=True)
    cam = F.relu((alpha * feature_maps).sum(dim=-3))
    return upsample(cam, size) if size is not None else cam


def aggregate_attention(head_maps, gradients, layers=None) -> torch.Tensor:
    """Gradient-weighted sum over heads, then uniform mean over layers.

    head_maps[l], gradients[l]: (..., heads, h, w). Each head weight is
    ReLU(mean spatial gradient). `layers` picks which entries to use
    (default: all given).
    """
    idx = list(range(len(head_maps))) if layers is None else list(layers)
    if not idx:
        raise ValueError("empty layer range")
    per_layer = []
    for l in idx:
        a, g = head_maps[l], gradients[l]
        if g is None:
            raise ValueError(f"missing gradient for layer {l}")
        w = F.relu(g.mean(dim=(-2, -1), keepdim=True))
        per_layer.append((w * a).sum(dim=-3))
    return torch.stack(per_layer).mean(dim=0)


def detection_scores(class_logits: torch.Tensor) -> torch.Tensor:
    """Per-sample cross-entropy against the Real label."""
    return -torch.log_softmax(class_logits, dim=-1)[:, REAL]


def attribution_map(detector, images: torch.Tensor, embeddings: torch.Tensor, *,
                    create_graph: bool = False, out=None):
    """Aggregated attention proxy M at pixel resolution.

    Head weights come from the gradient of the Real-target detection loss.
    Returns (detector output, M of shape (B, H, W)).
    """
    if out is None:
        out = detector(images, embeddings)
    layers = list(detector.attention_layers)
    maps = [out.head_maps[l] for l in layers]
    score = detection_scores(out.class_logits).sum()
    grads = torch.autograd.grad(score, maps, create_graph=create_graph, retain_graph=True)
    m = aggregate_attention(maps, list(grads))
    return out, upsample(m, images.shape[-2:])


def detector_grad_cam(detector, images: torch.Tensor, embeddings: torch.Tensor,
                      target: int = FAKE, create_graph: bool = False) -> torch.Tensor:
    """Classic Grad-CAM over every head of the aggregation layers, for one class logit."""
    out = detector(images, embeddings)
    layers = list(detector.attention_layers)
    maps = [out.head_maps[l] for l in layers]
    grads = torch.autograd.grad(out.class_logits[:, target].sum(), maps,
                                create_graph=create_graph, retain_graph=create_graph)
    feats = torch.cat(maps, dim=-3)
    return grad_cam(feats, torch.cat(grads, dim=-3), images.shape[-2:])


@dataclass
class AggregationState:
    gamma: float = 0.9
    ema: Optional[torch.Tensor] = None

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


def ema_update(state: AggregationState, new_map: torch.Tensor) -> torch.Tensor:
    """M_t <- gamma * M_{t-1} + (1 - gamma) * new; the first call returns `new_map`.

    Only the fresh map carries gradient; the stored history is detached.
    """
    if state.ema is None:
        smoothed = new_map
    else:
        if state.ema.shape != new_map.shape:
            raise ValueError(f"shape mismatch: {tuple(state.ema.shape)} vs {tuple(new_map.shape)}")
        smoothed = state.gamma * state.ema + (1.0 - state.gamma) * new_map
    state.ema = smoothed.detach()
    return smoothed


def ads(attention, mask) -> float:
    """Share of attribution mass on the background; 0.5 when the map carries no mass."""
    m = attention.values if isinstance(attention, AttentionMap) else np.asarray(attention, dtype=np.float64)
    t = mask.tamper if isinstance(mask, TamperMask) else np.asarray(mask, dtype=bool)
    if m.shape != t.shape:
        raise ValueError("attention map and mask shapes differ")
    bg = float(m[~t].sum())
    tamper = float(m[t].sum())
    total = bg + tamper
    if total <= 0.0:
        return 0.5
    return bg / total


def ads_batch(maps: torch.Tensor, tamper: torch.Tensor) -> torch.Tensor:
    """Vectorized ADS over (B, H, W) maps and boolean masks."""
    t = tamper.to(maps.dtype)
    tm = (maps * t).flatten(1).sum(1)
    bg = (maps * (1 - t)).flatten(1).sum(1)
    total = bg + tm
    return torch.where(total > 0, bg / total.clamp(min=1e-300), torch.full_like(total, 0.5))
