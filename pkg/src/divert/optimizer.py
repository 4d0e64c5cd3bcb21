"""Alternating optimization of the image perturbation and the prompt embedding.

Each iteration recomputes the (EMA-smoothed) attention proxy, takes one
sign-gradient step on delta with E frozen, then (threat level II) one plain
gradient step on E with delta frozen. Images are attacked in batches; every
loss is per-sample, so batching never mixes gradients across images.
"""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from . import attention as attn
from .decoy import DecoyRegion, select_decoy
from .detector import DTYPE, image_batch
from .losses import (LossBreakdown, attention_interference_loss, coherence_loss, detection_loss,
                     hide_loss, mislead_loss, semantic_loss, visual_total_loss)
from .metrics import iou as mask_iou, perceptual_metrics
from .types import (FAKE, LABELS, REAL, AttackConfig, AttackRecord, AttentionMap, ImageTensor,
                    PromptEmbedding, TamperMask, success_flag)

log = logging.getLogger(__name__)

METHODS = ("full", "vis-only", "no-mislead", "no-hide", "pgd", "fgsm", "noise")


def image_seed(seed: int, image_id: str) -> int:
    """Per-image RNG stream derived from (config seed, image id)."""
    return int(np.random.SeedSequence([seed, zlib.crc32(image_id.encode())]).generate_state(1)[0])


def clip_grad(g: torch.Tensor, max_norm: float) -> torch.Tensor:
    """Per-sample global-norm clipping over all but the batch dimension."""
    if max_norm is None or max_norm <= 0:
        return g
    norm = g.flatten(1).norm(dim=1).clamp(min=1e-300)
    scale = torch.clamp(max_norm / norm, max=1.0)
    return g * scale.view(-1, *([1] * (g.dim() - 1)))


def warmup_factor(t: int, warmup: int) -> float:
    return min(1.0, t / warmup) if warmup > 0 else 1.0


# ---------------------------------------------------------------- masks

def _square(size: int) -> np.ndarray:
    return np.ones((size, size), dtype=bool)


def dilate(mask: np.ndarray, size: int = 5, iterations: int = 1) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if not m.any() or iterations <= 0:
        return m.copy()
    return ndimage.binary_dilation(m, structure=_square(size), iterations=iterations)


def close(mask: np.ndarray, size: int = 3) -> np.ndarray:
    """Morphological closing; the image border does not erode the result."""
    m = np.asarray(mask, dtype=bool)
    pad = size
    padded = np.pad(m, pad, mode="edge")
    closed = ndimage.binary_closing(padded, structure=_square(size))
    return closed[pad:-pad, pad:-pad]


def band_iterations(config: AttackConfig, side: int) -> int:
    """Dilation passes for the concealment band, scaled from the reference resolution."""
    if not config.scale_band:
        return config.dilation_iterations
    return max(1, math.ceil(config.dilation_iterations * side / config.reference_size))


def normalize_map(m: torch.Tensor) -> torch.Tensor:
    """Per-sample division by the map maximum; all-zero maps stay zero."""
    peak = m.flatten(1).max(1).values.view(-1, *([1] * (m.dim() - 1)))
    return m / peak.clamp(min=1e-12)


def boundary_band(mask, size: int = 5, iterations: int = 5) -> TamperMask:
    """dilate(mask) minus mask: the ring the concealment loss smooths."""
    m = mask.values if isinstance(mask, TamperMask) else np.asarray(mask, dtype=bool)
    band = dilate(m, size, iterations) & ~m
    return TamperMask(band.astype(np.uint8), mask.source if isinstance(mask, TamperMask) else "predicted")


@dataclass
class MaskState:
    """Predicted-mask schedule: freeze, periodic EMA update, binarize, close."""

    initial: np.ndarray
    freeze: int = 50
    gamma: float = 0.8
    interval: int = 10
    threshold: float = 0.5
    closing: int = 3
    soft: np.ndarray = None
    current: np.ndarray = None

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=bool)
        if self.soft is None:
            self.soft = self.initial.astype(np.float64)
        if self.current is None:
            self.current = self.initial.copy()


def stabilize_mask(state: MaskState, fresh: np.ndarray, t: int) -> np.ndarray:
    """Mask in force at iteration t (1-based); `fresh` holds mask probabilities."""
    if t <= state.freeze:
        state.current = state.initial.copy()
    elif t % state.interval == 0:
        state.soft = state.gamma * state.soft + (1.0 - state.gamma) * np.asarray(fresh, dtype=np.float64)
        state.current = close(state.soft >= state.threshold, state.closing)
    return state.current


# ---------------------------------------------------------------- helpers

@dataclass
class AttackResult:
    adversarial: ImageTensor
    embedding: PromptEmbedding
    record: AttackRecord
    delta: np.ndarray


@dataclass
class AttackState:
    t: int
    delta: torch.Tensor
    embedding: torch.Tensor
    attention: attn.AggregationState
    masks: list
    active: torch.Tensor
    trace: list = field(default_factory=list)


REGIONS = (("upper", "left"), ("upper", "right"), ("lower", "left"), ("lower", "right"))


def describe_region(attention_map: np.ndarray) -> str:
    r, c = np.unravel_index(int(np.argmax(attention_map)), attention_map.shape)
    h, w = attention_map.shape
    vert = "upper" if r < h / 2 else "lower"
    horiz = "left" if c < w / 2 else "right"
    if abs(r - h / 2) < h / 6 and abs(c - w / 2) < w / 6:
        return "central"
    return f"{vert}-{horiz}"


def explain(label: str, attention_map: np.ndarray) -> str:
    """Templated explanation from the judgment and the peak-attention region."""
    where = describe_region(attention_map)
    if label == "Real":
        return (f"The image appears authentic. The {where} region shows consistent lighting, "
                f"natural texture and coherent noise with no visible splice boundary.")
    return (f"The image appears manipulated. The {where} region shows inconsistent noise, "
            f"smoothed texture and a visible boundary typical of tampering.")


def _as_embedding(embedding, detector, b: int) -> torch.Tensor:
    if embedding is None:
        e = detector.default_prompt()
    elif isinstance(embedding, PromptEmbedding):
        e = torch.from_numpy(np.array(embedding.values)).to(DTYPE)
    else:
        e = torch.as_tensor(embedding, dtype=DTYPE)
    if e.dim() == 2:
        e = e.unsqueeze(0).expand(b, -1, -1)
    return e.clone()


def _evaluate(detector, x, emb, ref_masks, threshold):
    """Labels, binarized masks and attention maps (no graph kept)."""
    with torch.enable_grad():
        xr = x.detach().clone().requires_grad_(True)
        out, m = attn.attribution_map(detector, xr, emb.detach(), create_graph=False)
    labels = out.class_logits.argmax(-1).detach()
    masks = (out.mask_probs.detach() > threshold).numpy()
    return labels, masks, m.detach().numpy()


def _finish(detector, images, ids, x0, x_adv, e0, e_adv, ref_masks, config, method,
            flags, decoys, traces, mask_changes, clean=None):
    labels0, pm0, maps0 = clean if clean is not None else _evaluate(detector, x0, e0, ref_masks, config.mask_threshold)
    labels1, pm1, maps1 = _evaluate(detector, x_adv, e_adv, ref_masks, config.mask_threshold)
    results = []
    for i, image in enumerate(images):
        ref = ref_masks[i]
        adv_np = x_adv[i].detach().numpy().transpose(1, 2, 0)
        adv_np = np.clip(adv_np, 0.0, 1.0)
        adv = ImageTensor(adv_np)
        psnr, ssim = perceptual_metrics(image, adv)
        clean_label, adv_label = LABELS[int(labels0[i])], LABELS[int(labels1[i])]
        rec = AttackRecord(
            image_id=ids[i],
            clean_prediction=clean_label,
            attacked_prediction=adv_label,
            success=success_flag(clean_label, adv_label),
            iou_clean=mask_iou(pm0[i], ref),
            iou_adv=mask_iou(pm1[i], ref),
            ads_clean=attn.ads(maps0[i], ref),
            ads_adv=attn.ads(maps1[i], ref),
            psnr=psnr,
            ssim=ssim,
            loss_trace=traces[i],
            explanation=explain(adv_label, maps1[i]),
            method=method,
            flags=sorted(flags[i]),
            decoy_center=list(decoys[i].center) if decoys[i] is not None else None,
            mask_changes=mask_changes[i],
        )
        delta = adv_np - image.values
        results.append(AttackResult(adv, PromptEmbedding(e_adv[i].detach().numpy()), rec, delta))
    return results


def _reference_masks(images, masks, config, pred_masks0):
    """Ground truth when supplied and in oracle mode, else the clean predicted mask."""
    refs = []
    for i in range(len(images)):
        if config.mask_mode == "oracle":
            if masks is None or masks[i] is None:
                raise ValueError("oracle mask mode needs a ground-truth mask for every image")
            refs.append(np.asarray(masks[i].values, dtype=bool))
        else:
            refs.append(pred_masks0[i])
    return refs


# ---------------------------------------------------------------- main loop

def attack_batch(images: Sequence[ImageTensor], masks: Optional[Sequence[TamperMask]], detector,
                 config: AttackConfig, ids: Optional[Sequence[str]] = None, embedding=None,
                 method: str = "full") -> list[AttackResult]:
    """Attack a batch of images; returns one AttackResult per image."""
    b = len(images)
    ids = list(ids) if ids is not None else [f"img{i}" for i in range(b)]
    x0 = image_batch(images)
    e0 = _as_embedding(embedding, detector, b)
    vocab = torch.from_numpy(np.array(detector.vocabulary().embeddings)).to(DTYPE)

    clean = _evaluate(detector, x0, e0, None, config.mask_threshold)
    labels0, pm0, maps0 = clean
    refs = _reference_masks(images, masks, config, pm0)
    flags = [set() for _ in range(b)]
    if config.mask_mode == "predicted":
        for f in flags:
            f.add("reference:predicted")

    mask_states = [MaskState(pm0[i] if config.mask_mode == "predicted" else refs[i],
                             freeze=config.mask_freeze, gamma=config.mask_gamma,
                             interval=config.mask_interval, threshold=config.mask_threshold,
                             closing=config.closing_size) for i in range(b)]

    # decoys chosen once, from the clean attention map
    decoys: list[Optional[DecoyRegion]] = []
    for i in range(b):
        m0 = mask_states[i].initial
        if m0.all() or not m0.any():
            flags[i].add("degenerate-mask")
            decoys.append(None)
            continue
        d = select_decoy(images[i], m0, maps0[i], image_seed(config.seed, ids[i]),
                         sigma=config.sigma, k=config.decoy_candidates,
                         saliency_threshold=config.saliency_threshold,
                         entropy_low=config.entropy_low, entropy_high=config.entropy_high,
                         border_distance=config.border_distance,
                         tamper_distance=config.tamper_distance,
                         reference_size=config.reference_size)
        if d.fallback:
            flags[i].add("decoy-fallback:" + "+".join(d.relaxed))
        decoys.append(d)

    state = AttackState(
        t=0,
        delta=torch.zeros_like(x0),
        embedding=e0.clone(),
        attention=attn.AggregationState(config.attention_gamma),
        masks=[ms.current.copy() for ms in mask_states],
        active=torch.ones(b, dtype=torch.bool),
    )
    traces = [[] for _ in range(b)]
    mask_changes = [[] for _ in range(b)]
    hotspots = torch.from_numpy(np.stack([
        d.field if d is not None else np.zeros(refs[0].shape) for d in decoys])).to(DTYPE)

    for t in range(1, config.T + 1):
        state.t = t
        visual_step(state, x0, detector, config, hotspots, mask_states, vocab, traces,
                    mask_changes, flags, decoys)
        if config.threat_level == "II":
            text_step(state, x0, detector, config, vocab, traces, flags)

    x_adv = (x0 + state.delta).clamp(0.0, 1.0)
    return _finish(detector, images, ids, x0, x_adv, e0, state.embedding, refs, config, method,
                   flags, decoys, traces, mask_changes, clean=clean)


def _update_masks(state, mask_states, fresh_probs, config, mask_changes):
    for i, ms in enumerate(mask_states):
        prev = state.masks[i]
        updated = False
        if config.mask_mode != "predicted":
            cur = ms.current
        elif config.mask_stabilization:
            cur = stabilize_mask(ms, fresh_probs[i], state.t)
            updated = state.t > ms.freeze and state.t % ms.interval == 0
        else:
            cur = fresh_probs[i] >= config.mask_threshold
            ms.current = cur
            updated = state.t > 1
        # change between consecutive mask updates
        if updated:
            mask_changes[i].append(1.0 - mask_iou(cur, prev))
        state.masks[i] = cur.copy()


def visual_step(state: AttackState, x0, detector, config: AttackConfig, hotspots, mask_states,
                vocab, traces, mask_changes, flags, decoys) -> torch.Tensor:
    """delta <- clip(delta - eta_v * w_t * sign(clip(grad L_vis)), -eps, eps), E frozen."""
    e_frozen = state.embedding.detach()
    delta = state.delta.clone().requires_grad_(True)
    x = x0 + delta
    out, m_raw = attn.attribution_map(detector, x, e_frozen, create_graph=True)
    if config.attention_normalize:
        m_raw = normalize_map(m_raw)
    _update_masks(state, mask_states, out.mask_probs.detach().numpy(), config, mask_changes)
    m_bar = attn.ema_update(state.attention, m_raw)

    tamper = torch.from_numpy(np.stack(state.masks))
    n_dil = band_iterations(config, x0.shape[-1])
    band = torch.from_numpy(np.stack([dilate(m, config.dilation_size, n_dil) & ~m for m in state.masks]))
    l_det = detection_loss(out.class_logits)

    usable = torch.tensor([decoys[i] is not None and state.masks[i].any() and not state.masks[i].all()
                           for i in range(len(state.masks))])
    l_mislead = torch.zeros_like(l_det)
    if config.use_mislead and usable.any():
        idx = usable.nonzero().flatten()
        l_mislead = l_mislead.index_put((idx,), mislead_loss(m_bar[idx], hotspots[idx], tamper[idx], config.lambda_s))
    for i in (~usable).nonzero().flatten().tolist():
        flags[i].add("mislead-disabled")
    l_hide = hide_loss(x, band) if config.use_hide else torch.zeros_like(l_det)
    l_att = attention_interference_loss(l_mislead, l_hide, config.alpha)
    l_vis = visual_total_loss(l_det, l_att, delta, config.lambda1, config.lambda2)

    (grad,) = torch.autograd.grad(l_vis.sum(), delta)
    finite = torch.isfinite(grad).flatten(1).all(1)
    for i in (state.active & ~finite).nonzero().flatten().tolist():
        flags[i].add("abort:nonfinite-visual-gradient")
    state.active &= finite
    grad = torch.where(torch.isfinite(grad), grad, torch.zeros_like(grad))
    grad = clip_grad(grad, config.grad_clip)
    step = config.eta_v * warmup_factor(state.t, config.warmup)
    with torch.no_grad():
        keep = state.active.view(-1, 1, 1, 1).to(DTYPE)
        new = state.delta - keep * step * torch.sign(grad)
        new = new.clamp(-config.epsilon, config.epsilon)
        # also keep I + delta inside [0, 1]
        new = torch.maximum(torch.minimum(new, 1.0 - x0), -x0)
        state.delta = new

    ads_now = attn.ads_batch(m_bar.detach(), tamper)
    cols = {k: v.detach().tolist() for k, v in (("l_det", l_det), ("l_mislead", l_mislead),
                                                 ("l_hide", l_hide), ("l_att", l_att), ("l_vis", l_vis))}
    l2 = (delta.detach() ** 2).flatten(1).sum(1).tolist()
    linf = state.delta.abs().flatten(1).max(1).values.tolist()
    x_new = (x0 + state.delta).flatten(1)
    lo, hi = x_new.min(1).values.tolist(), x_new.max(1).values.tolist()
    for i in range(len(traces)):
        row = {"t": state.t}
        row.update({k: v[i] for k, v in cols.items()})
        row.update({"l_l2": l2[i], "ads": float(ads_now[i]), "linf": linf[i], "x_min": lo[i], "x_max": hi[i]})
        traces[i].append(row)
    return state.delta


def text_step(state: AttackState, x0, detector, config: AttackConfig, vocab, traces, flags) -> torch.Tensor:
    """E <- E - eta_e * w_t * clip(grad L_semantic), delta frozen."""
    x = (x0 + state.delta).detach()
    e = state.embedding.clone().requires_grad_(True)
    out = detector(x, e)
    ce = detection_loss(out.class_logits)
    coh = coherence_loss(e, vocab, config.k_nn)
    loss = semantic_loss(out.class_logits, coh, config.beta)
    (grad,) = torch.autograd.grad(loss.sum(), e)
    finite = torch.isfinite(grad).flatten(1).all(1)
    for i in (state.active & ~finite).nonzero().flatten().tolist():
        flags[i].add("abort:nonfinite-text-gradient")
    state.active &= finite
    grad = torch.where(torch.isfinite(grad), grad, torch.zeros_like(grad))
    grad = clip_grad(grad, config.grad_clip)
    step = config.eta_e * warmup_factor(state.t, config.warmup)
    with torch.no_grad():
        keep = state.active.view(-1, 1, 1).to(DTYPE)
        state.embedding = state.embedding - keep * step * grad
    for i in range(len(traces)):
        rec = traces[i][-1]
        rec.update({"l_semantic_ce": float(ce[i].detach()), "l_coherence": float(coh[i].detach()),
                    "l_text": float(loss[i].detach())})
    return state.embedding


def run_attack(image: ImageTensor, mask: Optional[TamperMask], embedding, detector,
               config: AttackConfig, image_id: str = "img0", method: str = "full"):
    """Attack one image. Returns (adversarial image, final embedding, record)."""
    res = attack_batch([image], [mask] if mask is not None else None, detector, config,
                       [image_id], embedding, method)[0]
    return res.adversarial, res.embedding, res.record


# ---------------------------------------------------------------- baselines

def _baseline(images, masks, detector, config, ids, embedding, method, make_delta):
    b = len(images)
    ids = list(ids) if ids is not None else [f"img{i}" for i in range(b)]
    x0 = image_batch(images)
    e0 = _as_embedding(embedding, detector, b)
    clean = _evaluate(detector, x0, e0, None, config.mask_threshold)
    refs = _reference_masks(images, masks, config, clean[1])
    traces = [[] for _ in range(b)]
    delta = make_delta(x0, e0, ids, traces)
    delta = torch.maximum(torch.minimum(delta.clamp(-config.epsilon, config.epsilon), 1.0 - x0), -x0)
    x_adv = x0 + delta
    flags = [set() for _ in range(b)]
    return _finish(detector, images, ids, x0, x_adv, e0, e0, refs, config, method, flags,
                   [None] * b, traces, [[] for _ in range(b)], clean=clean)


def pgd_attack(images, masks, detector, config: AttackConfig, ids=None, embedding=None):
    """Plain L-inf sign-gradient PGD on the detection loss only, same budget and steps."""
    def make(x0, e0, ids, traces):
        delta = torch.zeros_like(x0)
        for t in range(1, config.T + 1):
            d = delta.clone().requires_grad_(True)
            out = detector(x0 + d, e0)
            l_det = detection_loss(out.class_logits)
            (g,) = torch.autograd.grad(l_det.sum(), d)
            with torch.no_grad():
                delta = (delta - config.eta_v * torch.sign(g)).clamp(-config.epsilon, config.epsilon)
                delta = torch.maximum(torch.minimum(delta, 1.0 - x0), -x0)
            for i in range(len(traces)):
                traces[i].append({"t": t, "l_det": float(l_det[i].detach())})
        return delta
    return _baseline(images, masks, detector, config, ids, embedding, "pgd", make)


def fgsm_attack(images, masks, detector, config: AttackConfig, ids=None, embedding=None):
    def make(x0, e0, ids, traces):
        d = torch.zeros_like(x0).requires_grad_(True)
        out = detector(x0 + d, e0)
        l_det = detection_loss(out.class_logits)
        (g,) = torch.autograd.grad(l_det.sum(), d)
        for i in range(len(traces)):
            traces[i].append({"t": 1, "l_det": float(l_det[i].detach())})
        return -config.epsilon * torch.sign(g)
    return _baseline(images, masks, detector, config, ids, embedding, "fgsm", make)


def noise_attack(images, masks, detector, config: AttackConfig, ids=None, embedding=None):
    """Random +-epsilon sign noise, one independent stream per image."""
    def make(x0, e0, ids, traces):
        out = []
        for i, image_id in enumerate(ids):
            rng = np.random.default_rng(image_seed(config.seed, image_id))
            out.append(rng.choice([-1.0, 1.0], size=tuple(x0.shape[1:])))
        return config.epsilon * torch.from_numpy(np.stack(out)).to(DTYPE)
    return _baseline(images, masks, detector, config, ids, embedding, "noise", make)


def method_config(method: str, config: AttackConfig) -> AttackConfig:
    if method == "full":
        return config.replace(threat_level="II")
    if method == "vis-only":
        return config.replace(threat_level="I")
    if method == "no-mislead":
        return config.replace(use_mislead=False)
    if method == "no-hide":
        return config.replace(use_hide=False)
    return config


def run_method(method: str, images, masks, detector, config: AttackConfig, ids=None,
               embedding=None) -> list[AttackResult]:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method == "pgd":
        return pgd_attack(images, masks, detector, config, ids, embedding)
    if method == "fgsm":
        return fgsm_attack(images, masks, detector, config, ids, embedding)
    if method == "noise":
        return noise_attack(images, masks, detector, config, ids, embedding)
    return attack_batch(images, masks, detector, method_config(method, config), ids, embedding, method)
