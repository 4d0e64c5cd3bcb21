"""Differentiable forgery-detector contract and a trainable toy implementation.

Any detector works with the attack as long as calling it as
``detector(images, embeddings)`` returns a :class:`DetectorOutput` whose
``head_maps`` are tensors that participate in the class-logit graph, and it
exposes ``vocabulary()``, ``default_prompt()`` and ``attention_layers``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .types import FAKE, REAL, ImageTensor, PromptEmbedding, Vocabulary

log = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_FORMAT = "divert-detector"
CHECKPOINT_VERSION = 1
IN_GROUPS = 3
LOWPASS_SIGMA = 1.0  # suppresses sensor grain before any feature is read
BAND_SIGMA = 2.5
BAND_SCALE = 8.0  # puts natural mid-frequency texture near unit scale

FORENSIC_TERMS = (
    "lighting", "shadow", "boundary", "edge", "texture", "noise", "grain", "blur",
    "splice", "seam", "artifact", "compression", "resampling", "color", "contrast",
    "reflection", "perspective", "illumination", "inconsistent", "consistent",
    "natural", "smooth", "sharp", "pattern", "region", "pixel", "tampered",
    "manipulated", "authentic", "forged", "copy", "move", "inpainting", "clone",
    "detail", "surface", "skin", "structure", "frequency", "gradient",
)
COMMON_WORDS = (
    "is", "this", "image", "real", "or", "fake", "?", "the", "a", "an", "of", "in",
    "and", "to", "it", "with", "that", "photo", "picture", "look", "does", "appear",
    "please", "analyze", "determine", "whether", "has", "been", "any", "are", "there",
    "signs", "check", "for", "describe", "what", "where", "why", "how", "which",
    "be", "can", "you", "see", "show", "tell", "me", "about", "its", "was",
)
DEFAULT_PROMPT = ("is", "this", "image", "real", "or", "fake", "?", "analyze")
PROMPT_TEMPLATES = (
    DEFAULT_PROMPT,
    ("does", "this", "photo", "look", "real", "or", "fake", "?"),
    ("check", "this", "image", "for", "signs", "of", "tampered", "region"),
    ("is", "there", "any", "manipulated", "region", "in", "this", "image"),
)


def build_tokens(size: int = 256) -> tuple:
    words = list(COMMON_WORDS) + [w for w in FORENSIC_TERMS if w not in COMMON_WORDS]
    words += [f"tok{i}" for i in range(size - len(words))]
    return tuple(words[:size])


class DetectorError(RuntimeError):
    pass


@dataclass
class DetectorOutput:
    """Class logits (B, 2), mask logits (B, H, W) and per-layer head maps.

    ``head_maps[l]`` has shape (B, heads, gh, gw) and lies on the graph from
    the image (and prompt) to ``class_logits``.
    """

    class_logits: torch.Tensor
    mask_logits: torch.Tensor
    head_maps: list

    @property
    def class_probs(self) -> torch.Tensor:
        return torch.softmax(self.class_logits, dim=-1)

    @property
    def mask_probs(self) -> torch.Tensor:
        return torch.sigmoid(self.mask_logits)


@dataclass
class ToyDetectorConfig:
    image_size: int = 64
    patch: int = 8
    dim: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    vocab_size: int = 256


def _gaussian_kernel(sigma: float) -> torch.Tensor:
    """Normalized 1-D Gaussian taps with radius ceil(3 sigma)."""
    r = math.ceil(3 * sigma)
    t = torch.arange(-r, r + 1, dtype=torch.float64)
    g = torch.exp(-t**2 / (2 * sigma**2))
    return g / g.sum()


def _blur(images: torch.Tensor, taps: torch.Tensor) -> torch.Tensor:
    """Separable depthwise Gaussian blur with replicate padding."""
    r = taps.shape[0] // 2
    c = images.shape[1]
    t = taps.to(images.dtype)
    x = F.pad(images, (r, r, r, r), mode="replicate")
    x = F.conv2d(x, t.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, t.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, x: torch.Tensor, n_prefix: int, grid: tuple):
        b, n, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(self.norm1(x)).reshape(b, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        # Split the CLS query row so its patch part is a tensor the graph reads from.
        cls_prefix = attn[:, :, :1, :n_prefix]
        head_map = attn[:, :, 0, n_prefix:].reshape(b, self.heads, *grid)
        cls_out = cls_prefix @ v[:, :, :n_prefix] + head_map.reshape(b, self.heads, 1, -1) @ v[:, :, n_prefix:]
        rest_out = attn[:, :, 1:] @ v
        out = torch.cat([cls_out, rest_out], dim=2).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(out)
        x = x + self.mlp(self.norm2(x))
        return x, head_map


class ToyDetector(nn.Module):
    """Patch-attention classifier with a per-pixel mask head and prompt tokens.

    Sequence layout is [CLS, prompt tokens, patch tokens]; the class head reads
    CLS, the mask head decodes each patch token into patch x patch logits.
    """

    def __init__(self, config: ToyDetectorConfig | None = None):
        super().__init__()
        self.config = cfg = config or ToyDetectorConfig()
        if cfg.layers < 2:
            raise ValueError("need at least 2 layers")
        if cfg.image_size % cfg.patch:
            raise ValueError("image size must be a multiple of the patch size")
        self.grid = (cfg.image_size // cfg.patch,) * 2
        n_patches = self.grid[0] * self.grid[1]
        d = cfg.dim
        # fixed front-end: grain-suppressing low-pass, then a difference-of-Gaussians band
        self.register_buffer("lowpass", _gaussian_kernel(LOWPASS_SIGMA), persistent=False)
        self.register_buffer("bandpass", _gaussian_kernel(BAND_SIGMA), persistent=False)
        self.patch_embed = nn.Linear(3 * IN_GROUPS * cfg.patch * cfg.patch, d)
        self.pos = nn.Parameter(torch.randn(1, n_patches, d) * 0.02)
        self.cls = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.prompt_type = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.token_embedding = nn.Embedding(cfg.vocab_size, d)
        nn.init.normal_(self.token_embedding.weight, std=0.5)
        self.blocks = nn.ModuleList(_Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(d)
        self.cls_head = nn.Linear(d, 2)
        self.mask_head = nn.Linear(d, cfg.patch * cfg.patch)
        self.tokens = build_tokens(cfg.vocab_size)

    @property
    def attention_layers(self) -> range:
        """Later half of the encoder, used for attention aggregation."""
        n = self.config.layers
        return range(n // 2, n)

    def vocabulary(self) -> Vocabulary:
        emb = self.token_embedding.weight.detach().cpu().numpy()
        return Vocabulary(self.tokens, emb, frozenset(FORENSIC_TERMS))

    def prompt_ids(self, words=DEFAULT_PROMPT) -> torch.Tensor:
        return torch.tensor([self.tokens.index(w) for w in words])

    def default_prompt(self) -> torch.Tensor:
        return self.token_embedding(self.prompt_ids()).detach().clone()

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Low-passed centered RGB, scaled mid-frequency band and its square (B, 9, H, W)."""
        low = _blur(images, self.lowpass)
        band = (low - _blur(low, self.bandpass)) * BAND_SCALE
        return torch.cat([low - 0.5, band, band * band], dim=1)

    def _patchify(self, images: torch.Tensor) -> torch.Tensor:
        p = self.config.patch
        b, c, h, w = images.shape
        x = images.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(b, (h // p) * (w // p), c * p * p)

    def _unpatchify(self, logits: torch.Tensor) -> torch.Tensor:
        p = self.config.patch
        gh, gw = self.grid
        b = logits.shape[0]
        return logits.reshape(b, gh, gw, p, p).permute(0, 1, 3, 2, 4).reshape(b, gh * p, gw * p)

    def forward(self, images: torch.Tensor, embeddings: torch.Tensor) -> DetectorOutput:
        """images: (B, 3, H, W) in [0, 1]; embeddings: (B, n, d) or (n, d)."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise DetectorError(f"images must be (B, 3, H, W), got {tuple(images.shape)}")
        size = self.config.image_size
        if images.shape[-2:] != (size, size):
            raise DetectorError(f"detector expects {size}x{size} images, got {tuple(images.shape[-2:])}")
        if embeddings.dim() == 2:
            embeddings = embeddings.unsqueeze(0).expand(images.shape[0], -1, -1)
        if embeddings.shape[-1] != self.config.dim or embeddings.shape[0] != images.shape[0]:
            raise DetectorError(f"embedding shape {tuple(embeddings.shape)} does not match detector")
        b = images.shape[0]
        patches = self.patch_embed(self._patchify(self.features(images))) + self.pos
        prompt = embeddings + self.prompt_type
        x = torch.cat([self.cls.expand(b, -1, -1), prompt, patches], dim=1)
        n_prefix = 1 + embeddings.shape[1]
        head_maps = []
        for block in self.blocks:
            x, hm = block(x, n_prefix, self.grid)
            head_maps.append(hm)
        x = self.norm(x)
        class_logits = self.cls_head(x[:, 0])
        mask_logits = self._unpatchify(self.mask_head(x[:, n_prefix:]))
        return DetectorOutput(class_logits, mask_logits, head_maps)


def image_batch(images) -> torch.Tensor:
    """Stack ImageTensors / HxWx3 arrays into a (B, 3, H, W) float64 tensor."""
    arrs = [im.values if isinstance(im, ImageTensor) else np.asarray(im) for im in images]
    return torch.from_numpy(np.stack(arrs).transpose(0, 3, 1, 2).copy()).to(DTYPE)


def forward(detector: ToyDetector, image: ImageTensor, embedding: PromptEmbedding | None = None) -> DetectorOutput:
    """Single-image convenience wrapper around ``detector(images, embeddings)``."""
    if embedding is None:
        emb = detector.default_prompt()
    else:
        emb = torch.from_numpy(np.array(embedding.values)).to(DTYPE)
    return detector(image_batch([image]), emb)


@torch.no_grad()
def predict(detector, images: torch.Tensor, embeddings, threshold: float = 0.5, batch: int = 256):
    """Return (labels, mask probabilities) for a (B, 3, H, W) batch."""
    labels, masks = [], []
    for i in range(0, images.shape[0], batch):
        emb = embeddings if embeddings.dim() == 2 else embeddings[i:i + batch]
        out = detector(images[i:i + batch], emb)
        labels.append(out.class_logits.argmax(-1))
        masks.append(out.mask_probs)
    return torch.cat(labels), torch.cat(masks)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 1e-4
    mask_weight: float = 1.0
    seed: int = 0
    min_accuracy: float = 0.90
    min_iou: float = 0.4
    label_smoothing: float = 0.1  # keeps class logits calibrated rather than saturated
    attention_weight: float = 0.5  # CLS-attention-to-mask alignment on fakes
    noise_aug: float = 4.0 / 255.0  # max amplitude of random sign noise added to half of each batch


def attention_alignment_loss(model, out: DetectorOutput, masks: torch.Tensor, labels: torch.Tensor):
    """Cross-entropy between the tamper mask and the later-layer CLS attention, fakes only.

    Both are normalized to distributions over patches. Stands in for the
    segmentation-aligned attention of a localization-trained forensic model.
    """
    fake = labels == FAKE
    if not fake.any():
        return out.class_logits.new_zeros(())
    p = model.config.patch
    target = F.avg_pool2d(masks[fake].unsqueeze(1), p).flatten(1)
    target = target / target.sum(1, keepdim=True).clamp(min=1e-8)
    att = torch.stack([out.head_maps[l][fake].mean(1) for l in model.attention_layers]).mean(0).flatten(1)
    att = att / att.sum(1, keepdim=True).clamp(min=1e-12)
    return -(target * torch.log(att + 1e-8)).sum(1).mean()


def load_split(root, split: str):
    """Images (N, 3, H, W), labels (N,), masks (N, H, W) for a dataset split."""
    from .bench import read_manifest
    from .io import load_image, load_mask

    root = Path(root)
    rows = [r for r in read_manifest(root) if r["split"] == split]
    if not rows:
        raise DetectorError(f"dataset {root} has no {split!r} rows")
    imgs, labels, masks, ids = [], [], [], []
    for r in rows:
        fake = r["label"] == "Fake"
        img = load_image(root / ("fake" if fake else "real") / f"{r['id']}.png")
        imgs.append(img.values)
        if fake:
            masks.append(load_mask(root / "masks" / f"{r['id']}.png").values)
        else:
            masks.append(np.zeros(img.shape[:2], dtype=bool))
        labels.append(FAKE if fake else REAL)
        ids.append(r["id"])
    x = torch.from_numpy(np.stack(imgs).transpose(0, 3, 1, 2).copy()).to(DTYPE)
    return x, torch.tensor(labels), torch.from_numpy(np.stack(masks)).to(DTYPE), ids


def mask_iou(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-image IoU of boolean masks; both-empty counts as 1."""
    pred, gt = pred.bool(), gt.bool()
    inter = (pred & gt).flatten(1).sum(1).double()
    union = (pred | gt).flatten(1).sum(1).double()
    return torch.where(union > 0, inter / union.clamp(min=1), torch.ones_like(union))


def evaluate_detector(detector, images, labels, masks, prompt=None) -> dict:
    prompt = detector.default_prompt() if prompt is None else prompt
    pred, mprob = predict(detector, images, prompt)
    acc = (pred == labels).double().mean().item()
    hit = (pred == FAKE) & (labels == FAKE)
    iou = mask_iou(mprob[hit] > 0.5, masks[hit]).mean().item() if hit.any() else 0.0
    return {"accuracy": acc, "iou": iou}


def train_toy_detector(dataset, epochs: int | None = None, seed: int = 0, *,
                       model_config: ToyDetectorConfig | None = None,
                       train_config: TrainConfig | None = None, log_path=None,
                       check: bool = True) -> ToyDetector:
    """Train the toy detector deterministically on a forgery-bench dataset.

    Raises DetectorError if the held-out accuracy or clean mask IoU on
    correctly detected fakes ends below the configured floors.
    """
    tc = train_config or TrainConfig()
    if epochs is not None:
        tc.epochs = epochs
    tc.seed = seed
    torch.manual_seed(seed)
    # float32 for training speed; the returned model is converted to float64
    x, y, m, _ = load_split(dataset, "train")
    xt, yt, mt, _ = load_split(dataset, "test")
    x, m, xt, mt = x.float(), m.float(), xt.float(), mt.float()
    cfg = model_config or ToyDetectorConfig(image_size=x.shape[-1])
    model = ToyDetector(cfg)
    templates = torch.stack([model.prompt_ids(t) for t in PROMPT_TEMPLATES])
    opt = torch.optim.AdamW(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    steps = tc.epochs * math.ceil(len(x) / tc.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=tc.lr, total_steps=max(steps, 1), pct_start=0.15)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(tc.epochs):
        model.train()
        order = torch.from_numpy(rng.permutation(len(x)))
        total = 0.0
        for i in range(0, len(x), tc.batch_size):
            idx = order[i:i + tc.batch_size]
            prompt_idx = torch.from_numpy(rng.integers(0, len(templates), len(idx)))
            emb = model.token_embedding(templates[prompt_idx])
            xb = x[idx]
            if tc.noise_aug > 0:
                amp = torch.from_numpy(rng.uniform(0, tc.noise_aug, (len(idx), 1, 1, 1)) * (rng.random((len(idx), 1, 1, 1)) < 0.5)).float()
                signs = torch.from_numpy(rng.choice([-1.0, 1.0], size=tuple(xb.shape))).float()
                xb = (xb + amp * signs).clamp(0, 1)
            out = model(xb, emb)
            loss = F.cross_entropy(out.class_logits, y[idx], label_smoothing=tc.label_smoothing)
            loss = loss + tc.mask_weight * F.binary_cross_entropy_with_logits(out.mask_logits, m[idx])
            if tc.attention_weight > 0:
                loss = loss + tc.attention_weight * attention_alignment_loss(model, out, m[idx], y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        model.eval()
        stats = evaluate_detector(model, xt, yt, mt)
        row = {"epoch": epoch + 1, "loss": total / len(x), **stats}
        history.append(row)
        log.info("epoch %d loss %.4f acc %.4f iou %.4f", row["epoch"], row["loss"], row["accuracy"], row["iou"])
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "accuracy", "iou"], lineterminator="\n")
            writer.writeheader()
            writer.writerows(history)
    model.eval()
    final = history[-1] if history else evaluate_detector(model, xt, yt, mt)
    model = model.to(DTYPE)
    for p in model.parameters():
        p.requires_grad_(False)
    model.train_stats = final
    if check and final["accuracy"] < tc.min_accuracy:
        raise DetectorError(f"held-out accuracy {final['accuracy']:.3f} < {tc.min_accuracy}")
    if check and final["iou"] < tc.min_iou:
        raise DetectorError(f"clean mask IoU {final['iou']:.3f} < {tc.min_iou}")
    return model


# ---------------------------------------------------------------- checkpoints
# Checkpoint fields, in order: format, version, model_config, train_stats, state_dict.

def save_checkpoint(model: ToyDetector, path) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "train_stats": getattr(model, "train_stats", {}),
        "state_dict": model.state_dict(),
    }, path)


def load_checkpoint(path) -> ToyDetector:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    blob = torch.load(path, weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise DetectorError(f"{path}: unsupported checkpoint")
    model = ToyDetector(ToyDetectorConfig(**blob["model_config"])).to(DTYPE)
    model.load_state_dict(blob["state_dict"])
    model.train_stats = blob.get("train_stats", {})
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
