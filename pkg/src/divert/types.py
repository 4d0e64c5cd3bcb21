"""Shared domain types: images, masks, perturbations, attack config and records."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Optional

import numpy as np

REAL = 0
FAKE = 1
LABELS = ("Real", "Fake")

MIN_SIDE = 32


def _check_image_array(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3 or values.shape[2] != 3:
        raise ValueError(f"image must be HxWx3, got shape {values.shape}")
    if values.shape[0] < MIN_SIDE or values.shape[1] < MIN_SIDE:
        raise ValueError(f"image sides must be >= {MIN_SIDE}, got {values.shape[:2]}")
    if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
        raise ValueError("image values must be finite and lie in [0, 1]")
    return values


@dataclass(frozen=True)
class ImageTensor:
    values: np.ndarray

    def __post_init__(self):
        v = _check_image_array(self.values)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class Perturbation:
    values: np.ndarray
    epsilon: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValueError(f"perturbation must be HxWx3, got shape {v.shape}")
        if np.abs(v).max(initial=0.0) > self.epsilon + 1e-12:
            raise ValueError("perturbation exceeds its L-inf budget")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, shape, epsilon: float) -> "Perturbation":
        return cls(np.zeros(shape), epsilon)


@dataclass(frozen=True)
class TamperMask:
    """Binary HxW map; 1 marks tampered pixels (R_tamper), 0 the background."""

    values: np.ndarray
    source: str = "oracle"

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"mask must be HxW, got shape {v.shape}")
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("mask must be binary")
        if v.size == 0:
            raise ValueError("mask must be nonempty")
        if self.source not in ("oracle", "predicted"):
            raise ValueError(f"unknown mask source {self.source!r}")
        v = v.astype(bool)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def tamper(self) -> np.ndarray:
        return self.values

    @property
    def background(self) -> np.ndarray:
        return ~self.values

    @property
    def degenerate(self) -> bool:
        """True when either region is empty."""
        n = int(self.values.sum())
        return n == 0 or n == self.values.size


@dataclass(frozen=True)
class AttentionMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("attention map must be HxW")
        if not np.all(np.isfinite(v)) or v.min(initial=0.0) < 0:
            raise ValueError("attention map must be finite and nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class PromptEmbedding:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError("prompt embedding must be n x d with n >= 1")
        if not np.all(np.isfinite(v)):
            raise ValueError("prompt embedding must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def tokens(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple
    embeddings: np.ndarray
    forensic_terms: frozenset = frozenset()

    def __post_init__(self):
        e = np.asarray(self.embeddings, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] != len(self.tokens):
            raise ValueError("embedding rows must match token count")
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "forensic_terms", frozenset(self.forensic_terms))
        e.setflags(write=False)
        object.__setattr__(self, "embeddings", e)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def index(self, token: str) -> int:
        return self.tokens.index(token)


# Budget and visual step kept as exact rationals, evaluated once in float64.
EPSILON = Fraction(8, 255)
ETA_V = Fraction(1, 255)


@dataclass
class AttackConfig:
    epsilon: float = float(EPSILON)
    alpha: float = 0.7
    beta: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 0.01
    lambda_s: float = 1.0
    sigma: float = 15.0
    eta_v: float = float(ETA_V)
    eta_e: float = 0.01
    T: int = 100
    k_nn: int = 100
    threat_level: str = "II"
    mask_mode: str = "oracle"
    seed: int = 0
    # stabilizers
    grad_clip: float = 1.0
    warmup: int = 10
    attention_gamma: float = 0.9
    attention_normalize: bool = True  # max-normalize the proxy so M and G share a [0, 1] scale
    # predicted-mask schedule
    mask_freeze: int = 50
    mask_gamma: float = 0.8
    mask_interval: int = 10
    mask_stabilization: bool = True
    closing_size: int = 3
    dilation_size: int = 5
    dilation_iterations: int = 5  # at reference_size; scaled with the image side when scale_band
    scale_band: bool = True
    mask_threshold: float = 0.5
    # decoy selection
    decoy_candidates: int = 3
    saliency_threshold: float = 0.5
    entropy_low: float = 4.0
    entropy_high: float = 6.0
    border_distance: float = 50.0
    tamper_distance: float = 100.0
    reference_size: int = 512
    # method switches used by ablations and baselines
    use_mislead: bool = True
    use_hide: bool = True

    def __post_init__(self):
        if self.threat_level not in ("I", "II"):
            raise ValueError("threat_level must be 'I' or 'II'")
        if self.mask_mode not in ("oracle", "predicted"):
            raise ValueError("mask_mode must be 'oracle' or 'predicted'")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        for name in ("beta", "lambda1", "lambda2", "lambda_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.eta_v <= 0 or self.eta_e <= 0:
            raise ValueError("step sizes must be positive")
        if not 0.0 <= self.attention_gamma < 1.0:
            raise ValueError("attention_gamma must lie in [0, 1)")
        if self.T < 0 or self.k_nn < 1:
            raise ValueError("T must be >= 0 and k_nn >= 1")

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AttackConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown AttackConfig fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class AttackRecord:
    image_id: str
    clean_prediction: str
    attacked_prediction: str
    success: bool
    iou_clean: float
    iou_adv: float
    ads_clean: float
    ads_adv: float
    psnr: float
    ssim: float
    loss_trace: list = field(default_factory=list)
    explanation: Optional[str] = None
    jec_score: Optional[float] = None
    method: str = "full"
    flags: list = field(default_factory=list)
    decoy_center: Optional[list] = None
    mask_changes: list = field(default_factory=list)

    def __post_init__(self):
        for p in (self.clean_prediction, self.attacked_prediction):
            if p not in LABELS:
                raise ValueError(f"prediction must be one of {LABELS}, got {p!r}")
        expected = self.clean_prediction == "Fake" and self.attacked_prediction == "Real"
        if bool(self.success) != expected:
            raise ValueError("success flag inconsistent with stored predictions")
        for name in ("iou_clean", "iou_adv", "ads_clean", "ads_adv"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.jec_score is not None and not 1.0 <= self.jec_score <= 5.0:
            raise ValueError("jec_score must lie in [1, 5]")

    @property
    def detectable(self) -> bool:
        return self.clean_prediction == "Fake"

    @property
    def flagged(self) -> bool:
        return any(f.startswith("abort") for f in self.flags)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AttackRecord":
        return cls(**data)


def success_flag(clean_prediction: str, attacked_prediction: str) -> bool:
    return clean_prediction == "Fake" and attacked_prediction == "Real"


def clip_adversarial(image: ImageTensor, delta: Perturbation) -> ImageTensor:
    """Return clamp(I + clamp(delta, -eps, eps), 0, 1)."""
    if image.shape != delta.values.shape:
        raise ValueError(f"shape mismatch: image {image.shape} vs delta {delta.values.shape}")
    d = np.clip(delta.values, -delta.epsilon, delta.epsilon)
    return ImageTensor(np.clip(image.values + d, 0.0, 1.0))
