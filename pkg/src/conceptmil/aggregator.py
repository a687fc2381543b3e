"""Two-stage concept-guided aggregation, slide adapters and cosine classification.

Per class, patch embeddings ``Z`` (n x d) are pooled into one feature per
concept using softmax similarity weights, the concept features are pooled
into a bag feature guided by the class prompt, both the bag feature and the
prompt pass through residual bottleneck adapters, and the class
probabilities are a temperature softmax over prompt/bag cosines.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffkernel as dk
from .conceptbank import ClassEmbeddings
from .errors import DegenerateInputError, EmptyBagError, ValidationError

INSTANCES = "instances"
CONCEPTS = "concepts"

ADAPTER_NAMES = ("adapter.visual.W1", "adapter.visual.W2", "adapter.text.W1", "adapter.text.W2")


@dataclass(frozen=True)
class ModelConfig:
    alpha: float = 0.2
    beta: float = 0.2
    tau: float = 0.07
    logit_scale: float = 10.0
    leaky_slope: float = 0.01
    adapter_hidden: int | None = None  # None: d // 4
    use_adapters: bool = True
    bag_guidance: bool = True
    # softmax over patches per concept ("instances") or over concepts per patch
    instance_softmax: str = INSTANCES

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValidationError(f"alpha/beta must lie in [0,1], got {self.alpha}, {self.beta}")
        if self.tau <= 0 or self.logit_scale <= 0:
            raise ValidationError("tau and logit_scale must be positive")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValidationError(f"leaky_slope must lie in (0,1), got {self.leaky_slope}")
        if self.adapter_hidden is not None and self.adapter_hidden < 1:
            raise ValidationError("adapter_hidden must be >= 1")
        if self.instance_softmax not in (INSTANCES, CONCEPTS):
            raise ValidationError(f"instance_softmax must be {INSTANCES!r} or {CONCEPTS!r}")

    def hidden(self, d: int) -> int:
        return self.adapter_hidden if self.adapter_hidden is not None else max(1, d // 4)

    def to_dict(self) -> dict:
        return asdict(self)


def init_adapter_tensors(d: int, hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "adapter.visual.W1": rng.normal(0.0, 1.0 / np.sqrt(d), (d, hidden)),
        "adapter.visual.W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, d)),
        "adapter.text.W1": rng.normal(0.0, 1.0 / np.sqrt(d), (d, hidden)),
        "adapter.text.W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, d)),
    }


def instance_concept_weights(Z, C, scale: float, axis: str = INSTANCES) -> dk.Matrix:
    """Softmax of ``scale * Z C^T``; by default each concept column sums to one."""
    Z = dk.as_matrix(Z)
    if Z.rows == 0:
        raise EmptyBagError("bag has no patches")
    sims = dk.matmul(Z, dk.transpose(C))
    return dk.softmax_axis(sims, dk.COLS if axis == INSTANCES else dk.ROWS, scale)


def concept_features(W, Z) -> dk.Matrix:
    """H = W^T Z (m x d)."""
    return dk.matmul(dk.transpose(W), Z)


def bag_guidance(C, c_bag, scale: float) -> dk.Matrix:
    """Softmax over concepts of their similarity to the class prompt (m x 1)."""
    C = dk.as_matrix(C)
    if C.rows == 0:
        raise DegenerateInputError("no concepts to guide")
    return dk.softmax_axis(dk.matmul(C, dk.transpose(c_bag)), dk.COLS, scale)


def bag_representation(w, H) -> dk.Matrix:
    """F = w^T H + mean(H)."""
    return dk.add(dk.matmul(dk.transpose(w), H), dk.mean_rows(H))


def unguided_bag_representation(H) -> dk.Matrix:
    """Ablation without prompt guidance: F = 2 * mean(H)."""
    mean = dk.mean_rows(H)
    return dk.add(mean, mean)


def slide_adapt(x, W1, W2, ratio: float, slope: float) -> dk.Matrix:
    """ratio * (LeakyReLU(x W1) W2) + (1 - ratio) * x"""
    if not 0.0 <= ratio <= 1.0:
        raise ValidationError(f"blend ratio must lie in [0,1], got {ratio}")
    adapted = dk.matmul(dk.leaky_relu(dk.matmul(x, W1), slope), W2)
    return dk.add(dk.scale(adapted, ratio), dk.scale(x, 1.0 - ratio))


def class_probabilities(F_stars, C_stars, tau: float) -> dk.Matrix:
    """1 x K softmax of cos(F*_k, C*_k) / tau over all classes."""
    if tau <= 0:
        raise ValidationError("tau must be positive")
    cosines = [dk.cosine(f, c) for f, c in zip(F_stars, C_stars)]
    return dk.softmax_axis(dk.hstack(cosines), dk.ROWS, 1.0 / tau)


@dataclass
class ForwardOutput:
    probs: dk.Matrix
    weights: list[np.ndarray] = field(default_factory=list)        # per class, n x m
    similarities: list[np.ndarray] = field(default_factory=list)   # per class, n x m (raw Z C^T)
    bag_features: list[dk.Matrix] = field(default_factory=list)

    @property
    def probabilities(self) -> np.ndarray:
        return self.probs.data[0].copy()


def forward(Z, class_embeddings: list[ClassEmbeddings], tensors: dict, cfg: ModelConfig) -> ForwardOutput:
    """Class probabilities for one bag.

    ``tensors`` must hold the adapter weights (``ADAPTER_NAMES``) as arrays or
    tape leaves unless adapters are disabled.
    """
    Z = dk.as_matrix(Z)
    if Z.rows == 0:
        raise EmptyBagError("bag has no patches")
    if not class_embeddings:
        raise ValidationError("no class embeddings")
    out = ForwardOutput(probs=None)
    f_stars, c_stars = [], []
    for emb in class_embeddings:
        C, c_bag = emb.concepts, emb.prompt
        if C.cols != Z.cols:
            raise ValidationError(f"patch dim {Z.cols} != concept dim {C.cols}")
        W = instance_concept_weights(Z, C, cfg.logit_scale, cfg.instance_softmax)
        H = concept_features(W, Z)
        if cfg.bag_guidance:
            F = bag_representation(bag_guidance(C, c_bag, cfg.logit_scale), H)
        else:
            F = unguided_bag_representation(H)
        if cfg.use_adapters:
            F_star = slide_adapt(F, tensors["adapter.visual.W1"], tensors["adapter.visual.W2"],
                                 cfg.alpha, cfg.leaky_slope)
            C_star = slide_adapt(c_bag, tensors["adapter.text.W1"], tensors["adapter.text.W2"],
                                 cfg.beta, cfg.leaky_slope)
        else:
            F_star, C_star = F, c_bag
        f_stars.append(F_star)
        c_stars.append(C_star)
        out.weights.append(W.data)
        out.similarities.append(Z.data @ C.data.T)
        out.bag_features.append(F)
    out.probs = class_probabilities(f_stars, c_stars, cfg.tau)
    return out
