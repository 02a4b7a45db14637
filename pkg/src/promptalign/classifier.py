"""Distance-based classification over a bank of class prompt sets.

Prediction is a softmax over (1 - d_k)/tau where d_k is the
hierarchical OT distance to class k. Gradients of the cross-entropy
loss flow through both OT levels via the envelope theorem (the
converged plans act as constants) and through the cosine terms
analytically; unit normalization of every embedding is treated as part
of the forward map, so gradients live in the tangent space of the
sphere.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .alignment import AlignConfig, HierarchicalResult, PromptSet, hierarchical_distance
from .numerics import softmax

__all__ = [
    "ClassBank",
    "Prediction",
    "FeatureGrad",
    "LossGradients",
    "classify",
    "class_distances",
    "cross_entropy_loss",
    "loss_gradients",
    "worker_count",
]

WORKERS_ENV = "PROMPTALIGN_WORKERS"


def worker_count() -> int:
    """Worker threads for per-class/per-image fan-out (>= 1).

    Results are collected in index order, so output is identical for
    any value.
    """
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}")
    return max(1, n)


def _ordered_map(fn, items):
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class ClassBank:
    classes: Tuple[PromptSet, ...]
    names: Tuple[str, ...]

    def __post_init__(self):
        classes = tuple(self.classes)
        names = tuple(self.names)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "names", names)
        if len(classes) < 2:
            raise ValueError("need at least two classes")
        if len(names) != len(classes):
            raise ValueError("one name per class required")
        n = len(classes[0])
        d = classes[0].dim
        if any(len(c) != n or c.dim != d for c in classes):
            raise ValueError("all class prompt sets must share N and dim")

    def __len__(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class Prediction:
    probabilities: np.ndarray
    distances: np.ndarray

    @property
    def argmax(self) -> int:
        return int(np.argmin(self.distances))


def _solve_all(image: PromptSet, bank: ClassBank, cfg: AlignConfig) -> List[HierarchicalResult]:
    return _ordered_map(lambda c: hierarchical_distance(image, c, cfg), list(bank.classes))


def class_distances(image: PromptSet, bank: ClassBank, cfg: AlignConfig) -> np.ndarray:
    return np.array([r.distance for r in _solve_all(image, bank, cfg)])


def classify(image: PromptSet, bank: ClassBank, cfg: AlignConfig) -> Prediction:
    d = class_distances(image, bank, cfg)
    return Prediction(softmax((1.0 - d) / cfg.tau), d)


def cross_entropy_loss(batch: Sequence[Tuple[PromptSet, int]], bank: ClassBank,
                       cfg: AlignConfig) -> float:
    """Mean negative log-probability of the true classes."""
    if not batch:
        raise ValueError("empty batch")
    for _, label in batch:
        if not 0 <= label < len(bank):
            raise ValueError(f"label {label} out of range for {len(bank)} classes")
    probs = _ordered_map(lambda pair: classify(pair[0], bank, cfg).probabilities, list(batch))
    total = 0.0
    for (_, label), p in zip(batch, probs):
        total += -np.log(p[label])
    return float(total / len(batch))


@dataclass
class FeatureGrad:
    """Gradient w.r.t. one PromptFeature, tangent to the unit sphere."""

    global_: np.ndarray
    tokens: np.ndarray

    @staticmethod
    def zeros_like(feature) -> "FeatureGrad":
        return FeatureGrad(np.zeros_like(feature.global_), np.zeros_like(feature.tokens))

    def add(self, other: "FeatureGrad") -> None:
        self.global_ += other.global_
        self.tokens += other.tokens


@dataclass
class LossGradients:
    loss: float
    images: List[List[FeatureGrad]]  # per batch item, per visual prompt
    classes: List[List[FeatureGrad]]  # per class, per textual prompt


def _tangent_cosine_grad(coeff: np.ndarray, us: np.ndarray, vs: np.ndarray,
                         cos: np.ndarray) -> np.ndarray:
    """d(sum coeff_ij * cos(u_i, v_j))/du for unit rows us, vs."""
    return coeff @ vs - ((coeff * cos).sum(axis=1))[:, None] * us


def _image_grads(image: PromptSet, bank: ClassBank, cfg: AlignConfig, label: int,
                 scale: float):
    """Loss and gradients for one (image, label) pair.

    scale multiplies the per-item loss gradient (1/batch_size).
    """
    results = _solve_all(image, bank, cfg)
    d = np.array([r.distance for r in results])
    p = softmax((1.0 - d) / cfg.tau)
    loss = -float(np.log(p[label]))

    img_grads = [FeatureGrad.zeros_like(f) for f in image.prompts]
    cls_grads = [[FeatureGrad.zeros_like(f) for f in c.prompts] for c in bank.classes]

    z = image.globals  # (M, d)
    c_cos = cfg.cosine_weight
    for k, res in enumerate(results):
        # dL/dd_k for this item: softmax backprop through logits (1-d)/tau
        w = scale * ((1.0 if k == label else 0.0) - p[k]) / cfg.tau
        if w == 0.0:
            continue
        if not res.prompt_plan.converged:
            raise ValueError(
                f"gradient requires converged plan (class {k}, violation "
                f"{res.prompt_plan.marginal_violation:.3e})")
        # dL/dC = w * T, but entries clamped to zero in the combined
        # cost are flat spots: nothing propagates to their inputs
        t = res.prompt_plan.matrix * (res.cost > 0.0)
        h = bank.classes[k].globals  # (N, d)

        # cosine term of the prompt-level cost
        a = -c_cos * w * t  # grad w.r.t. cos(z_m, h_n)
        gz = _tangent_cosine_grad(a, z, h, res.cosine)
        gh = _tangent_cosine_grad(a.T, h, z, res.cosine.T)
        for m in range(len(image)):
            img_grads[m].global_ += gz[m]
        for n in range(len(bank.classes[k])):
            cls_grads[k][n].global_ += gh[n]

        # token term: dL/d token_dist_mn = w * T_mn * beta
        if cfg.beta != 0.0:
            for m, vp in enumerate(image.prompts):
                for n, tp in enumerate(bank.classes[k].prompts):
                    plan = res.token_plans[m][n]
                    if not plan.converged:
                        raise ValueError(
                            f"gradient requires converged plan (token OT {m},{n} of "
                            f"class {k}, violation {plan.marginal_violation:.3e})")
                    coef = -w * t[m, n] * cfg.beta  # grad w.r.t. token cosines
                    wt = coef * plan.matrix  # (J, L)
                    cos_tok = vp.tokens @ tp.tokens.T
                    img_grads[m].tokens += _tangent_cosine_grad(wt, vp.tokens, tp.tokens, cos_tok)
                    cls_grads[k][n].tokens += _tangent_cosine_grad(wt.T, tp.tokens, vp.tokens, cos_tok.T)

    return loss, img_grads, cls_grads


def loss_gradients(batch: Sequence[Tuple[PromptSet, int]], bank: ClassBank,
                   cfg: AlignConfig) -> LossGradients:
    """Gradients of cross_entropy_loss w.r.t. every global vector and
    token matrix on both sides."""
    if not batch:
        raise ValueError("empty batch")
    for _, label in batch:
        if not 0 <= label < len(bank):
            raise ValueError(f"label {label} out of range for {len(bank)} classes")
    scale = 1.0 / len(batch)
    per_item = _ordered_map(
        lambda pair: _image_grads(pair[0], bank, cfg, pair[1], scale), list(batch))

    total = 0.0
    images: List[List[FeatureGrad]] = []
    classes = [[FeatureGrad.zeros_like(f) for f in c.prompts] for c in bank.classes]
    for loss, img_g, cls_g in per_item:
        total += loss * scale
        images.append(img_g)
        for k in range(len(bank)):
            for n in range(len(cls_g[k])):
                classes[k][n].add(cls_g[k][n])
    return LossGradients(total, images, classes)
