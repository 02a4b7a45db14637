"""Hierarchical set-to-set distances between prompt features.

Two nested OT problems: a token-level coupling between one visual
prompt's patches and one textual prompt's tokens, and a prompt-level
coupling between an image's M prompt features and a class's N prompt
features, whose cost matrix blends global cosine distance with the
token-level OT distance.

Distances are the entropic regularized objective <T,C> - lam*h(T),
which makes the envelope gradient w.r.t. the cost exact. With a 1x1
plan the entropy vanishes, so single-prompt single-token setups reduce
exactly to the plain cosine distance.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .numerics import as_matrix, as_vector, row_normalize_l2
from .ot import DiscreteMeasure, SinkhornResult, SinkhornSettings, sinkhorn_batched

__all__ = [
    "PromptFeature",
    "PromptSet",
    "AlignConfig",
    "HierarchicalResult",
    "token_cost",
    "token_ot_distance",
    "prompt_cost",
    "hierarchical_distance",
]

# Unit-norm slack; loose enough to admit features widened from 32-bit
# files, tight enough to catch unnormalized inputs.
_NORM_TOL = 1e-5

COST_MODES = ("additive", "convex")


@dataclass(frozen=True)
class PromptFeature:
    """One prompt's output: a global feature plus its token embeddings.

    Both are kept unit-norm so 1 - cosine costs stay in [0, 2].
    """

    global_: np.ndarray  # (d,)
    tokens: np.ndarray  # (token_count, d)

    def __post_init__(self):
        g = as_vector(self.global_)
        t = as_matrix(self.tokens)
        if t.shape[0] < 1:
            raise ValueError("need at least one token")
        if t.shape[1] != g.size:
            raise ValueError(f"token dim {t.shape[1]} != global dim {g.size}")
        if abs(np.linalg.norm(g) - 1.0) > _NORM_TOL:
            raise ValueError("global feature is not unit norm")
        if np.abs(np.linalg.norm(t, axis=1) - 1.0).max() > _NORM_TOL:
            raise ValueError("token rows are not unit norm")
        object.__setattr__(self, "global_", g)
        object.__setattr__(self, "tokens", t)

    @staticmethod
    def from_raw(global_, tokens) -> "PromptFeature":
        """Normalize raw embeddings at ingestion."""
        g = as_vector(global_)
        n = np.linalg.norm(g)
        if n == 0.0:
            raise ValueError("degenerate vector: zero norm global feature")
        return PromptFeature(g / n, row_normalize_l2(tokens))

    @property
    def dim(self) -> int:
        return self.global_.size

    @property
    def token_count(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class PromptSet:
    """One side of the alignment: the M (image) or N (class) prompts."""

    prompts: Tuple[PromptFeature, ...]
    side: str  # "image" | "class"

    def __post_init__(self):
        prompts = tuple(self.prompts)
        object.__setattr__(self, "prompts", prompts)
        if not prompts:
            raise ValueError("prompt set is empty")
        if self.side not in ("image", "class"):
            raise ValueError(f"unknown side {self.side!r}")
        d = prompts[0].dim
        if any(p.dim != d for p in prompts):
            raise ValueError("prompt feature dims differ within the set")

    def __len__(self) -> int:
        return len(self.prompts)

    @property
    def dim(self) -> int:
        return self.prompts[0].dim

    @property
    def globals(self) -> np.ndarray:
        return np.stack([p.global_ for p in self.prompts])


@dataclass(frozen=True)
class AlignConfig:
    beta: float = 1.0
    tau: float = 0.01
    sinkhorn: SinkhornSettings = field(default_factory=SinkhornSettings)
    cost_mode: str = "additive"

    def __post_init__(self):
        if self.beta < 0.0:
            raise ValueError("beta must be >= 0")
        if self.cost_mode not in COST_MODES:
            raise ValueError(f"cost_mode must be one of {COST_MODES}")
        if self.cost_mode == "convex" and self.beta > 1.0:
            raise ValueError("convex mode needs beta in [0, 1]")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")

    @property
    def lam(self) -> float:
        return self.sinkhorn.lam

    @property
    def cosine_weight(self) -> float:
        return 1.0 if self.cost_mode == "additive" else 1.0 - self.beta


def _unit_rows(m: np.ndarray) -> np.ndarray:
    # Defensive renormalization; exact no-op up to rounding for
    # features built via from_raw.
    return m / np.linalg.norm(m, axis=1)[:, None]


def token_cost(visual: PromptFeature, textual: PromptFeature) -> np.ndarray:
    """Token-level cost: 1 - cosine between every patch/token pair."""
    if visual.dim != textual.dim:
        raise ValueError(f"dim mismatch: {visual.dim} vs {textual.dim}")
    sim = _unit_rows(visual.tokens) @ _unit_rows(textual.tokens).T
    return np.clip(1.0 - sim, 0.0, 2.0)


def token_ot_distance(visual: PromptFeature, textual: PromptFeature,
                      cfg: AlignConfig) -> Tuple[float, "TransportPlan"]:
    """OT distance between one prompt's patches and another's tokens."""
    res = sinkhorn_batched(
        DiscreteMeasure.uniform(visual.token_count),
        DiscreteMeasure.uniform(textual.token_count),
        token_cost(visual, textual)[None, :, :],
        cfg.sinkhorn,
    )[0]
    return res.objective, res.plan


def _token_grid(image: PromptSet, class_: PromptSet, cfg: AlignConfig):
    """Solve all M*N token-level problems, batching equal shapes."""
    m_count, n_count = len(image), len(class_)
    dists = np.zeros((m_count, n_count))
    plans: List[List[Optional[object]]] = [[None] * n_count for _ in range(m_count)]
    if cfg.beta == 0.0:
        return dists, plans

    by_shape = {}
    for m, vp in enumerate(image.prompts):
        for n, tp in enumerate(class_.prompts):
            c = token_cost(vp, tp)
            by_shape.setdefault(c.shape, []).append(((m, n), c))
    for shape, entries in by_shape.items():
        costs = np.stack([c for _, c in entries])
        results = sinkhorn_batched(DiscreteMeasure.uniform(shape[0]),
                                   DiscreteMeasure.uniform(shape[1]),
                                   costs, cfg.sinkhorn)
        for ((m, n), _), res in zip(entries, results):
            dists[m, n] = res.objective
            plans[m][n] = res.plan
    return dists, plans


def _cosine_matrix(image: PromptSet, class_: PromptSet) -> np.ndarray:
    sim = _unit_rows(image.globals) @ _unit_rows(class_.globals).T
    return np.clip(sim, -1.0, 1.0)


def _combine(cos: np.ndarray, token_dists: np.ndarray, cfg: AlignConfig) -> np.ndarray:
    c = cfg.cosine_weight * (1.0 - cos) + cfg.beta * token_dists
    # token objectives can dip below zero by at most lam*ln(J*L)
    return np.maximum(c, 0.0)


def prompt_cost(image: PromptSet, class_: PromptSet, cfg: AlignConfig) -> np.ndarray:
    """Combined M x N cost matrix over prompt pairs."""
    if image.dim != class_.dim:
        raise ValueError(f"dim mismatch: {image.dim} vs {class_.dim}")
    token_dists, _ = _token_grid(image, class_, cfg)
    return _combine(_cosine_matrix(image, class_), token_dists, cfg)


@dataclass(frozen=True)
class HierarchicalResult:
    distance: float
    prompt_plan: "TransportPlan"
    token_plans: list  # M x N nested list; None entries when beta == 0
    cost: np.ndarray  # prompt-level cost matrix
    cosine: np.ndarray  # prompt-level cosine similarities
    token_distances: np.ndarray


def hierarchical_distance(image: PromptSet, class_: PromptSet,
                          cfg: AlignConfig) -> HierarchicalResult:
    """Prompt-level OT distance between an image's and a class's prompts."""
    if image.dim != class_.dim:
        raise ValueError(f"dim mismatch: {image.dim} vs {class_.dim}")
    cos = _cosine_matrix(image, class_)
    token_dists, token_plans = _token_grid(image, class_, cfg)
    cost = _combine(cos, token_dists, cfg)
    res = sinkhorn_batched(DiscreteMeasure.uniform(len(image)),
                           DiscreteMeasure.uniform(len(class_)),
                           cost[None, :, :], cfg.sinkhorn)[0]
    return HierarchicalResult(res.objective, res.plan, token_plans,
                              cost, cos, token_dists)
