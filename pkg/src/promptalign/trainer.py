"""Desk-scale prompt training through the full hierarchical-OT pipeline.

A frozen random linear projection stands in for the encoders; the M
visual and N textual prompt token matrices are the only learnable
parameters, updated by plain SGD on the cross-entropy loss. The class
bank is re-encoded every optimization step because the textual prompts
it depends on change every step.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .alignment import AlignConfig, PromptFeature, PromptSet
from .classifier import ClassBank, classify, loss_gradients
from .numerics import as_matrix

__all__ = [
    "ToyEncoder",
    "PromptParams",
    "SyntheticTask",
    "TaskSpec",
    "TrainConfig",
    "EpochStats",
    "encode",
    "generate_task",
    "init_params",
    "train",
    "evaluate",
    "ablate_beta",
]

PROMPT_INIT_STD = 0.02


@dataclass(frozen=True)
class ToyEncoder:
    """Frozen linear map from input-token space to the shared latent space."""

    projection: np.ndarray  # (d_in, d)
    mode: str  # "image" | "text"

    def __post_init__(self):
        p = as_matrix(self.projection)
        p.setflags(write=False)
        object.__setattr__(self, "projection", p)
        if self.mode not in ("image", "text"):
            raise ValueError(f"unknown encoder mode {self.mode!r}")

    @staticmethod
    def create(d_in: int, d: int, mode: str, seed: int) -> "ToyEncoder":
        rng = np.random.default_rng(seed)
        return ToyEncoder(rng.normal(size=(d_in, d)) / np.sqrt(d_in), mode)


@dataclass
class PromptParams:
    """Learnable prompt token matrices, b rows of d_in each."""

    visual: List[np.ndarray]  # M matrices (b, d_in)
    textual: List[np.ndarray]  # N matrices (b, d_in)

    def __post_init__(self):
        if not self.visual or not self.textual:
            raise ValueError("need at least one prompt per side")
        b, d_in = self.visual[0].shape
        for p in self.visual + self.textual:
            q = as_matrix(p)
            if q.shape != (b, d_in):
                raise ValueError("all prompt matrices must share shape")

    @property
    def b(self) -> int:
        return self.visual[0].shape[0]

    def copy(self) -> "PromptParams":
        return PromptParams([p.copy() for p in self.visual],
                            [p.copy() for p in self.textual])


def init_params(m: int, n: int, b: int, d_in: int, seed: int) -> PromptParams:
    """Gaussian-initialized prompts (std 0.02), seeded."""
    rng = np.random.default_rng(seed)
    visual = [rng.normal(scale=PROMPT_INIT_STD, size=(b, d_in)) for _ in range(m)]
    textual = [rng.normal(scale=PROMPT_INIT_STD, size=(b, d_in)) for _ in range(n)]
    return PromptParams(visual, textual)


@dataclass(frozen=True)
class TaskSpec:
    k: int = 3
    shots: int = 8
    test_shots: int = 8
    o: int = 4  # patches per image
    d_in: int = 16
    cluster_spread: float = 0.05
    anchors_per_class: int = 1
    tokens_per_anchor: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("need at least two classes")
        if self.o < 1:
            raise ValueError("need at least one patch per image")
        if self.shots < 1 or self.test_shots < 1:
            raise ValueError("need at least one train and one test image per class")
        if self.anchors_per_class < 1 or self.tokens_per_anchor < 1:
            raise ValueError("anchors_per_class and tokens_per_anchor must be >= 1")
        if self.cluster_spread < 0.0:
            raise ValueError("cluster_spread must be >= 0")


@dataclass(frozen=True)
class SyntheticTask:
    spec: TaskSpec
    class_tokens: Tuple[np.ndarray, ...]  # per class: (k_l, d_in) content tokens
    train_images: Tuple[Tuple[np.ndarray, int], ...]  # (patches (O, d_in), label)
    test_images: Tuple[Tuple[np.ndarray, int], ...]

    @property
    def k(self) -> int:
        return self.spec.k


def _sample_images(rng, anchors, count, spec) -> List[Tuple[np.ndarray, int]]:
    images = []
    for label in range(spec.k):
        for _ in range(count):
            # each image draws from one of the class's anchor clusters
            a = anchors[label][rng.integers(len(anchors[label]))]
            patches = a[None, :] + rng.normal(scale=spec.cluster_spread,
                                              size=(spec.o, spec.d_in))
            images.append((patches, label))
    return images


def generate_task(spec: TaskSpec) -> SyntheticTask:
    """Few-shot classification task with per-class anchor clusters.

    With anchors_per_class > 1 each class covers several concepts, the
    desk-scale analog of multi-mode sample diversity.
    """
    rng = np.random.default_rng(spec.seed)
    anchors = []
    for _ in range(spec.k):
        a = rng.normal(size=(spec.anchors_per_class, spec.d_in))
        anchors.append(a / np.linalg.norm(a, axis=1)[:, None])

    class_tokens = []
    for label in range(spec.k):
        rows = []
        for a in anchors[label]:
            rows.append(a[None, :] + rng.normal(scale=spec.cluster_spread,
                                                size=(spec.tokens_per_anchor, spec.d_in)))
        class_tokens.append(np.concatenate(rows, axis=0))

    train = _sample_images(rng, anchors, spec.shots, spec)
    test = _sample_images(rng, anchors, spec.test_shots, spec)
    return SyntheticTask(spec, tuple(class_tokens), tuple(train), tuple(test))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0035
    epochs: int = 50
    batch_size: int = 4
    m: int = 4
    n: int = 4
    b: int = 2
    d: int = 16
    align: AlignConfig = field(default_factory=AlignConfig)
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if min(self.m, self.n, self.b, self.d) < 1:
            raise ValueError("m, n, b, d must be >= 1")


@dataclass
class _EncodeCache:
    x: np.ndarray  # (t, d_in) stacked content + prompt rows
    raw_norms: np.ndarray  # (t,)
    tokens: np.ndarray  # (t, d) unit rows
    mean_raw_norm: float
    global_: np.ndarray  # (d,) unit


def _encode_cached(enc: ToyEncoder, prompt: np.ndarray, content: np.ndarray):
    x = np.concatenate([as_matrix(content), as_matrix(prompt)], axis=0)
    if x.shape[1] != enc.projection.shape[0]:
        raise ValueError(f"input dim {x.shape[1]} != encoder dim {enc.projection.shape[0]}")
    raw = x @ enc.projection
    norms = np.linalg.norm(raw, axis=1)
    if (norms == 0.0).any():
        raise ValueError("degenerate encoder output: zero token row")
    tokens = raw / norms[:, None]
    mean = tokens.mean(axis=0)
    mean_norm = float(np.linalg.norm(mean))
    if mean_norm == 0.0:
        raise ValueError("degenerate encoder output: zero mean feature")
    g = mean / mean_norm
    feature = PromptFeature(g, tokens)
    return feature, _EncodeCache(x, norms, tokens, mean_norm, g)


def encode(enc: ToyEncoder, prompt, content) -> PromptFeature:
    """Project content + prompt rows, normalize tokens, mean-pool the global."""
    return _encode_cached(enc, prompt, content)[0]


def _encode_backprop(enc: ToyEncoder, cache: _EncodeCache, g_grad: np.ndarray,
                     tokens_grad: np.ndarray, prompt_rows: int) -> np.ndarray:
    """Gradient w.r.t. the prompt rows fed into _encode_cached."""
    t = cache.tokens.shape[0]
    # global = normalize(mean(tokens)); project onto the sphere tangent
    gg = g_grad - (g_grad @ cache.global_) * cache.global_
    total = tokens_grad + gg[None, :] / (t * cache.mean_raw_norm)
    # through per-row normalization
    raw_grad = (total - (total * cache.tokens).sum(axis=1)[:, None] * cache.tokens)
    raw_grad = raw_grad / cache.raw_norms[:, None]
    x_grad = raw_grad @ enc.projection.T
    return x_grad[-prompt_rows:, :]


def _encode_bank(task: SyntheticTask, params: PromptParams, enc: ToyEncoder):
    sets = []
    caches = []
    for k in range(task.k):
        feats, cs = zip(*[_encode_cached(enc, p, task.class_tokens[k])
                          for p in params.textual])
        sets.append(PromptSet(tuple(feats), "class"))
        caches.append(list(cs))
    names = tuple(f"class_{k}" for k in range(task.k))
    return ClassBank(tuple(sets), names), caches


def _encode_image(patches: np.ndarray, params: PromptParams, enc: ToyEncoder):
    feats, caches = zip(*[_encode_cached(enc, p, patches) for p in params.visual])
    return PromptSet(tuple(feats), "image"), list(caches)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    test_accuracy: float


def evaluate(task: SyntheticTask, params: PromptParams, enc_img: ToyEncoder,
             enc_txt: ToyEncoder, cfg: AlignConfig,
             images: Optional[Sequence[Tuple[np.ndarray, int]]] = None) -> float:
    """Classification accuracy with the current prompts."""
    bank, _ = _encode_bank(task, params, enc_txt)
    images = task.test_images if images is None else images
    hits = 0
    for patches, label in images:
        image, _ = _encode_image(patches, params, enc_img)
        if classify(image, bank, cfg).argmax == label:
            hits += 1
    return hits / len(images)


def _sgd_step(task, params, enc_img, enc_txt, cfg: TrainConfig,
              batch: Sequence[Tuple[np.ndarray, int]]) -> float:
    bank, txt_caches = _encode_bank(task, params, enc_txt)
    encoded = [_encode_image(patches, params, enc_img) for patches, _ in batch]
    labeled = [(s, label) for (s, _), (_, label) in zip(encoded, batch)]
    grads = loss_gradients(labeled, bank, cfg.align)

    b = params.b
    visual_grads = [np.zeros_like(p) for p in params.visual]
    textual_grads = [np.zeros_like(p) for p in params.textual]
    for (image_set, caches), fgrads in zip(encoded, grads.images):
        for m, (cache, fg) in enumerate(zip(caches, fgrads)):
            visual_grads[m] += _encode_backprop(enc_img, cache, fg.global_, fg.tokens, b)
    for k in range(task.k):
        for n, (cache, fg) in enumerate(zip(txt_caches[k], grads.classes[k])):
            textual_grads[n] += _encode_backprop(enc_txt, cache, fg.global_, fg.tokens, b)

    for p, g in zip(params.visual, visual_grads):
        p -= cfg.learning_rate * g
    for p, g in zip(params.textual, textual_grads):
        p -= cfg.learning_rate * g
    return grads.loss


def train(task: SyntheticTask, params: PromptParams,
          cfg: TrainConfig) -> Tuple[PromptParams, List[EpochStats]]:
    """SGD over the full pipeline; only the prompt matrices change.

    Per epoch: shuffle the training images, take batches, re-encode the
    class bank and image batch with the current prompts, backprop
    through both OT levels and the frozen encoders, update prompts.
    """
    params = params.copy()
    enc_img, enc_txt = make_encoders(task.spec.d_in, cfg.d, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    history: List[EpochStats] = []
    n_train = len(task.train_images)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_train)
        losses = []
        for start in range(0, n_train, cfg.batch_size):
            batch = [task.train_images[i] for i in order[start:start + cfg.batch_size]]
            losses.append(_sgd_step(task, params, enc_img, enc_txt, cfg, batch))
        acc = evaluate(task, params, enc_img, enc_txt, cfg.align)
        stats = EpochStats(epoch, float(np.mean(losses)), acc)
        if not np.isfinite(stats.loss):
            raise RuntimeError(f"non-finite loss at epoch {epoch}")
        history.append(stats)
    return params, history


def make_encoders(d_in: int, d: int, seed: int) -> Tuple[ToyEncoder, ToyEncoder]:
    """Image and text encoders sharing one frozen projection, so both
    modalities land in a common latent space (as with aligned
    pretrained encoders)."""
    base = ToyEncoder.create(d_in, d, "image", seed)
    return base, ToyEncoder(base.projection, "text")


def ablate_beta(task: SyntheticTask, grid: Sequence[float],
                cfg: TrainConfig) -> List[Tuple[float, float]]:
    """Train once per beta (convex cost mode, shared seed); report the
    final test accuracy for each."""
    if not list(grid):
        raise ValueError("beta grid is empty")
    rows = []
    for beta in grid:
        align = replace(cfg.align, beta=float(beta), cost_mode="convex")
        run_cfg = replace(cfg, align=align)
        params = init_params(cfg.m, cfg.n, cfg.b, task.spec.d_in, cfg.seed)
        _, history = train(task, params, run_cfg)
        rows.append((float(beta), history[-1].test_accuracy))
    return rows
