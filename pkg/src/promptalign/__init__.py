"""Hierarchical optimal-transport prompt alignment toolkit.

Entropic Sinkhorn OT at two nested levels (tokens within prompts,
prompts within sets), an OT-distance softmax classifier, and a small
SGD trainer that learns prompt vectors through the whole pipeline.
"""

from .alignment import (AlignConfig, HierarchicalResult, PromptFeature, PromptSet,
                        hierarchical_distance, prompt_cost, token_cost,
                        token_ot_distance)
from .classifier import (ClassBank, FeatureGrad, LossGradients, Prediction, classify,
                         cross_entropy_loss, loss_gradients)
from .numerics import cosine_similarity, row_normalize_l2, softmax
from .ot import (DiscreteMeasure, SinkhornDivergence, SinkhornResult, SinkhornSettings,
                 TransportPlan, exact_ot_uniform, ot_cost_gradient, sinkhorn,
                 sinkhorn_batched)
from .trainer import (PromptParams, SyntheticTask, TaskSpec, ToyEncoder, TrainConfig,
                      ablate_beta, encode, generate_task, init_params, train)

__version__ = "0.1.0"
