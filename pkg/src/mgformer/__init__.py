"""Masked linear graph attention for collaborative filtering."""

from .attention import (
    AttentionInputs,
    ZeroDenominatorError,
    adjacency_masked_attention,
    dense_oracle,
    masked_linear_attention,
    sine_mask,
)
from .config import ConfigError, RunConfig
from .estimator import MGFormerRecommender
from .evaluation import EvalReport, evaluate, rank_items, recall_ndcg_at_k
from .features import FeatureMap, KernelFeatureMap, build_feature_map, build_simrf_map
from .graph import (
    GraphFormatError,
    InteractionGraph,
    PopularityBuckets,
    bucket_items,
    load_interactions,
    split_edges,
)
from .spectral import StructuralEncoder, StructuralEncodings, truncated_svd
from .training import MGFormerModel, ModelParams, TrainingDiverged, directau_loss, train

__version__ = "0.1.0"
