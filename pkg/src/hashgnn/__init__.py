"""Binary hash codes for bipartite interaction graphs, trained with a guided straight-through estimator."""

from .graph import InteractionGraph, SplitDataset, load_edge_list, planted_block_graph, split_interactions
from .retrieval import CodeMatrix, EmbeddingMatrix, encode_all, recommend_all
from .trainer import TrainConfig, TrainedModel, train

__version__ = "0.1.0"

__all__ = [
    "CodeMatrix",
    "EmbeddingMatrix",
    "InteractionGraph",
    "SplitDataset",
    "TrainConfig",
    "TrainedModel",
    "encode_all",
    "load_edge_list",
    "planted_block_graph",
    "recommend_all",
    "split_interactions",
    "train",
]
