"""Toolkit for converting multi-head attention transformers into
grouped-query attention models via similarity-guided grouping search."""

__version__ = "0.1.0"

from gqakit.grouping import (HeadGrouping, SearchConfig, SearchResult,
                             asymmetric_search, brute_force_search,
                             neighbour_grouping, symmetric_search)
from gqakit.merge import ConversionReport, group_and_convert, merge_layer_heads
from gqakit.model import (Checkpoint, ModelConfig, forward, init_model,
                          load_checkpoint, save_checkpoint)
from gqakit.similarity import SimilarityMatrix, activation_similarity, similarity_matrix
from gqakit.tasks import Dataset, TaskSpec, TrainConfig, evaluate, gen_dataset, train

__all__ = [
    "HeadGrouping",
    "SearchConfig",
    "SearchResult",
    "symmetric_search",
    "asymmetric_search",
    "brute_force_search",
    "neighbour_grouping",
    "ModelConfig",
    "Checkpoint",
    "init_model",
    "forward",
    "save_checkpoint",
    "load_checkpoint",
    "SimilarityMatrix",
    "activation_similarity",
    "similarity_matrix",
    "ConversionReport",
    "group_and_convert",
    "merge_layer_heads",
    "TaskSpec",
    "Dataset",
    "TrainConfig",
    "gen_dataset",
    "train",
    "evaluate",
    "__version__",
]
