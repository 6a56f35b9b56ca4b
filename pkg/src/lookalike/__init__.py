"""Lookalike audience expansion: two-tower customer embeddings plus IVF cosine search."""

from ._kernels import BACKEND
from .ann_index import (
    EmbeddingMatrix,
    IvfIndex,
    SearchHit,
    brute_force_knn,
    build_ivf,
    kmeans,
    load_index,
    save_index,
    search,
)
from .customer_data import CustomerRecord, DataError, SynthConfig, TimeWindow
from .model import MlpParams, TrainConfig
from .pipeline import ExpansionEngine, ExpansionRequest, ExpansionResult

__version__ = "0.1.0"
