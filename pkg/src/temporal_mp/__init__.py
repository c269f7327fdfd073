"""Temporal multigraph message passing for illicit-transaction detection.

Pure numpy: a small reverse-mode autodiff engine, transaction multigraphs with
parallel-edge pair groups, two-hop neighbour sampling, GIN/PNA layers with
recency weights, training, metrics, and a synthetic data generator.
"""

__version__ = "0.1.0"

from .graph import DatasetSchema, Splits, TransactionGraph, load_dataset, load_edge_csv, temporal_split, write_dataset
from .metrics import EvalReport, evaluate, f1_min, macro_f1, pr_auc
from .model import ModelConfig, forward, init_params, logits_for
from .sampler import Fanout, sample_two_hop
from .synthgen import GenSpec, generate
from .training import Checkpoint, TrainConfig, evaluate_split, load_checkpoint, prepare, save_checkpoint, train

__all__ = [
    "Checkpoint", "DatasetSchema", "EvalReport", "Fanout", "GenSpec", "ModelConfig", "Splits", "TrainConfig",
    "TransactionGraph", "evaluate", "evaluate_split", "f1_min", "forward", "generate", "init_params",
    "load_checkpoint", "load_dataset", "load_edge_csv", "logits_for", "macro_f1", "pr_auc", "prepare",
    "sample_two_hop", "save_checkpoint", "temporal_split", "train", "write_dataset",
]
