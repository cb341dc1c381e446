"""Multimodal convolutional networks for matching images and sentences."""
from .data import PAD, UNK, PairDataset, Vocabulary, encode_sentence, load_dataset, make_toy_dataset
from .errors import (ConfigError, DataFormatError, IntegrityError, MCNNError, NumericError, ShapeError,
                     UsageError)
from .evaluation import (RetrievalReport, ScoreMatrix, bidirectional_reports, build_score_matrix,
                         compute_report, probe_reshuffle, rank_of_best_truth)
from .model import (VARIANTS, ArchitectureConfig, MatchModel, build_model, score_batch, score_ensemble,
                    score_pair, shape_plan)
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint, train_epoch

__version__ = "0.1.0"

__all__ = [
    "PAD", "UNK", "PairDataset", "Vocabulary", "encode_sentence", "load_dataset", "make_toy_dataset",
    "ConfigError", "DataFormatError", "IntegrityError", "MCNNError", "NumericError", "ShapeError",
    "UsageError",
    "RetrievalReport", "ScoreMatrix", "bidirectional_reports", "build_score_matrix", "compute_report",
    "probe_reshuffle", "rank_of_best_truth",
    "VARIANTS", "ArchitectureConfig", "MatchModel", "build_model", "score_batch", "score_ensemble",
    "score_pair", "shape_plan",
    "TrainConfig", "fit", "load_checkpoint", "save_checkpoint", "train_epoch",
]
