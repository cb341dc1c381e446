"""Ranking-loss training, early stopping and checkpoint files.

Checkpoint layout (all integers little-endian u32, no padding)::

    b"MCNN" | version | json_len | json (utf-8)
    then per parameter: name_len | name | rank | dims... | values (f32 LE)
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernel as K
from .data import PairDataset, SplitView, Vocabulary
from .errors import DataFormatError, IntegrityError, NumericError, UsageError
from .model import ArchitectureConfig, MatchModel, build_model, score_batch

logger = logging.getLogger(__name__)

MAGIC = b"MCNN"
FORMAT_VERSION = 1
DIRECTIONS = ("image_query", "sentence_query", "both")


@dataclass
class TrainConfig:
    margin: float = 0.5
    batch_size: int = 100
    learning_rate: float = 0.01
    negatives_per_positive: int = 1
    direction: str = "both"
    dropout_p: float = 0.1
    patience: int = 10
    max_epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.margin < 0:
            raise UsageError("margin must be non-negative")
        if self.batch_size < 2:
            raise UsageError("batch_size must be at least 2 for in-batch negatives")
        if self.direction not in DIRECTIONS:
            raise UsageError(f"direction must be one of {DIRECTIONS}")
        if self.negatives_per_positive < 1:
            raise UsageError("negatives_per_positive must be at least 1")


def hinge_loss(s_pos: float, s_neg: float, margin: float) -> float:
    return max(0.0, margin - s_pos + s_neg)


def sample_negatives(batch_images: Sequence, rng: np.random.Generator, k: int = 1) -> np.ndarray:
    """Draw ``k`` in-batch negatives per positive.

    ``batch_images[n]`` identifies the image of positive pair ``n``.  A
    candidate ``m`` is eligible for ``n`` when it shows a different image, so a
    caption of the same image is never used as a negative.  Returns an
    ``(len(batch) * k, 2)`` array of ``(n, m)`` rows.
    """
    owners = np.asarray(batch_images)
    if len(np.unique(owners)) < 2:
        raise UsageError("negative sampling needs at least two distinct images in the batch")
    rows = []
    for n in range(len(owners)):
        eligible = np.flatnonzero(owners != owners[n])
        picks = rng.choice(eligible, size=k, replace=k > eligible.size)
        rows.extend((n, int(m)) for m in picks)
    return np.asarray(rows, dtype=np.int64)


@dataclass
class EpochStats:
    mean_loss: float
    active_fraction: float
    n_batches: int


def _train_view(dataset) -> SplitView:
    return dataset.view("train") if isinstance(dataset, PairDataset) else dataset


def batch_loss(model: MatchModel, features: np.ndarray, sentences: np.ndarray, owner: np.ndarray,
               config: TrainConfig, rng: np.random.Generator, tape: K.Tape | None = None,
               mode: str = "train") -> tuple[K.Var, int, int]:
    """Summed hinge terms of one mini-batch divided by its size.

    Returns ``(loss, active_terms, total_terms)``.
    """
    b = len(owner)
    k = config.negatives_per_positive
    img_rows = [np.arange(b)]
    sent_rows = [np.arange(b)]
    terms = []
    if config.direction in ("image_query", "both"):
        pairs = sample_negatives(owner, rng, k)
        terms.append((pairs[:, 0], sum(len(r) for r in img_rows)))
        img_rows.append(pairs[:, 0])
        sent_rows.append(pairs[:, 1])
    if config.direction in ("sentence_query", "both"):
        pairs = sample_negatives(owner, rng, k)
        terms.append((pairs[:, 0], sum(len(r) for r in img_rows)))
        img_rows.append(pairs[:, 1])
        sent_rows.append(pairs[:, 0])
    img_rows = np.concatenate(img_rows)
    sent_rows = np.concatenate(sent_rows)
    scores = score_batch(model, features[owner[img_rows]], sentences[sent_rows], mode, rng,
                         config.dropout_p, tape)
    hinges = []
    for pos_idx, offset in terms:
        n_neg = len(pos_idx)
        s_pos = K.take(scores, pos_idx, tape)
        s_neg = K.take(scores, np.arange(offset, offset + n_neg), tape)
        hinges.append(K.hinge(s_pos, s_neg, config.margin, tape))
    all_h = K.concat(hinges, tape) if len(hinges) > 1 else hinges[0]
    loss = K.reduce_sum(all_h, 1.0 / b, tape)
    active = int(np.count_nonzero(all_h.value > 0))
    return loss, active, all_h.value.size


def train_epoch(model: MatchModel, dataset, config: TrainConfig, rng: np.random.Generator,
                learning_rate: float | None = None) -> EpochStats:
    """One shuffled pass over the training pairs with an SGD step per batch."""
    view = _train_view(dataset)
    n = view.n_pairs
    if n == 0:
        raise UsageError("training split is empty")
    lr = config.learning_rate if learning_rate is None else learning_rate
    order = rng.permutation(n)
    n_batches = max(1, int(np.ceil(n / config.batch_size)))
    total_loss = 0.0
    active = terms = 0
    for bi, idx in enumerate(np.array_split(order, n_batches)):
        model.params.zero_grad()
        tape = K.Tape()
        loss, a, t = batch_loss(model, view.features, view.sentences[idx], view.owner[idx],
                                config, rng, tape)
        value = float(loss.value)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss in batch {bi}")
        if a:
            tape.backward(loss)
            K.sgd_step(model.params, lr)
        total_loss += value * len(idx)
        active += a
        terms += t
    return EpochStats(total_loss / n, active / terms, n_batches)


class EarlyStopping:
    """Track the best validation metric (higher is better)."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: float | None = None
        self.best_epoch = 0
        self.stale = 0

    def step(self, metric: float, epoch: int) -> tuple[bool, bool]:
        """Returns ``(improved, stop)``."""
        improved = self.best is None or metric > self.best
        if improved:
            self.best, self.best_epoch, self.stale = metric, epoch, 0
        else:
            self.stale += 1
        return improved, self.stale >= self.patience


@dataclass
class FitResult:
    model: MatchModel
    log: list[dict]
    best_epoch: int
    best_metric: float
    epochs_run: int
    stopped_early: bool = field(default=False)


def validation_metric(model: MatchModel, dataset: PairDataset) -> tuple[float, dict]:
    """Sum of R@1, R@5, R@10 over both directions on the val split."""
    from .evaluation import build_score_matrix, compute_report

    view = dataset.view("val")
    matrix = build_score_matrix([model], view.features, view.sentences, view.owner,
                                row_ids=view.image_ids)
    sr = compute_report(matrix, "sentence_retrieval")
    ir = compute_report(matrix.transposed(), "image_retrieval")
    total = sum(sr.r_at.values()) + sum(ir.r_at.values())
    summary = {
        "val_r1": (sr.r_at[1] + ir.r_at[1]) / 2,
        "val_r5": (sr.r_at[5] + ir.r_at[5]) / 2,
        "val_r10": (sr.r_at[10] + ir.r_at[10]) / 2,
        "val_medr": (sr.med_r + ir.med_r) / 2,
    }
    return total, summary


def fit(model: MatchModel, dataset: PairDataset, config: TrainConfig,
        val_metric: Callable[[MatchModel, int], tuple[float, dict]] | None = None,
        log_path=None, log_header: dict | None = None) -> FitResult:
    """Train with early stopping and return the best-on-validation model.

    The learning rate halves whenever the metric has stalled for
    ``patience // 2`` consecutive epochs.  ``val_metric(model, epoch)`` may
    replace the default retrieval metric.  ``log_header`` is written as the
    first line of the log, e.g. the resolved run configuration.
    """
    if val_metric is None:
        if not dataset.splits["val"]:
            raise UsageError("validation split is empty")
        val_metric = lambda m, _epoch: validation_metric(m, dataset)  # noqa: E731
    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate
    stopper = EarlyStopping(config.patience)
    best = model.params.copy()
    log: list[dict] = []
    halve_every = max(1, config.patience // 2)
    stopped = False
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    if log_fh and log_header is not None:
        log_fh.write(json.dumps(log_header, sort_keys=True) + "\n")
    try:
        epoch = 0
        for epoch in range(1, config.max_epochs + 1):
            stats = train_epoch(model, dataset, config, rng, lr)
            metric, summary = val_metric(model, epoch)
            record = {"epoch": epoch, "mean_loss": stats.mean_loss,
                      "active_fraction": stats.active_fraction,
                      "val_r1": summary.get("val_r1"), "val_r5": summary.get("val_r5"),
                      "val_r10": summary.get("val_r10"), "val_medr": summary.get("val_medr"),
                      "lr": lr}
            log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            logger.info("epoch %d loss %.4f active %.3f val %.4f", epoch, stats.mean_loss,
                        stats.active_fraction, metric)
            improved, stop = stopper.step(metric, epoch)
            if improved:
                best = model.params.copy()
            if stop:
                stopped = epoch < config.max_epochs
                break
            if stopper.stale and stopper.stale % halve_every == 0:
                lr *= 0.5
    finally:
        if log_fh:
            log_fh.close()
    model.params.load_values(best)
    model.metadata = {"epoch": stopper.best_epoch, "val_metric": stopper.best,
                      "train_config": asdict(config)}
    return FitResult(model, log, stopper.best_epoch, stopper.best, epoch, stopped)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: MatchModel, path, train_config: TrainConfig | None = None,
                    metadata: dict | None = None) -> None:
    meta = dict(getattr(model, "metadata", {}) or {})
    meta.update(metadata or {})
    header = {
        "architecture": model.config.to_dict(),
        "train_config": asdict(train_config) if train_config else meta.pop("train_config", None),
        "metadata": meta,
        "vocab": model.vocab.itos,
        "vocab_digest": model.vocab.digest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob]
    for p in model.params:
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)) + name)
        chunks.append(struct.pack(f"<I{p.value.ndim}I", p.value.ndim, *p.value.shape))
        chunks.append(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise IntegrityError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint_header(path) -> dict:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    return json.loads(r.take(r.u32()).decode("utf-8"))


def load_checkpoint(path) -> MatchModel:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: bad header ({exc})") from None
    config = ArchitectureConfig.from_dict(header["architecture"])
    vocab = Vocabulary(header["vocab"][2:])
    if vocab.itos != header["vocab"]:
        raise DataFormatError(f"{path}: vocabulary does not start with PAD/UNK")
    values = {}
    while r.pos < len(raw):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        values[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
    model = build_model(config, vocab, seed=0)
    if set(values) != set(model.params.names()):
        raise DataFormatError(f"{path}: parameter names {sorted(values)} do not match the architecture")
    for p in model.params:
        if values[p.name].shape != p.value.shape:
            raise DataFormatError(f"{path}: {p.name} has shape {values[p.name].shape}, expected {p.value.shape}")
        p.value[...] = values[p.name]
    model.metadata = dict(header.get("metadata") or {})
    model.metadata["train_config"] = header.get("train_config")
    model.metadata["vocab_digest"] = header.get("vocab_digest")
    return model
