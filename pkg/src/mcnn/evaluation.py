"""Bidirectional retrieval metrics and the word-reshuffle probe."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import EncodedSentence, PAD
from .errors import UsageError
from .model import MatchModel, score_batch

KS = (1, 5, 10)


@dataclass
class ScoreMatrix:
    """Scores of every query (row) against every candidate (column)."""

    values: np.ndarray
    ground_truth: list[np.ndarray]
    row_ids: list = field(default_factory=list)
    col_ids: list = field(default_factory=list)

    def __post_init__(self):
        n_q, n_c = self.values.shape
        if len(self.ground_truth) != n_q:
            raise UsageError(f"{len(self.ground_truth)} truth sets for {n_q} queries")
        for q, truth in enumerate(self.ground_truth):
            if len(truth) == 0 or np.any((truth < 0) | (truth >= n_c)):
                raise UsageError(f"query {q} has no ground-truth candidate among the columns")
        if not self.row_ids:
            self.row_ids = list(range(n_q))
        if not self.col_ids:
            self.col_ids = list(range(n_c))

    @classmethod
    def from_owner(cls, values: np.ndarray, owner: np.ndarray, row_ids=None, col_ids=None) -> "ScoreMatrix":
        """Image-by-sentence matrix where sentence ``j`` belongs to image ``owner[j]``."""
        truth = [np.flatnonzero(owner == i) for i in range(values.shape[0])]
        return cls(values, truth, list(row_ids or []), list(col_ids or []))

    def transposed(self) -> "ScoreMatrix":
        """Swap queries and candidates (sentence retrieval <-> image retrieval)."""
        truth: list[list[int]] = [[] for _ in range(self.values.shape[1])]
        for q, cands in enumerate(self.ground_truth):
            for c in cands:
                truth[c].append(q)
        return ScoreMatrix(self.values.T.copy(), [np.asarray(t, dtype=np.int64) for t in truth],
                           list(self.col_ids), list(self.row_ids))


def score_all_pairs(model: MatchModel, features: np.ndarray, sentences: np.ndarray,
                    chunk: int = 4096) -> np.ndarray:
    """Eval-mode scores for every image row against every sentence row."""
    n_img, n_sent = len(features), len(sentences)
    out = np.empty(n_img * n_sent, dtype=model.dtype)
    img_idx = np.repeat(np.arange(n_img), n_sent)
    sent_idx = np.tile(np.arange(n_sent), n_img)
    for start in range(0, n_img * n_sent, chunk):
        sl = slice(start, start + chunk)
        out[sl] = score_batch(model, features[img_idx[sl]], sentences[sent_idx[sl]]).value
    return out.reshape(n_img, n_sent)


def build_score_matrix(models: Sequence[MatchModel], features: np.ndarray, sentences: np.ndarray,
                       owner: np.ndarray, ensemble: bool = False, row_ids=None,
                       col_ids=None) -> ScoreMatrix:
    """Image-by-sentence score matrix; with ``ensemble`` member matrices are
    summed elementwise in member order (float64)."""
    if not models:
        raise UsageError("no models given")
    if len(models) > 1 and not ensemble:
        raise UsageError("several models given without ensemble=True")
    total = None
    for m in models:
        s = score_all_pairs(m, features, sentences).astype(np.float64)
        total = s if total is None else total + s
    return ScoreMatrix.from_owner(total, np.asarray(owner), row_ids, col_ids)


def rank_of_best_truth(score_row: np.ndarray, truth) -> int:
    """1-based rank of the best-placed ground-truth candidate.

    Candidates are ordered by descending score; equal scores are ordered by
    ascending candidate index.
    """
    score_row = np.asarray(score_row)
    truth = np.atleast_1d(np.asarray(truth, dtype=np.int64))
    if truth.size == 0 or np.any((truth < 0) | (truth >= score_row.size)):
        raise UsageError("ground truth is empty or not among the candidates")
    idx = np.arange(score_row.size)
    best = score_row.size + 1
    for t in truth:
        s = score_row[t]
        rank = 1 + int(np.count_nonzero(score_row > s)) + int(np.count_nonzero((score_row == s) & (idx < t)))
        best = min(best, rank)
    return best


@dataclass
class RetrievalReport:
    direction: str
    r_at: dict[int, float]
    med_r: float
    n_queries: int
    ranks: np.ndarray = field(repr=False, default=None)
    tie_break: str = "index"

    def to_json(self, checkpoint=None, ensemble: bool = False) -> dict:
        return {
            "direction": self.direction,
            "r_at_1": self.r_at[1],
            "r_at_5": self.r_at[5],
            "r_at_10": self.r_at[10],
            "med_r": self.med_r,
            "n_queries": self.n_queries,
            "tie_break": self.tie_break,
            "checkpoint": checkpoint,
            "ensemble": ensemble,
        }

    def write(self, path, checkpoint=None, ensemble: bool = False, ranks_csv=None) -> None:
        Path(path).write_text(json.dumps(self.to_json(checkpoint, ensemble), indent=2) + "\n",
                              encoding="utf-8")
        if ranks_csv is not None:
            with open(ranks_csv, "w", encoding="utf-8") as fh:
                fh.write("query,rank\n")
                for q, r in enumerate(self.ranks):
                    fh.write(f"{q},{int(r)}\n")


def compute_report(matrix: ScoreMatrix, direction: str = "sentence_retrieval") -> RetrievalReport:
    ranks = np.array([rank_of_best_truth(row, truth)
                      for row, truth in zip(matrix.values, matrix.ground_truth)])
    r_at = {k: float(np.mean(ranks <= k)) for k in KS}
    return RetrievalReport(direction, r_at, float(np.median(ranks)), len(ranks), ranks)


def bidirectional_reports(matrix: ScoreMatrix) -> tuple[RetrievalReport, RetrievalReport]:
    """Reports for an image-by-sentence matrix: images query sentences, and back."""
    return (compute_report(matrix, "sentence_retrieval"),
            compute_report(matrix.transposed(), "image_retrieval"))


# ---------------------------------------------------------------------------
# word-order probe

@dataclass
class ProbeRow:
    image_id: str
    original: list[str]
    original_scores: np.ndarray
    shuffled: list[list[str]]
    shuffled_scores: np.ndarray

    @property
    def original_total(self) -> float:
        return float(self.original_scores.sum())

    @property
    def shuffled_totals(self) -> np.ndarray:
        return self.shuffled_scores.sum(axis=1)


@dataclass
class ProbeReport:
    variants: list[str]
    rows: list[ProbeRow]
    skipped: list[tuple[str, str]]
    n_shuffles: int
    seed: int

    def _fraction(self, reducer, member: int | None = None) -> float:
        if not self.rows:
            return float("nan")
        wins = []
        for r in self.rows:
            orig = r.original_total if member is None else r.original_scores[member]
            shuf = r.shuffled_totals if member is None else r.shuffled_scores[:, member]
            wins.append(orig > reducer(shuf))
        return float(np.mean(wins))

    @property
    def beats_mean(self) -> float:
        """Fraction of pairs whose natural order beats the mean reshuffle."""
        return self._fraction(np.mean)

    @property
    def beats_max(self) -> float:
        return self._fraction(np.max)

    def per_variant_beats_mean(self) -> dict[str, float]:
        return {v: self._fraction(np.mean, i) for i, v in enumerate(self.variants)}

    def to_json(self) -> dict:
        return {
            "variants": self.variants,
            "n_shuffles": self.n_shuffles,
            "seed": self.seed,
            "n_pairs": len(self.rows),
            "beats_mean": self.beats_mean,
            "beats_max": self.beats_max,
            "per_variant_beats_mean": self.per_variant_beats_mean(),
            "skipped": [{"image_id": i, "reason": why} for i, why in self.skipped],
            "rows": [
                {"image_id": r.image_id,
                 "sentences": [" ".join(r.original)] + [" ".join(s) for s in r.shuffled],
                 "scores": [r.original_scores.tolist()] + r.shuffled_scores.tolist()}
                for r in self.rows
            ],
        }

    def table(self) -> str:
        """Plain-text table: one natural sentence then its reshuffles per image."""
        head = ["image", "sentence"] + self.variants
        lines = ["\t".join(head)]
        for r in self.rows:
            sents = [r.original] + r.shuffled
            scores = [r.original_scores] + list(r.shuffled_scores)
            for j, (s, sc) in enumerate(zip(sents, scores)):
                label = r.image_id if j == 0 else ""
                mark = "*" if j == 0 else " "
                lines.append("\t".join([label, mark + " ".join(s)] + [f"{x:.2f}" for x in sc]))
        return "\n".join(lines)


def probe_reshuffle(models: Sequence[MatchModel], pairs: Sequence[tuple[str, np.ndarray, EncodedSentence]],
                    n_shuffles: int = 3, seed: int = 0) -> ProbeReport:
    """Score each natural sentence against random reorderings of its words.

    ``pairs`` holds ``(image_id, image_vector, sentence)``.  Only live tokens
    are permuted; padding stays in place.
    """
    if n_shuffles < 1:
        raise UsageError("n_shuffles must be at least 1")
    if not models:
        raise UsageError("no models given")
    rng = np.random.default_rng(seed)
    vocab = models[0].vocab
    rows, skipped = [], []
    for image_id, vector, sent in pairs:
        n = sent.live_length
        if n < 2:
            skipped.append((image_id, "live_length < 2; every permutation is the identity"))
            continue
        variants = [sent.indices]
        for _ in range(n_shuffles):
            idx = sent.indices.copy()
            idx[:n] = idx[:n][rng.permutation(n)]
            variants.append(idx)
        batch = np.stack(variants)
        imgs = np.repeat(np.asarray(vector)[None], len(variants), axis=0)
        scores = np.stack([score_batch(m, imgs, batch).value.astype(np.float64) for m in models], axis=1)
        words = [[vocab.itos[i] for i in v if i != PAD] for v in variants]
        rows.append(ProbeRow(image_id, words[0], scores[0], words[1:], scores[1:]))
    return ProbeReport([m.config.variant for m in models], rows, skipped, n_shuffles, seed)
