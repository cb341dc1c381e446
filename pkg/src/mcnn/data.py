"""Captions, vocabularies, word vectors, image features and toy datasets.

On-disk layout of a dataset directory::

    images.json   {"dim": int, "count": int, "ids": [...]}
    images.bin    count x dim little-endian float32, row-major
    captions.tsv  "<image_id>\\t<token token ...>" per line
    splits.json   {"train": [...], "val": [...], "test": [...]}
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataFormatError, IntegrityError, UsageError

logger = logging.getLogger(__name__)

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
MAX_LEN = 30


class TruncationWarning(UserWarning):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Token to index map with PAD at 0 and UNK at 1."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self.stoi: dict[str, int] = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]]) -> "Vocabulary":
        """Vocabulary in first-seen order over ``token_lists``."""
        vocab = cls()
        for tokens in token_lists:
            for t in tokens:
                vocab.add(t)
        return vocab

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class EncodedSentence:
    indices: np.ndarray
    live_length: int

    def tokens(self, vocab: Vocabulary) -> list[str]:
        return [vocab.itos[i] for i in self.indices[:self.live_length]]


def encode_sentence(tokens: Sequence[str], vocab: Vocabulary, max_len: int = MAX_LEN) -> EncodedSentence:
    if len(tokens) == 0:
        raise DataFormatError("empty sentence")
    if len(tokens) > max_len:
        warnings.warn(f"sentence of {len(tokens)} tokens truncated to {max_len}",
                      TruncationWarning, stacklevel=2)
        tokens = tokens[:max_len]
    indices = np.full(max_len, PAD, dtype=np.int64)
    indices[:len(tokens)] = [vocab.index(t) for t in tokens]
    return EncodedSentence(indices, len(tokens))


# ---------------------------------------------------------------------------
# word vectors

@dataclass
class EmbeddingTable:
    table: np.ndarray
    covered: int = 0
    uncovered: int = 0

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @property
    def coverage(self) -> float:
        total = self.covered + self.uncovered
        return self.covered / total if total else 0.0


def random_embeddings(size: int, dim: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    # a lookup is a map from a one-hot input, hence fan_in = 1
    limit = math.sqrt(6.0 / (1 + dim))
    table = rng.uniform(-limit, limit, size=(size, dim)).astype(dtype)
    table[PAD] = 0
    return table


def load_embeddings(path, vocab: Vocabulary, rng: np.random.Generator | None = None,
                    dim: int | None = None) -> EmbeddingTable:
    """Read a word2vec-style text file and align it with ``vocab``.

    Tokens missing from the file keep a random row and count as uncovered.
    PAD and UNK are excluded from the coverage counts.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if not line.strip():
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                header_dim = int(parts[1])
                if dim is not None and header_dim != dim:
                    raise DataFormatError(f"line 1: header dim {header_dim} != expected {dim}")
                dim = header_dim
                continue
            token, raw = parts[0], parts[1:]
            try:
                vec = np.array([float(v) for v in raw], dtype=np.float32)
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: cannot parse floats ({exc})") from None
            if dim is None:
                dim = vec.size
            if vec.size != dim or vec.size == 0:
                raise DataFormatError(f"line {lineno}: expected {dim} values, got {vec.size}")
            vectors[token] = vec
    if dim is None:
        raise DataFormatError(f"{path}: no vectors found")

    table = random_embeddings(len(vocab), dim, rng)
    covered = uncovered = 0
    for i, token in enumerate(vocab.itos):
        if i in (PAD, UNK):
            continue
        if token in vectors:
            table[i] = vectors[token]
            covered += 1
        else:
            uncovered += 1
    if UNK_TOKEN in vectors:
        table[UNK] = vectors[UNK_TOKEN]
    table[PAD] = 0
    logger.info("embeddings: %d covered, %d uncovered", covered, uncovered)
    return EmbeddingTable(table, covered, uncovered)


def write_embeddings(path, tokens: Sequence[str], table: np.ndarray, header: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"{len(tokens)} {table.shape[1]}\n")
        for tok, row in zip(tokens, table):
            fh.write(tok + " " + " ".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# image features

@dataclass(frozen=True)
class ImageFeature:
    id: str
    vector: np.ndarray


def _feature_paths(manifest_path) -> tuple[Path, Path]:
    manifest = Path(manifest_path)
    return manifest, manifest.with_suffix(".bin")


def write_image_features(manifest_path, features: Sequence[ImageFeature], extra: dict | None = None) -> None:
    manifest, blob = _feature_paths(manifest_path)
    if not features:
        raise UsageError("no image features to write")
    dim = features[0].vector.shape[0]
    mat = np.stack([np.asarray(f.vector, dtype="<f4") for f in features])
    if mat.shape[1] != dim:
        raise DataFormatError("image features of unequal length")
    meta = {"dim": dim, "count": len(features), "ids": [f.id for f in features]}
    meta.update(extra or {})
    manifest.write_text(json.dumps(meta), encoding="utf-8")
    blob.write_bytes(mat.astype("<f4").tobytes(order="C"))


def load_image_features(manifest_path) -> list[ImageFeature]:
    manifest, blob = _feature_paths(manifest_path)
    try:
        meta = json.loads(manifest.read_text(encoding="utf-8"))
        dim, count, ids = int(meta["dim"]), int(meta["count"]), list(meta["ids"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{manifest}: bad manifest ({exc})") from None
    if len(ids) != count:
        raise DataFormatError(f"{manifest}: {len(ids)} ids for count {count}")
    raw = blob.read_bytes()
    if len(raw) != count * dim * 4:
        raise IntegrityError(f"{blob}: {len(raw)} bytes, expected {count}*{dim}*4 = {count * dim * 4}")
    mat = np.frombuffer(raw, dtype="<f4").reshape(count, dim).astype(np.float32)
    bad = ~np.isfinite(mat).all(axis=1)
    if bad.any():
        raise DataFormatError(f"{blob}: non-finite value in row {int(np.flatnonzero(bad)[0])}")
    return [ImageFeature(i, mat[r]) for r, i in enumerate(ids)]


# ---------------------------------------------------------------------------
# captions and splits

def write_captions(path, captions: Sequence[tuple[str, Sequence[str]]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for image_id, tokens in captions:
            fh.write(f"{image_id}\t{' '.join(tokens)}\n")


def read_captions(path) -> list[tuple[str, list[str]]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataFormatError(f"{path}:{lineno}: missing tab separator")
            image_id, text = line.split("\t", 1)
            out.append((image_id, tokenize(text)))
    return out


def write_splits(path, splits: dict[str, list[str]]) -> None:
    Path(path).write_text(json.dumps({k: list(splits[k]) for k in ("train", "val", "test")}),
                          encoding="utf-8")


def read_splits(path) -> dict[str, list[str]]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        splits = {k: list(data[k]) for k in ("train", "val", "test")}
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing split {exc}") from None
    seen: set[str] = set()
    for k, ids in splits.items():
        if seen & set(ids):
            raise DataFormatError(f"{path}: split {k!r} overlaps another split")
        seen |= set(ids)
    return splits


# ---------------------------------------------------------------------------
# in-memory dataset

@dataclass
class PairDataset:
    images: list[ImageFeature]
    captions: list[tuple[str, list[str]]]
    splits: dict[str, list[str]]
    vocab: Vocabulary
    sentences: list[tuple[str, EncodedSentence]] = field(default_factory=list)
    max_len: int = MAX_LEN
    truncated: int = 0
    concepts: dict[str, list[int]] | None = None

    def __post_init__(self):
        self._by_id = {f.id: r for r, f in enumerate(self.images)}
        for image_id, _ in self.captions:
            if image_id not in self._by_id:
                raise DataFormatError(f"caption refers to unknown image {image_id!r}")
        if not self.sentences:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", TruncationWarning)
                self.sentences = [(i, encode_sentence(t, self.vocab, self.max_len))
                                  for i, t in self.captions]
            self.truncated = sum(issubclass(w.category, TruncationWarning) for w in caught)
            if self.truncated:
                logger.warning("%d captions truncated to %d tokens", self.truncated, self.max_len)

    @property
    def feature_dim(self) -> int:
        return self.images[0].vector.shape[0]

    def image(self, image_id: str) -> ImageFeature:
        return self.images[self._by_id[image_id]]

    def has_image(self, image_id: str) -> bool:
        return image_id in self._by_id

    def view(self, split: str) -> "SplitView":
        ids = self.splits[split]
        wanted = set(ids)
        feats = np.stack([self.image(i).vector for i in ids]) if ids else np.zeros((0, 0), np.float32)
        pos = {i: r for r, i in enumerate(ids)}
        sent_rows = [k for k, (i, _) in enumerate(self.sentences) if i in wanted]
        indices = np.stack([self.sentences[k][1].indices for k in sent_rows]) if sent_rows else \
            np.zeros((0, self.max_len), np.int64)
        owner = np.array([pos[self.sentences[k][0]] for k in sent_rows], dtype=np.int64)
        return SplitView(list(ids), feats, indices, owner, sent_rows)


@dataclass
class SplitView:
    """Array view of one split.

    ``owner[j]`` is the row in ``features`` of the image that sentence ``j``
    describes.
    """

    image_ids: list[str]
    features: np.ndarray
    sentences: np.ndarray
    owner: np.ndarray
    sentence_rows: list[int]

    @property
    def n_pairs(self) -> int:
        return len(self.owner)


def load_dataset(directory, max_len: int = MAX_LEN, vocab: Vocabulary | None = None) -> PairDataset:
    """Load a dataset directory; the vocabulary comes from train captions only."""
    directory = Path(directory)
    images = load_image_features(directory / "images.json")
    captions = read_captions(directory / "captions.tsv")
    splits = read_splits(directory / "splits.json")
    known = {f.id for f in images}
    for k, ids in splits.items():
        missing = [i for i in ids if i not in known]
        if missing:
            raise DataFormatError(f"split {k!r} lists unknown image ids, e.g. {missing[:3]}")
    if vocab is None:
        train = set(splits["train"])
        vocab = Vocabulary.build(t for i, t in captions if i in train)
    # toy datasets record their latent concepts in the manifest
    meta = json.loads((directory / "images.json").read_text(encoding="utf-8"))
    concepts = meta.get("concepts")
    return PairDataset(images, captions, splits, vocab, max_len=max_len, concepts=concepts)


# ---------------------------------------------------------------------------
# synthetic data

FILLERS = ("a", "the", "and", "with", "near", "on", "in", "of", "is", "at")
CONNECTORS = ("and", "with", "near", "on", "in")
DETERMINERS = ("a", "the")


def split_sizes(n: int, ratios=(0.7, 0.15, 0.15)) -> tuple[int, int, int]:
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    return n - n_val - n_test, n_val, n_test


def make_toy_dataset(out_dir, n_images: int, concepts: int, feature_dim: int = 64,
                     vocab_size: int = 60, captions_per_image: int = 1, seed: int = 0,
                     split=(0.7, 0.15, 0.15), noise: float = 0.1) -> PairDataset:
    """Write a synthetic paired dataset and return it loaded.

    Each concept owns a pool of modifier words and a pool of head words;
    pools are disjoint across concepts.  An image carries 1-3 concepts and its
    feature is the sum of their Gaussian prototypes plus ``noise``.  A caption
    names every concept as ``[det] modifier head`` in random concept order,
    joined by connector words.

    ``split`` is either three ratios or three integer counts.
    """
    if concepts < 2:
        raise ValueError("need at least two concepts")
    if n_images < concepts:
        raise ValueError("need at least as many images as concepts")
    n_content = vocab_size - len(FILLERS)
    per_pool = n_content // (2 * concepts)
    if per_pool < 1:
        raise ValueError(
            f"vocab_size {vocab_size} too small: {len(FILLERS)} fillers + 2*{concepts} pools need "
            f"at least {len(FILLERS) + 2 * concepts}"
        )
    if all(isinstance(s, int) for s in split):
        sizes = tuple(int(s) for s in split)
        if sum(sizes) != n_images:
            raise ValueError(f"split counts {sizes} do not sum to {n_images}")
    else:
        sizes = split_sizes(n_images, split)

    rng = np.random.default_rng(seed)
    words = [f"w{i:03d}" for i in range(n_content)]
    modifiers = [words[(2 * c) * per_pool:(2 * c + 1) * per_pool] for c in range(concepts)]
    heads = [words[(2 * c + 1) * per_pool:(2 * c + 2) * per_pool] for c in range(concepts)]
    prototypes = rng.normal(0.0, 1.0, size=(concepts, feature_dim))

    # first pass guarantees every concept appears at least once
    image_concepts: list[list[int]] = []
    for r in range(n_images):
        k = int(rng.integers(1, 4))
        chosen = rng.choice(concepts, size=k, replace=False).tolist()
        if r < concepts and r not in chosen:
            chosen[0] = r
        image_concepts.append(sorted(set(chosen)))

    ids = [f"img{r:05d}" for r in range(n_images)]
    features = []
    captions = []
    for r, cs in enumerate(image_concepts):
        vec = prototypes[cs].sum(axis=0) + rng.normal(0.0, noise, size=feature_dim)
        features.append(ImageFeature(ids[r], vec.astype(np.float32)))
        for _ in range(captions_per_image):
            order = rng.permutation(cs).tolist()
            tokens: list[str] = []
            for j, c in enumerate(order):
                if j:
                    tokens.append(CONNECTORS[int(rng.integers(len(CONNECTORS)))])
                tokens.append(DETERMINERS[int(rng.integers(len(DETERMINERS)))])
                tokens.append(modifiers[c][int(rng.integers(per_pool))])
                tokens.append(heads[c][int(rng.integers(per_pool))])
            captions.append((ids[r], tokens))

    perm = rng.permutation(n_images)
    n_train, n_val, _ = sizes
    splits = {
        "train": [ids[i] for i in sorted(perm[:n_train])],
        "val": [ids[i] for i in sorted(perm[n_train:n_train + n_val])],
        "test": [ids[i] for i in sorted(perm[n_train + n_val:])],
    }

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_image_features(out / "images.json", features, {"concepts": dict(zip(ids, image_concepts))})
    write_captions(out / "captions.tsv", captions)
    write_splits(out / "splits.json", splits)
    return load_dataset(out)
