"""The four matching networks (wd, phs, phl, st) and their ensemble.

All variants share the same skeleton: three narrow convolutions with
``k_rp = 3``, each followed by two-unit max-pooling, then a two-layer MLP that
maps the joint representation to a scalar matching score.  They differ only
in where the projected image vector enters:

=======  ==========================================================
wd       appended to every window of the first convolution
phs      appended to every window of the second convolution
phl      appended to every window of the third convolution
st       concatenated in front of the vectorized sentence map
=======  ==========================================================
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import kernel as K
from .data import PAD, EncodedSentence, ImageFeature, Vocabulary, random_embeddings
from .errors import ConfigError, ShapeError, UsageError

VARIANTS = ("wd", "phs", "phl", "st")
FUSION_POINT = {"wd": 0, "phs": 1, "phl": 2, "st": 3}


@dataclass(frozen=True)
class ArchitectureConfig:
    variant: str = "wd"
    word_dim: int = 50
    channels: tuple[int, ...] = (200, 300, 300)
    image_dim: int = 256
    mlp_hidden: int = 400
    k_rp: int = 3
    max_len: int = 30
    feature_dim: int = 4096

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 3:
            raise ConfigError("exactly three convolution layers are supported")
        for name in ("word_dim", "image_dim", "mlp_hidden", "k_rp", "max_len", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def fusion_point(self) -> int:
        """Index of the convolution that sees the image; 3 means after the stack."""
        return FUSION_POINT[self.variant]

    @property
    def layer_plan(self) -> list[tuple[str, int]]:
        plan = []
        for i, ch in enumerate(self.channels):
            plan.append(("multi-conv" if i == self.fusion_point else "conv", ch))
            plan.append(("max2", ch))
        return plan

    def with_variant(self, variant: str) -> "ArchitectureConfig":
        return replace(self, variant=variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**{k: (tuple(v) if k == "channels" else v) for k, v in d.items()})

    @classmethod
    def toy(cls, variant: str = "wd", feature_dim: int = 64) -> "ArchitectureConfig":
        """Narrow widths for desk-scale runs; keeps the 30-slot length plan."""
        return cls(variant=variant, word_dim=16, channels=(24, 32, 32), image_dim=24,
                   mlp_hidden=48, feature_dim=feature_dim)

    @classmethod
    def tiny(cls, variant: str = "wd", feature_dim: int = 10) -> "ArchitectureConfig":
        """Smallest dims used for finite-difference checks (22 is the shortest
        input that survives three conv/pool stages)."""
        return cls(variant=variant, word_dim=6, channels=(8, 12, 12), image_dim=16,
                   mlp_hidden=10, max_len=22, feature_dim=feature_dim)


@dataclass
class ShapePlan:
    layers: list[tuple[str, int, int]]
    jr_length: int
    mlp_shapes: list[tuple[int, int]]
    conv_filter_shapes: list[tuple[int, int]]
    odd_pools: list[int] = field(default_factory=list)


def shape_plan(config: ArchitectureConfig) -> ShapePlan:
    """Trace positions and channels through the stack without building it."""
    positions, channels = config.max_len, config.word_dim
    layers = [("input", positions, channels)]
    filters = []
    odd = []
    conv_index = 0
    for kind, ch in config.layer_plan:
        if kind == "max2":
            if positions < 2:
                raise ConfigError(f"cannot pool {positions} position(s) after conv{conv_index}")
            if positions % 2:
                odd.append(conv_index)
            positions //= 2
        else:
            conv_index += 1
            if positions < config.k_rp:
                raise ConfigError(
                    f"conv{conv_index} receives {positions} positions, fewer than k_rp={config.k_rp}"
                )
            width = config.k_rp * channels + (config.image_dim if kind == "multi-conv" else 0)
            filters.append((ch, width))
            positions = positions - config.k_rp + 1
            channels = ch
        layers.append((kind, positions, channels))
    jr = positions * channels + (config.image_dim if config.variant == "st" else 0)
    mlp = [(config.mlp_hidden, jr), (1, config.mlp_hidden)]
    return ShapePlan(layers, jr, mlp, filters, odd)


class MatchModel:
    """Parameters plus the configuration needed to run them."""

    def __init__(self, config: ArchitectureConfig, vocab: Vocabulary, params: K.ParamSet):
        self.config = config
        self.vocab = vocab
        self.params = params
        self.plan = shape_plan(config)
        self.metadata: dict = {}

    @property
    def dtype(self):
        return self.params["embedding"].value.dtype

    def astype(self, dtype) -> "MatchModel":
        return MatchModel(self.config, self.vocab, self.params.copy(dtype))

    def copy(self) -> "MatchModel":
        return MatchModel(self.config, self.vocab, self.params.copy())

    def __repr__(self):
        return f"MatchModel({self.config.variant}, {self.params.count()} params, {self.dtype})"


def build_model(config: ArchitectureConfig, vocab: Vocabulary, seed: int = 0,
                embeddings: np.ndarray | None = None, dtype=np.float32) -> MatchModel:
    """Fresh model: Glorot-uniform weights, zero biases, PAD row frozen at zero."""
    plan = shape_plan(config)
    rng = np.random.default_rng(seed)
    ps = K.ParamSet()
    if embeddings is not None:
        if embeddings.shape != (len(vocab), config.word_dim):
            raise ShapeError(f"embedding table {embeddings.shape} vs vocab/word_dim "
                             f"{(len(vocab), config.word_dim)}")
        table = np.array(embeddings, dtype=dtype)
        table[PAD] = 0
    else:
        table = random_embeddings(len(vocab), config.word_dim, rng, dtype)
    ps.add(K.ParamArray("embedding", table, frozen_rows=(PAD,)))
    ps.add(K.ParamArray("image.w", K.glorot_uniform(rng, config.image_dim, config.feature_dim, dtype)))
    ps.add(K.ParamArray("image.b", np.zeros(config.image_dim, dtype)))
    for i, (f, width) in enumerate(plan.conv_filter_shapes, start=1):
        ps.add(K.ParamArray(f"conv{i}.w", K.glorot_uniform(rng, f, width, dtype)))
        ps.add(K.ParamArray(f"conv{i}.b", np.zeros(f, dtype)))
    (h, jr), (one, _) = plan.mlp_shapes
    ps.add(K.ParamArray("mlp.hidden.w", K.glorot_uniform(rng, h, jr, dtype)))
    ps.add(K.ParamArray("mlp.hidden.b", np.zeros(h, dtype)))
    ps.add(K.ParamArray("mlp.score.w", K.glorot_uniform(rng, one, h, dtype)))
    ps.add(K.ParamArray("mlp.score.b", np.zeros(one, dtype)))
    return MatchModel(config, vocab, ps)


def _batch_inputs(model: MatchModel, images, sentences) -> tuple[np.ndarray, np.ndarray, bool]:
    if isinstance(images, ImageFeature):
        images = images.vector
    if isinstance(sentences, EncodedSentence):
        sentences = sentences.indices
    images = np.asarray(images, dtype=model.dtype)
    sentences = np.asarray(sentences)
    single = images.ndim == 1
    if single:
        images, sentences = images[None], sentences[None]
    cfg = model.config
    if images.ndim != 2 or images.shape[1] != cfg.feature_dim:
        raise ShapeError(f"image features {images.shape} vs expected (*, {cfg.feature_dim})")
    if sentences.ndim != 2 or sentences.shape[1] != cfg.max_len:
        raise ShapeError(f"sentences {sentences.shape} vs expected (*, {cfg.max_len})")
    if sentences.shape[0] != images.shape[0]:
        raise ShapeError(f"{images.shape[0]} images vs {sentences.shape[0]} sentences")
    return images, sentences, single


def project_image(model: MatchModel, images, tape: K.Tape | None = None) -> K.Var:
    p = model.params
    return K.affine_forward(K.Var(np.asarray(images, dtype=model.dtype), requires_grad=False),
                            p["image.w"], p["image.b"], "relu", tape)


def forward_joint(model: MatchModel, images, sentences, tape: K.Tape | None = None,
                  trace: list | None = None) -> K.Var:
    """Joint representation for a batch of (image, sentence) pairs.

    ``images`` is ``(B, feature_dim)`` and ``sentences`` is ``(B, max_len)``
    token indices; a single pair may be passed unbatched.  If ``trace`` is a
    list, every intermediate :class:`~mcnn.kernel.FeatureMap` is appended to it.
    """
    images, sentences, single = _batch_inputs(model, images, sentences)
    cfg, p = model.config, model.params
    v_im = project_image(model, images, tape)
    words = K.embedding_lookup(p["embedding"], sentences, tape)
    fmap = K.FeatureMap(words, sentences != PAD)
    if trace is not None:
        trace.append(fmap)
    for i in range(3):
        fused = v_im if i == cfg.fusion_point else None
        fmap = K.seq_conv_forward(fmap, p[f"conv{i + 1}.w"], p[f"conv{i + 1}.b"], cfg.k_rp, fused, tape)
        if trace is not None:
            trace.append(fmap)
        with warnings.catch_warnings():
            # odd lengths only arise in non-canonical configs and shape_plan reports them
            warnings.simplefilter("ignore", K.PoolingWarning)
            fmap = K.maxpool2_forward(fmap, tape)
        if trace is not None:
            trace.append(fmap)
    flat = K.flatten_positions(fmap, tape)
    jr = K.concat([v_im, flat], tape) if cfg.variant == "st" else flat
    if single:
        jr = K.reshape(jr, jr.value.shape[1:], tape)
    return jr


def score_batch(model: MatchModel, images, sentences, mode: str = "eval",
                rng: np.random.Generator | None = None, dropout_p: float = 0.1,
                tape: K.Tape | None = None) -> K.Var:
    """Matching scores, shape ``(B,)``."""
    images, sentences, _ = _batch_inputs(model, images, sentences)
    p = model.params
    jr = forward_joint(model, images, sentences, tape)
    jr = K.dropout_forward(jr, dropout_p, mode, rng, tape)
    hidden = K.affine_forward(jr, p["mlp.hidden.w"], p["mlp.hidden.b"], "relu", tape)
    score = K.affine_forward(hidden, p["mlp.score.w"], p["mlp.score.b"], "identity", tape)
    return K.reshape(score, score.value.shape[:-1], tape)


def score_pair(model: MatchModel, image, sentence, mode: str = "eval",
               rng: np.random.Generator | None = None, dropout_p: float = 0.1) -> float:
    images, sentences, single = _batch_inputs(model, image, sentence)
    if not single:
        raise UsageError("score_pair takes one image and one sentence; use score_batch")
    return float(score_batch(model, images, sentences, mode, rng, dropout_p).value[0])


def score_ensemble(models: Sequence[MatchModel], image, sentence) -> float:
    """Sum of member eval-mode scores, added in member order."""
    if not models:
        raise UsageError("ensemble needs at least one model")
    total = None
    for m in models:
        s = np.float64(score_pair(m, image, sentence))
        total = s if total is None else total + s
    return float(total)


def gradcheck_variant(variant: str, seed: int = 0, tolerance: float = 1e-5, epsilon: float = 1e-5,
                      n_pairs: int = 4) -> list[K.GradCheckResult]:
    """Finite-difference check of every parameter of a tiny float64 model.

    Biases are randomized (zero biases would hide bias-gradient bugs), one
    sentence is cut short so gating is exercised, and dropout runs in train
    mode with a mask that is redrawn identically on every forward pass.  The
    loss is a random weighted sum of scores, which avoids hinge kinks.
    """
    vocab = Vocabulary([f"t{i}" for i in range(12)])
    cfg = ArchitectureConfig.tiny(variant)
    model = build_model(cfg, vocab, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for p in model.params:
        if p.name.endswith(".b"):
            p.value[...] = rng.normal(0.0, 0.1, p.value.shape)
    images = rng.normal(size=(n_pairs, cfg.feature_dim))
    sentences = rng.integers(2, len(vocab), size=(n_pairs, cfg.max_len))
    sentences[:, 15:] = PAD
    sentences[min(1, n_pairs - 1), 5:] = PAD
    weights = rng.normal(size=n_pairs)
    mask_seed = int(rng.integers(2**31))

    def forward(tape):
        s = score_batch(model, images, sentences, mode="train",
                        rng=np.random.default_rng(mask_seed), tape=tape)
        return K.weighted_sum(s, weights, tape)

    return K.finite_diff_check(forward, model.params, epsilon=epsilon, tolerance=tolerance,
                               rng=np.random.default_rng(seed))
