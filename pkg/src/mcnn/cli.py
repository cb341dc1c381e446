"""Command-line front end: ``mcnn <command> [flags]``.

Every command also reads ``--config FILE``, a flat ``key = value`` file with
``#`` comments.  Keys are the command's long flag names (dashes or
underscores); flags given on the command line override the file.

Exit codes: 0 success, 1 usage, 2 data/format, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import difflib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import encode_sentence, load_dataset, load_embeddings, make_toy_dataset, tokenize
from .errors import ConfigError, DataFormatError, MCNNError, NumericError, ShapeError, UsageError
from .evaluation import bidirectional_reports, build_score_matrix, probe_reshuffle
from .model import VARIANTS, ArchitectureConfig, build_model, gradcheck_variant, score_batch
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint, validation_metric

logger = logging.getLogger("mcnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MAX_ENSEMBLE = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config files

def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key.replace("_", "-")] = value
    return out


def _config_argv(parser: argparse.ArgumentParser, settings: dict[str, str]) -> list[str]:
    """Turn config entries into flags so argparse does the type conversion."""
    actions = {a.option_strings[0][2:]: a for a in parser._actions
               if a.option_strings and a.option_strings[0].startswith("--")}
    actions.pop("config", None)
    actions.pop("help", None)
    unknown = sorted(set(settings) - set(actions))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}; "
                          f"allowed: {', '.join(sorted(actions))}")
    argv: list[str] = []
    for key, value in settings.items():
        action = actions[key]
        if action.nargs == 0:
            if value.lower() in ("1", "true", "yes", "on"):
                argv.append(f"--{key}")
            elif value.lower() not in ("0", "false", "no", "off"):
                raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        elif action.nargs in ("+", "*"):
            argv += [f"--{key}", *value.split()]
        else:
            argv += [f"--{key}", value]
    return argv


def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value file; flags override it")
    if seed:
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _resolved(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}


def _emit(args, payload, text: str) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True) if args.json else text)


# ---------------------------------------------------------------------------
# commands

def _parse_split(text: str):
    parts = [s.strip() for s in text.split(",")]
    if len(parts) != 3:
        raise UsageError(f"--split needs three comma-separated values, got {text!r}")
    try:
        if all(p.isdigit() for p in parts):
            return tuple(int(p) for p in parts)
        return tuple(float(p) for p in parts)
    except ValueError:
        raise UsageError(f"--split: cannot parse {text!r}") from None


def cmd_make_toy(args) -> int:
    try:
        ds = make_toy_dataset(args.out, args.images, args.concepts, feature_dim=args.feature_dim,
                              vocab_size=args.vocab_size, captions_per_image=args.captions_per_image,
                              seed=args.seed, split=_parse_split(args.split), noise=args.noise)
    except MCNNError:
        raise
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    files = ["images.json", "images.bin", "captions.tsv", "splits.json"]
    payload = {"out": str(args.out), "files": files, "images": len(ds.images),
               "captions": len(ds.captions), "vocab": len(ds.vocab),
               "splits": {k: len(v) for k, v in ds.splits.items()}}
    _emit(args, payload, f"wrote {len(files)} files to {args.out}: " + " ".join(files))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    rows, lines, ok = [], [], True
    for v in variants:
        for seed in range(args.seed, args.seed + args.seeds):
            results = gradcheck_variant(v, seed, tolerance=args.tolerance, epsilon=args.epsilon)
            worst = max(r.max_rel_error for r in results)
            passed = all(r.passed for r in results)
            ok &= passed
            rows.append({"variant": v, "seed": seed, "passed": passed, "max_rel_error": worst,
                         "params": [asdict(r) for r in results]})
            lines.append(f"{v:<4} seed {seed:<3} {'PASS' if passed else 'FAIL'}  max rel err {worst:.2e}")
            for r in results:
                if not r.passed:
                    lines.append(f"       {r.param_name}: {r.max_rel_error:.2e} > {args.tolerance:g}")
    report = {"tolerance": args.tolerance, "epsilon": args.epsilon, "passed": ok, "runs": rows}
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    _emit(args, report, "\n".join(lines))
    return EXIT_OK if ok else EXIT_NUMERIC


PRESETS = {"canonical": ArchitectureConfig, "toy": ArchitectureConfig.toy}
ARCH_FLAGS = ("word_dim", "image_dim", "mlp_hidden", "max_len", "feature_dim")


def _architecture(args, feature_dim: int) -> ArchitectureConfig:
    base = PRESETS[args.preset](args.variant)
    over = {k: getattr(args, k) for k in ARCH_FLAGS if getattr(args, k) is not None}
    if args.channels is not None:
        try:
            over["channels"] = tuple(int(c) for c in args.channels.split(","))
        except ValueError:
            raise UsageError(f"--channels: expected comma-separated integers, got {args.channels!r}") from None
    if "feature_dim" in over and over["feature_dim"] != feature_dim:
        raise DataFormatError(f"config feature_dim={over['feature_dim']} conflicts with the data "
                              f"manifest ({feature_dim})")
    over["feature_dim"] = feature_dim
    d = base.to_dict()
    d.update(over)
    return ArchitectureConfig.from_dict(d)


def _train_config(args) -> TrainConfig:
    names = {"margin": "margin", "batch_size": "batch_size", "learning_rate": "learning_rate",
             "negatives_per_positive": "negatives", "direction": "direction",
             "dropout_p": "dropout", "patience": "patience", "max_epochs": "max_epochs"}
    kw = {field: getattr(args, flag) for field, flag in names.items() if getattr(args, flag) is not None}
    return TrainConfig(seed=args.seed, **kw)


def cmd_train(args) -> int:
    if args.variant not in VARIANTS:
        raise UsageError(f"--variant must be one of {VARIANTS}")
    max_len = args.max_len if args.max_len is not None else 30
    dataset = load_dataset(args.data, max_len=max_len)
    arch = _architecture(args, dataset.feature_dim)
    tc = _train_config(args)
    embeddings = None
    if args.embeddings:
        table = load_embeddings(args.embeddings, dataset.vocab, np.random.default_rng(args.seed))
        if table.dim != arch.word_dim:
            raise DataFormatError(f"embedding file has dim {table.dim}, config word_dim={arch.word_dim}")
        embeddings = table.table
        logger.info("embedding coverage %.3f", table.coverage)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".log.jsonl")
    raw = set(ARCH_FLAGS) | {"channels", "preset", "variant", "margin", "batch_size", "learning_rate",
                             "negatives", "direction", "dropout", "patience", "max_epochs"}
    resolved = {k: v for k, v in _resolved(args).items() if k not in raw}
    resolved.update(log=str(log_path), architecture=arch.to_dict(), train_config=asdict(tc))
    logger.info("resolved config %s", json.dumps(resolved, sort_keys=True))

    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    model = build_model(arch, dataset.vocab, seed=args.seed, embeddings=embeddings)
    result = fit(model, dataset, tc, log_path=log_path, log_header={"resolved_config": resolved})
    _, summary = validation_metric(model, dataset)
    final = {"best_epoch": result.best_epoch, "val_metric": result.best_metric,
             "epochs_run": result.epochs_run, "stopped_early": result.stopped_early, **summary}
    with open(log_path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"final": final}, sort_keys=True) + "\n")
    save_checkpoint(model, args.out, tc, {"data": str(args.data)})
    _emit(args, {"checkpoint": str(args.out), "log": str(log_path), **final},
          f"{arch.variant}: best epoch {result.best_epoch}, val R@1 {summary['val_r1']:.3f}; "
          f"wrote {args.out} and {log_path}")
    return EXIT_OK


def _load_models(paths: list[str]):
    if not 1 <= len(paths) <= MAX_ENSEMBLE:
        raise UsageError(f"expected 1-{MAX_ENSEMBLE} checkpoints, got {len(paths)}")
    models = [load_checkpoint(p) for p in paths]
    digests = {m.vocab.digest() for m in models}
    if len(digests) > 1:
        listing = ", ".join(f"{p}={m.vocab.digest()}" for p, m in zip(paths, models))
        raise DataFormatError(f"checkpoints were trained with different vocabularies: {listing}")
    if len({m.config.max_len for m in models}) > 1:
        raise DataFormatError("checkpoints disagree on max_len")
    return models


def _dataset_for(models, data_dir):
    ds = load_dataset(data_dir, max_len=models[0].config.max_len, vocab=models[0].vocab)
    for m in models:
        if m.config.feature_dim != ds.feature_dim:
            raise DataFormatError(f"checkpoint expects {m.config.feature_dim}-dim image features, "
                                  f"data has {ds.feature_dim}")
    return ds


def cmd_eval(args) -> int:
    models = _load_models(args.ckpt)
    if len(models) > 1 and not args.ensemble:
        groups = [([m], str(p)) for m, p in zip(models, args.ckpt)]
    else:
        groups = [(models, "ensemble" if args.ensemble else str(args.ckpt[0]))]
    ds = _dataset_for(models, args.data)
    if args.split not in ds.splits or not ds.splits[args.split]:
        raise UsageError(f"split {args.split!r} is missing or empty")
    view = ds.view(args.split)
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    payload, lines = [], []
    for members, tag in groups:
        matrix = build_score_matrix(members, view.features, view.sentences, view.owner,
                                    ensemble=len(members) > 1 or args.ensemble, row_ids=view.image_ids)
        ensemble = tag == "ensemble"
        ckpt = list(args.ckpt) if ensemble else tag
        stem = "ensemble" if ensemble else Path(tag).stem
        for rep in bidirectional_reports(matrix):
            payload.append(rep.to_json(ckpt, ensemble))
            lines.append(f"{stem:<12} {rep.direction:<18} R@1 {rep.r_at[1]:.3f}  R@5 {rep.r_at[5]:.3f}  "
                         f"R@10 {rep.r_at[10]:.3f}  Med r {rep.med_r:g}  (n={rep.n_queries})")
            if out_dir:
                ranks = out_dir / f"{stem}.{rep.direction}.ranks.csv" if args.ranks else None
                rep.write(out_dir / f"{stem}.{rep.direction}.json", ckpt, ensemble, ranks)
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_score(args) -> int:
    models = _load_models(args.ckpt)
    ds = _dataset_for(models, args.data)
    if not ds.has_image(args.image):
        ids = [f.id for f in ds.images]
        near = difflib.get_close_matches(args.image, ids, n=5, cutoff=0.0)
        raise UsageError(f"unknown image id {args.image!r}; nearest: {', '.join(near)}")
    tokens = tokenize(args.sentence)
    sent = encode_sentence(tokens, models[0].vocab, models[0].config.max_len)
    vec = ds.image(args.image).vector
    total = 0.0
    for m in models:
        total += float(score_batch(m, vec[None], sent.indices[None]).value[0])
    _emit(args, {"image_id": args.image, "sentence": " ".join(tokens), "score": total}, f"{total:.6f}")
    return EXIT_OK


def cmd_probe(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    models = _load_models(args.ckpt)
    ds = _dataset_for(models, args.data)
    if args.split not in ds.splits:
        raise UsageError(f"unknown split {args.split!r}")
    view = ds.view(args.split)
    pairs = []
    for j, row in enumerate(view.sentence_rows):
        r = view.owner[j]
        pairs.append((view.image_ids[r], view.features[r], ds.sentences[row][1]))
    if args.limit is not None:
        pairs = pairs[:args.limit]
    report = probe_reshuffle(models, pairs, n_shuffles=args.n, seed=args.seed)
    data = report.to_json()
    if args.out:
        Path(args.out).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    summary = (f"natural order beats mean reshuffle on {report.beats_mean:.3f} of "
               f"{len(report.rows)} pairs (beats max on {report.beats_max:.3f}); "
               f"{len(report.skipped)} skipped")
    _emit(args, data, report.table() + "\n" + summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> _Parser:
    parser = _Parser(prog="mcnn", description="Multimodal CNN image-sentence matching.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-toy", help="generate a synthetic paired dataset")
    _common(p)
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--concepts", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--vocab-size", type=int, default=60)
    p.add_argument("--captions-per-image", type=int, default=1)
    p.add_argument("--split", default="0.7,0.15,0.15", help="three ratios or three counts")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out", default="toy", help="output directory")
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("gradcheck", help="finite-difference check of every variant")
    _common(p)
    p.add_argument("--variant", choices=VARIANTS + ("all",), default="all")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds, starting at --seed")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train one variant")
    _common(p)
    p.add_argument("--variant", choices=VARIANTS, required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="JSON-lines log (default: next to the checkpoint)")
    p.add_argument("--embeddings", help="word2vec text file for initialization")
    p.add_argument("--preset", choices=sorted(PRESETS), default="canonical")
    p.add_argument("--word-dim", type=int)
    p.add_argument("--channels", help="three comma-separated conv widths")
    p.add_argument("--image-dim", type=int)
    p.add_argument("--mlp-hidden", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--negatives", type=int, help="negatives per positive")
    p.add_argument("--direction", choices=("image_query", "sentence_query", "both"))
    p.add_argument("--dropout", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="bidirectional retrieval metrics")
    _common(p, seed=False)
    p.add_argument("--ckpt", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--ensemble", action="store_true", help="sum member scores")
    p.add_argument("--out", help="directory for report files")
    p.add_argument("--ranks", action="store_true", help="also write per-query ranks")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score one image against one sentence")
    _common(p, seed=False)
    p.add_argument("--ckpt", nargs="+", required=True, help="several checkpoints are summed")
    p.add_argument("--data", required=True)
    p.add_argument("--image", required=True, help="image id")
    p.add_argument("--sentence", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("probe-reshuffle", help="natural word order vs random reshuffles")
    _common(p)
    p.add_argument("--ckpt", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--n", type=int, default=3, help="reshuffles per sentence")
    p.add_argument("--limit", type=int, help="only the first N pairs")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_probe)
    return parser


def _find_config(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config":
            if i + 1 >= len(argv):
                raise UsageError("--config needs a path")
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv: list[str]) -> argparse.Namespace:
    """Parse flags; values from ``--config`` are inserted before the command's own flags."""
    parser = build_parser()
    path = _find_config(argv)
    if path is not None:
        choices = parser._subparsers._group_actions[0].choices
        pos = next((i for i, tok in enumerate(argv) if tok in choices), None)
        if pos is None:
            raise UsageError("--config given without a command")
        extra = _config_argv(choices[argv[pos]], read_config(path))
        argv = argv[:pos + 1] + extra + argv[pos + 1:]
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        logger.info("%s %s", args.command, json.dumps(_resolved(args), sort_keys=True, default=str))
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"mcnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, ShapeError, OSError) as exc:
        print(f"mcnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"mcnn: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
