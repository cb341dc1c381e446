"""Acceptance suite.

Each test prints one ``[criterion N] PASS|FAIL ...`` line and then asserts.
Run with ``pytest tests/test_acceptance.py -v -s`` or as a script.
"""
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from mcnn.cli import main as cli_main
from mcnn.data import PAD, Vocabulary, make_toy_dataset
from mcnn.evaluation import (ScoreMatrix, bidirectional_reports, build_score_matrix, compute_report,
                             probe_reshuffle)
from mcnn.model import VARIANTS, ArchitectureConfig, build_model, forward_joint, score_batch, shape_plan
from mcnn.training import TrainConfig, fit, load_checkpoint, save_checkpoint, train_epoch

SEEDS = (0, 1, 2)
_IO = {}


@pytest.fixture(autouse=True)
def _acceptance_io(pytestconfig, capsys):
    _IO["config"], _IO["capsys"] = pytestconfig, capsys
    yield
    _IO.clear()


def report(n: int, ok: bool, detail: str) -> None:
    line = f"[criterion {n:>2}] {'PASS' if ok else 'FAIL'}  {detail}"
    _IO["config"].acceptance_lines.append(line)
    with _IO["capsys"].disabled():
        print("\n" + line)
    assert ok, line


# ---------------------------------------------------------------- 1 gradients

def test_c01_gradient_correctness(tmp_path):
    out = tmp_path / "gc.json"
    t0 = time.perf_counter()
    code = cli_main(["gradcheck", "--seeds", "10", "--tolerance", "1e-5", "--epsilon", "1e-5",
                     "--out", str(out)])
    elapsed = time.perf_counter() - t0
    data = json.loads(out.read_text())
    worst = max(r["max_rel_error"] for r in data["runs"])
    variants = sorted({r["variant"] for r in data["runs"]})
    ok = code == 0 and data["passed"] and len(data["runs"]) == 40 and elapsed < 120
    report(1, ok, f"{len(data['runs'])} runs over {variants}, worst rel err {worst:.2e} < 1e-5, "
                  f"{elapsed:.1f}s (< 120s)")


# ---------------------------------------------------------------- 2 shapes

def test_c02_shape_conformance():
    lengths = {v: [n for _, n, _ in shape_plan(ArchitectureConfig(v)).layers] for v in VARIANTS}
    jr = {v: shape_plan(ArchitectureConfig(v)).jr_length for v in VARIANTS}
    ok = all(ls == [30, 28, 14, 12, 6, 4, 2] for ls in lengths.values()) and \
        jr == {"wd": 600, "phs": 600, "phl": 600, "st": 856}
    report(2, ok, f"lengths {lengths['wd']}, jr {jr}")


# ---------------------------------------------------------------- 3 receptive field

def test_c03_receptive_field():
    vocab = Vocabulary([f"t{i}" for i in range(50)])
    rng = np.random.default_rng(0)
    worst = {2: 0, 4: 0}
    contained = True
    for v in VARIANTS:
        cfg = ArchitectureConfig(v, feature_dim=32)
        m = build_model(cfg, vocab, seed=1, dtype=np.float64)
        for p in m.params:
            if p.name.endswith(".b"):
                p.value[...] = rng.normal(0, 0.1, p.value.shape)
        base = rng.integers(2, len(vocab), size=30)
        sents = np.repeat(base[None], 31, axis=0)
        for pos in range(30):
            sents[pos + 1, pos] = 2 + (base[pos] - 2 + 1 + rng.integers(len(vocab) - 3)) % (len(vocab) - 2)
        img = rng.normal(size=(1, 32))
        # one forward pass per sentence: BLAS may round rows of a larger batch differently
        traces = []
        for row in sents:
            traces.append([])
            forward_joint(m, img, row[None], trace=traces[-1])
        for layer, span, stride in ((2, 4, 2), (4, 10, 4)):
            vals = np.concatenate([t[layer].values for t in traces])  # (31, slots, channels)
            changed = np.any(vals[1:] != vals[0], axis=2)  # (30 positions, slots)
            for slot in range(vals.shape[1]):
                who = set(np.flatnonzero(changed[:, slot]).tolist())
                worst[layer] = max(worst[layer], len(who))
                contained &= who <= set(range(stride * slot, stride * slot + span))
    ok = worst[2] <= 4 and worst[4] <= 10 and contained
    report(3, ok, f"max words per nu(2) slot {worst[2]} (<= 4), per nu(4) slot {worst[4]} (<= 10), "
                  f"all within the predicted windows: {contained}")


# ---------------------------------------------------------------- 4 gating

def test_c04_gating_invariant():
    vocab = Vocabulary([f"t{i}" for i in range(30)])
    violations = checked = 0
    for v in VARIANTS:
        cfg = ArchitectureConfig.toy(v, feature_dim=16)
        for draw in range(100):
            rng = np.random.default_rng(1000 * VARIANTS.index(v) + draw)
            m = build_model(cfg, vocab, seed=draw)
            for p in m.params:
                p.value[...] = rng.normal(0, 1, p.value.shape).astype(p.value.dtype)
                if p.name.endswith(".b"):
                    p.value[...] = np.abs(p.value) + 0.5
            m.params["embedding"].value[PAD] = 0
            n_live = int(rng.integers(1, 28))
            s = np.full((1, 30), PAD)
            s[0, :n_live] = rng.integers(2, len(vocab), size=n_live)
            trace = []
            forward_joint(m, rng.normal(size=(1, 16)), s, trace=trace)
            conv1 = trace[1]
            pad_windows = np.arange(conv1.positions) >= n_live
            checked += int(pad_windows.sum())
            violations += int(np.count_nonzero(conv1.values[0, pad_windows]))
    report(4, violations == 0 and checked > 0,
           f"{checked} all-PAD layer-1 windows over 4 variants x 100 draws, {violations} nonzero outputs")


# ---------------------------------------------------------------- 5 overfit

def test_c05_overfit(tmp_path):
    results = {}
    slowest = 0.0
    for seed in SEEDS:
        ds = make_toy_dataset(tmp_path / f"ov{seed}", 32, 32, feature_dim=64, vocab_size=200,
                              seed=seed, split=(32, 0, 0))
        view = ds.view("train")
        for v in VARIANTS:
            m = build_model(ArchitectureConfig.toy(v, 64), ds.vocab, seed)
            cfg = TrainConfig(learning_rate=0.1, batch_size=32, negatives_per_positive=3, seed=seed)
            rng = np.random.default_rng(seed)
            t0 = time.perf_counter()
            done = None
            for epoch in range(1, 501):
                train_epoch(m, ds, cfg, rng)
                if epoch % 5 == 0:
                    sr, ir = bidirectional_reports(build_score_matrix([m], view.features, view.sentences,
                                                                      view.owner))
                    if sr.r_at[1] == 1.0 and ir.r_at[1] == 1.0:
                        done = epoch
                        break
            slowest = max(slowest, time.perf_counter() - t0)
            results[(v, seed)] = done
    per_variant = {v: sum(results[(v, s)] is not None for s in SEEDS) for v in VARIANTS}
    ok = all(n >= 2 for n in per_variant.values()) and slowest < 300
    epochs = {v: [results[(v, s)] for s in SEEDS] for v in VARIANTS}
    report(5, ok, f"epochs to train R@1=100% both ways per seed {epochs}; "
                  f"slowest run {slowest:.1f}s (< 300s)")


# ---------------------------------------------------------------- 6 / 7 toy training

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    runs = {}
    for seed in SEEDS:
        ds = make_toy_dataset(root / f"toy{seed}", 260, 8, feature_dim=64, vocab_size=60, seed=seed,
                              split=(200, 30, 30))
        models = {}
        for v in VARIANTS:
            m = build_model(ArchitectureConfig.toy(v, 64), ds.vocab, seed)
            fit(m, ds, TrainConfig(learning_rate=0.2, batch_size=20, patience=30, max_epochs=300, seed=seed))
            models[v] = m
        runs[seed] = (ds, models)
    return runs


def _sum(sr, ir):
    return sum(sr.r_at.values()) + sum(ir.r_at.values())


def test_c06_generalization_and_ensemble(trained):
    per_seed = {}
    details = []
    for seed, (ds, models) in trained.items():
        view = ds.view("test")
        sums, hits_ok = {}, True
        r1 = {}
        for v, m in models.items():
            sr, ir = bidirectional_reports(build_score_matrix([m], view.features, view.sentences, view.owner))
            sums[v] = _sum(sr, ir)
            # 10x the 1/30 random baseline is 10 hits out of 30 queries
            hits = (int(np.sum(sr.ranks == 1)), int(np.sum(ir.ranks == 1)))
            hits_ok &= min(hits) >= 10
            r1[v] = f"{hits[0]}/{hits[1]}"
        ens = build_score_matrix(list(models.values()), view.features, view.sentences, view.owner,
                                 ensemble=True)
        ens_sum = _sum(*bidirectional_reports(ens))
        best = max(sums.values())
        per_seed[seed] = hits_ok and ens_sum >= best
        details.append(f"seed {seed}: R@1 hits/30 {r1}, ensemble sum {ens_sum:.2f} vs best {best:.2f}")
    ok = sum(per_seed.values()) >= 2
    report(6, ok, f"{sum(per_seed.values())}/3 seeds pass; " + "; ".join(details))


def _training_pairs(ds):
    view = ds.view("train")
    return [(view.image_ids[view.owner[j]], view.features[view.owner[j]], ds.sentences[row][1])
            for j, row in enumerate(view.sentence_rows)]


def test_c07_reshuffle_probe(trained):
    trained_frac = {}
    for seed, (ds, models) in trained.items():
        pairs = _training_pairs(ds)
        for v, m in models.items():
            trained_frac[(v, seed)] = probe_reshuffle([m], pairs, n_shuffles=3, seed=seed).beats_mean
    ds0 = trained[0][0]
    pairs = _training_pairs(ds0)

    def untrained(v, seed):
        model = build_model(ArchitectureConfig.toy(v, 64), ds0.vocab, seed)
        return probe_reshuffle([model], pairs, 3, seed).beats_mean

    # All pairs share one model's weights, so the fraction varies across
    # initializations far more than a binomial over pairs suggests.  sigma is
    # measured on independent inits; seed 0 is the model under test.
    single = {v: untrained(v, 0) for v in VARIANTS}
    reference = np.array([[untrained(v, s) for s in range(1, 13)] for v in VARIANTS])
    sigma = reference.std(ddof=1)
    single_ok = all(abs(f - 0.5) <= 3 * sigma for f in single.values())
    pooled = reference.mean()
    pooled_se = sigma / np.sqrt(reference.size)
    pooled_ok = abs(pooled - 0.5) <= 3 * pooled_se
    binom = 3 * np.sqrt(0.25 / len(pairs))
    ok = min(trained_frac.values()) >= 0.8 and single_ok and pooled_ok
    report(7, ok, f"trained fraction min {min(trained_frac.values()):.3f} over 4 variants x 3 seeds (>= 0.8); "
                  f"untrained {{{', '.join(f'{v}: {f:.3f}' for v, f in single.items())}}} within "
                  f"0.5 +/- {3 * sigma:.3f} (3 sigma over inits; binomial 3 sigma would be {binom:.3f}); "
                  f"mean over {reference.size} inits {pooled:.3f} within 0.5 +/- {3 * pooled_se:.3f}")


# ---------------------------------------------------------------- 8 metrics

def _brute(values, truth):
    ranks = []
    for row, t in zip(values, truth):
        order = sorted(range(len(row)), key=lambda c: (-row[c], c))
        ranks.append(min(order.index(int(x)) for x in t) + 1)
    s = sorted(ranks)
    n = len(s)
    med = float(s[n // 2]) if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2
    return ranks, {k: sum(r <= k for r in ranks) / n for k in (1, 5, 10)}, med


def test_c08_metric_oracle():
    rng = np.random.default_rng(0)
    mismatches = cases = 0
    for i in range(300):
        if i < 200:
            values = rng.choice(rng.normal(size=2), size=(20, 20))
        else:
            values = rng.normal(size=(int(rng.integers(5, 30)), int(rng.integers(5, 30))))
        truth = [rng.choice(values.shape[1], size=int(rng.integers(1, 4)), replace=False)
                 for _ in range(values.shape[0])]
        for m in (ScoreMatrix(values, truth),):
            rep = compute_report(m)
            ranks, r_at, med = _brute(m.values, m.ground_truth)
            cases += 1
            mismatches += int(list(rep.ranks) != ranks or rep.r_at != r_at or rep.med_r != med)
    m = ScoreMatrix(np.array([np.r_[np.full(10, 2.0), 1.0, 0.0], np.r_[np.full(11, 2.0), 1.0]]),
                    [np.array([10]), np.array([11])])
    medr = compute_report(m).med_r
    report(8, mismatches == 0 and medr == 11.5,
           f"{cases} matrices (200 two-valued 20x20, 100 real) with {mismatches} mismatches; "
           f"ranks {{11,12}} -> Med r {medr}")


# ---------------------------------------------------------------- 9 persistence

def test_c09_persistence(tmp_path):
    vocab = Vocabulary([f"t{i}" for i in range(40)])
    identical = {}
    for v in VARIANTS:
        m = build_model(ArchitectureConfig.toy(v, 64), vocab, seed=3)
        rng = np.random.default_rng(VARIANTS.index(v))
        for p in m.params:
            p.value[...] += rng.normal(0, 0.01, p.value.shape).astype(p.value.dtype)
        m.params["embedding"].value[PAD] = 0
        path = tmp_path / f"{v}.mcnn"
        save_checkpoint(m, path, TrainConfig())
        back = load_checkpoint(path)
        x = rng.normal(size=(100, 64)).astype(np.float32)
        s = np.full((100, 30), PAD)
        lengths = rng.integers(1, 31, size=100)
        for i, n in enumerate(lengths):
            s[i, :n] = rng.integers(2, len(vocab), size=n)
        identical[v] = score_batch(m, x, s).value.tobytes() == score_batch(back, x, s).value.tobytes()
    report(9, all(identical.values()), f"100 pairs per variant bit-identical after reload: {identical}")


# ---------------------------------------------------------------- 10 determinism

def test_c10_cli_determinism(tmp_path):
    data = tmp_path / "toy"
    assert cli_main(["make-toy", "--images", "40", "--concepts", "4", "--seed", "5",
                     "--split", "28,6,6", "--out", str(data)]) == 0
    flags = ["train", "--variant", "phs", "--data", str(data), "--out", "ck/phs.mcnn",
             "--preset", "toy", "--max-epochs", "4", "--batch-size", "10", "--learning-rate", "0.1",
             "--seed", "1"]
    for run in ("a", "b"):
        (tmp_path / run).mkdir()
        res = subprocess.run([sys.executable, "-m", "mcnn", *flags], cwd=tmp_path / run,
                             capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
    same_ckpt = (tmp_path / "a/ck/phs.mcnn").read_bytes() == (tmp_path / "b/ck/phs.mcnn").read_bytes()
    same_log = (tmp_path / "a/ck/phs.log.jsonl").read_bytes() == (tmp_path / "b/ck/phs.log.jsonl").read_bytes()
    report(10, same_ckpt and same_log,
           f"two identical train invocations: checkpoint identical {same_ckpt}, log identical {same_log}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
