"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import json
import math
import time

import numpy as np
import pytest

from tsrelab import cli
from tsrelab.encoder import EncoderConfig, SpeechEncoder
from tsrelab.experiment import DeskExperiment, run_experiment
from tsrelab.numcore import Tensor, conv1d_grouped
from tsrelab.objective import ContrastiveBatch, LossConfig, target_speaker_loss, vanilla_clip_loss
from tsrelab.retrieval import recall_at_k
from tsrelab.tsre import VARIANTS, TSREConfig, count_params
from tsrelab.verify import TOLERANCE, run_suite


@pytest.fixture
def report(capsys):
    def _report(n: int, name: str, passed: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] criterion {n} ({name}): {detail}")
        assert passed, detail
    return _report


def _unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# 1 -----------------------------------------------------------------------------

def test_gradient_integrity(report):
    t0 = time.time()
    results = run_suite(seed=0)
    elapsed = time.time() - t0
    worst = max(results, key=lambda r: r.worst_rel_err)
    ok = all(r.worst_rel_err < TOLERANCE for r in results) and elapsed < 120
    report(1, "gradient integrity", ok,
           f"{len(results)} groups, worst {worst.worst_rel_err:.2e} ({worst.group}) < 1e-4, "
           f"{elapsed:.0f} s < 120 s")


# 2 -----------------------------------------------------------------------------

def test_identity_at_init(report):
    cfg = EncoderConfig()
    rng = np.random.default_rng(2024)
    x = rng.normal(size=(100, 16, cfg.input_dim))
    u = _unit(rng, 100, cfg.speaker_dim)
    plain = SpeechEncoder(cfg, seed=0)
    ref = plain(x).data
    diffs = {}
    for variant in VARIANTS:
        adapted = SpeechEncoder(cfg, seed=0)
        adapted.attach_tsre(TSREConfig(variant), seed=1)
        diffs[variant] = float(np.abs(adapted(x, u).data - ref).max())
    ok = all(d < 1e-12 for d in diffs.values())
    report(2, "identity at init", ok,
           "100 probes, max |diff| " + ", ".join(f"{v}={d:.1e}" for v, d in diffs.items()))


# 3 -----------------------------------------------------------------------------

def test_loss_reduction(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        N, E = int(rng.integers(2, 9)), int(rng.integers(2, 8))
        ei, es = _unit(rng, N, E), _unit(rng, N, E)
        cfg = LossConfig(temperature=float(rng.uniform(0.03, 1.0)))
        a = vanilla_clip_loss(ei, es, cfg).item()
        b = target_speaker_loss(ContrastiveBatch(ei, es[:, None], np.zeros(N, int)), cfg).item()
        worst = max(worst, abs(a - b))
    e = np.array([1.0, 0.0, 0.0])
    batch = ContrastiveBatch(np.tile(e, (4, 1)), np.tile(e, (4, 2, 1)), np.array([0, 1, 0, 1]))
    _, loss_is, _ = target_speaker_loss(batch, parts=True)
    dev = float(np.abs(loss_is - math.log(8)).max())
    report(3, "loss reduction", worst < 1e-12 and dev < 1e-9,
           f"K=1 vs vanilla max diff {worst:.1e} < 1e-12 over 50 batches; "
           f"uniform i->s |term - ln 8| {dev:.1e} < 1e-9")


# 4 -----------------------------------------------------------------------------

def test_parameter_accounting(report):
    enc = EncoderConfig.paper_scale()
    c = {v: count_params(enc, TSREConfig(v)) for v in VARIANTS}
    ok = (c["scl"] == 1_048_576
          and abs(c["scc-b3"] / 1.59e6 - 1) <= 0.25
          and abs(c["scc-b5"] / 2.11e6 - 1) <= 0.25
          and c["scl"] < c["scc-b3"] < c["scc-b5"] < c["scc"])
    report(4, "parameter accounting", ok,
           f"SCL {c['scl']:,} (1.05M), SCC-B3 {c['scc-b3']:,} vs 1.59M "
           f"({c['scc-b3'] / 1.59e6 - 1:+.0%}), SCC-B5 {c['scc-b5']:,} vs 2.11M "
           f"({c['scc-b5'] / 2.11e6 - 1:+.0%}), SCC {c['scc']:,}; ordering SCL<B3<B5<SCC")


# 5 -----------------------------------------------------------------------------

def test_desk_reproduction(report, tmp_path):
    exp = DeskExperiment(seed=0)
    result = run_experiment(exp, out_dir=tmp_path)
    failed = [c for c in result.checks if not c.passed]
    detail = (f"seed {exp.seed}; base {result.base_k1:.2f}; "
              + "; ".join(f"K={k} Base* {result.base_star[k]:.2f} TSRE {result.tsre[k]:.2f}"
                          for k in sorted(result.base_star))
              + f"; {result.seconds / 60:.1f} min"
              + (f"; failed: {', '.join(c.name + ' (' + c.detail + ')' for c in failed)}" if failed else ""))
    report(5, "desk-scale reproduction", not failed and result.seconds < 30 * 60, detail)


# 6 -----------------------------------------------------------------------------

def _conv_direct(h, kernel, groups):
    B, T, C_in = h.shape
    C_out, cg, k = kernel.shape
    r = k // 2
    og = C_out // groups
    out = np.zeros((B, T, C_out))
    for b in range(B):
        for t in range(T):
            for o in range(C_out):
                g = o // og
                for c in range(cg):
                    for j in range(k):
                        s = t + j - r
                        if 0 <= s < T:
                            out[b, t, o] += kernel[o, c, j] * h[b, s, g * cg + c]
    return out


def _rank_recall(sims, gold, k):
    hits = 0
    for q, row in enumerate(sims):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += gold[q] in order[:k]
    return hits / len(sims)


def _ts_terms(ei, es, target, tau):
    N, K, _ = es.shape
    total = 0.0
    for m in range(N):
        pos = es[m, target[m]]
        den = sum(math.exp(ei[m] @ es[n, q] / tau) for n in range(N) for q in range(K))
        total -= math.log(math.exp(ei[m] @ pos / tau) / den)
        den = sum(math.exp(pos @ ei[n] / tau) for n in range(N))
        total -= math.log(math.exp(pos @ ei[m] / tau) / den)
    return total / (2 * N)


def test_oracle_equivalences(report):
    rng = np.random.default_rng(6)
    conv_err = 0.0
    for groups, c_in, c_out in ((1, 4, 6), (2, 4, 6), (4, 4, 4), (3, 6, 3)):
        for k in (1, 3, 5):
            h = rng.normal(size=(2, 7, c_in))
            w = rng.normal(size=(c_out, c_in // groups, k))
            got = conv1d_grouped(Tensor(h), Tensor(w), groups=groups).data
            conv_err = max(conv_err, float(np.abs(got - _conv_direct(h, w, groups)).max()))
    recall_ok = True
    for _ in range(50):
        sims = rng.integers(0, 4, size=(6, 9)) / 4.0
        gold = [int(g) for g in rng.integers(0, 9, size=6)]
        rep = recall_at_k(sims, gold, (1, 5, 10))
        recall_ok &= all(rep.recall[k] == _rank_recall(sims, gold, min(k, 9)) for k in (1, 5, 10))
    loss_err = 0.0
    for _ in range(30):
        N, K, tau = int(rng.integers(1, 6)), int(rng.integers(1, 4)), float(rng.uniform(0.05, 1))
        ei, es = _unit(rng, N, 5), _unit(rng, N, K, 5)
        target = rng.integers(0, K, size=N)
        got = target_speaker_loss(ContrastiveBatch(ei, es, target), LossConfig(tau)).item()
        loss_err = max(loss_err, abs(got - _ts_terms(ei, es, target, tau)))
        got = vanilla_clip_loss(ei, es[:, 0], LossConfig(tau)).item()
        loss_err = max(loss_err, abs(got - _ts_terms(ei, es[:, :1], np.zeros(N, int), tau)))
    ok = conv_err < 1e-10 and recall_ok and loss_err < 1e-10
    report(6, "oracle equivalences", ok,
           f"conv vs direct sum {conv_err:.1e} < 1e-10; recall vs exhaustive sort "
           f"{'exact' if recall_ok else 'MISMATCH'}; losses vs per-term {loss_err:.1e} < 1e-10")


# 7 -----------------------------------------------------------------------------

DETERMINISM_CFG = {
    "encoder": {"num_layers": 1, "hidden_dim": 16, "num_heads": 2, "ff_dim": 32, "embed_dim": 8},
    "data": {"num_images": 40, "num_speakers": 10},
    "trainer": {"max_steps": 6, "batch_size": 8, "eval_every": 3},
    "tsre": {"variant": "scc-b3"},
    "seed": 13,
}


def test_determinism(report, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(DETERMINISM_CFG))
    artifacts = ["k1/manifest.jsonl", "k1/frames.bin", "k1/corpus.json", "k2/manifest.jsonl",
                 "k2/frames.bin", "base/final.ckpt", "base/best.ckpt", "base/train_log.jsonl",
                 "tsre/final.ckpt", "tsre/best.ckpt", "eval/recall.json", "eval/recall.csv"]
    for run in ("a", "b"):
        d = tmp_path / run
        steps = [
            ["synth-data", "--config", str(cfg), "--k", "1", "--corpus-dir", str(d / "k1")],
            ["synth-data", "--config", str(cfg), "--k", "2", "--corpus-dir", str(d / "k2")],
            ["train", "--config", str(cfg), "--stage", "base", "--corpus-dir", str(d / "k1"),
             "--out", str(d / "base"), "--quiet"],
            ["train", "--config", str(cfg), "--stage", "tsre-finetune", "--corpus-dir", str(d / "k2"),
             "--init", str(d / "base" / "best.ckpt"), "--out", str(d / "tsre"), "--quiet"],
            ["eval", "--checkpoint", str(d / "tsre" / "best.ckpt"), "--corpus-dir", str(d / "k2"),
             "--protocol", "target", "--out", str(d / "eval")],
        ]
        for argv in steps:
            assert cli.main(argv) == 0, argv
    differ = [a for a in artifacts
              if (tmp_path / "a" / a).read_bytes() != (tmp_path / "b" / a).read_bytes()]
    report(7, "determinism", not differ,
           f"{len(artifacts) - len(differ)}/{len(artifacts)} artifacts byte-identical across two runs"
           + (f"; differ: {differ}" if differ else ""))
