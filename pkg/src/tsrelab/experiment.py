"""Desk-scale mixture experiment.

1. Train the base encoder on clean single-speaker speech (K = 1).
2. Evaluate it unconditioned on K = 2 and K = 3 mixtures (Base*).
3. Attach a fresh adapter per K, fine-tune it with the target-speaker loss
   and evaluate target-conditioned retrieval.

All three corpora share one seed, so they share images, splits and speakers
and the test pool is the same 50 images throughout. Thresholds and settings
below were calibrated on pilot runs; see the project notes.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from .datagen import DataConfig, build_corpus
from .encoder import EncoderConfig, RetrievalModel
from .objective import LossConfig
from .retrieval import evaluate
from .trainer import TrainConfig, train
from .tsre import TSREConfig

# corpus settings on top of the DataConfig defaults
DESK_DATA = {"train_passes": 64}


@dataclass
class Thresholds:
    base_recall: float = 0.8        # (a) base R@1 on clean K=1 test speech
    base_star_drop: float = 0.30    # (b) base R@1 minus Base* R@1 on K=2
    tsre_gain: float = 0.20         # (c) TSRE R@1 minus Base* R@1 on K=2
    recovered_fraction: float = 0.5  # (c) share of the (b) drop won back


@dataclass
class DeskExperiment:
    seed: int = 0
    variant: str = "scc-b3"
    data: dict = field(default_factory=lambda: dict(DESK_DATA))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    base_steps: int = 1000
    base_lr: float = 1e-3
    finetune_steps: int = 1500
    finetune_lr: float = 3e-3
    batch_size: int = 32
    eval_every: int = 250
    mixtures: tuple[int, ...] = (2, 3)
    thresholds: Thresholds = field(default_factory=Thresholds)

    def data_config(self, k: int) -> DataConfig:
        return DataConfig(**{**self.data, "k": k})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mixtures"] = list(self.mixtures)
        return d


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


@dataclass
class ExperimentResult:
    experiment: DeskExperiment
    base_k1: float
    base_star: dict[int, float]
    tsre: dict[int, float]
    seconds: float
    checks: list[Check]

    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary_lines(self) -> list[str]:
        lines = [f"base (K=1) test R@1 {self.base_k1:.3f}"]
        for k in sorted(self.base_star):
            lines.append(f"K={k}: Base* R@1 {self.base_star[k]:.3f}  TSRE R@1 {self.tsre[k]:.3f}")
        lines += [f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}" for c in self.checks]
        lines.append(f"total {self.seconds:.0f} s")
        return lines

    def to_dict(self) -> dict:
        return {"experiment": self.experiment.to_dict(), "base_k1": self.base_k1,
                "base_star": {str(k): v for k, v in self.base_star.items()},
                "tsre": {str(k): v for k, v in self.tsre.items()},
                "checks": [asdict(c) for c in self.checks]}


def judge(exp: DeskExperiment, base_k1: float, base_star: dict[int, float],
          tsre: dict[int, float]) -> list[Check]:
    t = exp.thresholds
    drop = base_k1 - base_star[2]
    gain = tsre[2] - base_star[2]
    checks = [
        Check("base recall", base_k1 >= t.base_recall, f"{base_k1:.3f} >= {t.base_recall}"),
        Check("Base* drop on K=2", drop >= t.base_star_drop, f"{drop:.3f} >= {t.base_star_drop}"),
        Check("TSRE gain on K=2", gain >= t.tsre_gain and gain >= t.recovered_fraction * drop,
              f"{gain:.3f} >= max({t.tsre_gain}, {t.recovered_fraction} x {drop:.3f})"),
    ]
    if 3 in base_star:
        checks.append(Check(
            "K=3 ordering and degradation",
            tsre[3] > base_star[3] and base_star[3] <= base_star[2] and tsre[3] <= tsre[2],
            f"TSRE {tsre[3]:.3f} > Base* {base_star[3]:.3f}; "
            f"Base* {base_star[2]:.3f} -> {base_star[3]:.3f}, TSRE {tsre[2]:.3f} -> {tsre[3]:.3f}"))
    return checks


def run_experiment(exp: DeskExperiment, out_dir: str | Path | None = None,
                   log: Callable[[str], None] | None = None) -> ExperimentResult:
    say = log or (lambda msg: None)
    t0 = time.time()
    out = Path(out_dir) if out_dir else None
    loss_cfg = LossConfig()

    clean = build_corpus(exp.data_config(1), exp.seed)
    base = RetrievalModel(exp.encoder, exp.seed)
    say(f"training base encoder for {exp.base_steps} steps")
    res = train(base, clean, TrainConfig(lr=exp.base_lr, batch_size=exp.batch_size,
                                         max_steps=exp.base_steps, eval_every=exp.eval_every,
                                         seed=exp.seed), loss_cfg)
    base.load_arrays(res.best.params)
    base_k1 = evaluate(base, clean, "test", "single")[0].recall[1]
    say(f"base R@1 {base_k1:.3f} ({time.time() - t0:.0f} s)")
    if out:
        res.best.save(out / "base.ckpt")

    base_star, tsre = {}, {}
    for k in exp.mixtures:
        corpus = build_corpus(exp.data_config(k), exp.seed)
        base_star[k] = evaluate(base, corpus, "test", "single")[0].recall[1]
        model = RetrievalModel(exp.encoder, exp.seed, tsre=TSREConfig(exp.variant))
        say(f"K={k}: Base* R@1 {base_star[k]:.3f}; fine-tuning {exp.variant} "
            f"for {exp.finetune_steps} steps")
        ft = train(model, corpus, TrainConfig(lr=exp.finetune_lr, batch_size=exp.batch_size,
                                              max_steps=exp.finetune_steps,
                                              eval_every=exp.eval_every, seed=exp.seed,
                                              stage="tsre-finetune"), loss_cfg, init=res.best)
        model.load_arrays(ft.best.params)
        tsre[k] = evaluate(model, corpus, "test", "target")[0].recall[1]
        say(f"K={k}: TSRE R@1 {tsre[k]:.3f} ({time.time() - t0:.0f} s)")
        if out:
            ft.best.save(out / f"tsre_k{k}.ckpt")

    result = ExperimentResult(exp, base_k1, base_star, tsre, time.time() - t0,
                              judge(exp, base_k1, base_star, tsre))
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "experiment.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    return result
