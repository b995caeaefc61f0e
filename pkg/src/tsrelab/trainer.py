"""Deterministic Adam training for the base and TSRE fine-tuning stages.

Batch composition depends only on ``(seed, step)``: step ``s`` of an epoch of
``n // batch_size`` steps takes a slice of a permutation drawn from the stream
``trainer/order/<epoch>``. Resuming from a checkpoint at step ``s`` therefore
replays exactly the batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import container
from .datagen import Corpus, MixtureSample
from .encoder import EncoderConfig, RetrievalModel
from .numcore import ConfigurationError, NumericalError, Tensor, stream
from .objective import ContrastiveBatch, LossConfig, target_speaker_loss, vanilla_clip_loss
from .retrieval import config_digest, evaluate
from .tsre import TSREConfig

log = logging.getLogger(__name__)

STAGES = ("base", "tsre-finetune")
FINETUNE_FROZEN = ("encoder/input/", "encoder/block", "encoder/layer_weights",
                   "encoder/output/", "loss/")


class TrainingError(RuntimeError):
    pass


class TrainingAborted(TrainingError):
    """Raised when the loss (or any activation) turns non-finite."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 1e-8
    max_steps: int = 2000
    seed: int = 0
    stage: str = "base"
    freeze: list[str] | None = None
    eval_every: int = 100
    log_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not self.lr >= 0:
            raise ConfigurationError("learning rate must be non-negative")
        if self.batch_size < 2:
            raise ConfigurationError("contrastive training needs batch_size >= 2")
        if self.max_steps < 0 or self.eval_every < 1 or self.log_every < 1:
            raise ConfigurationError("max_steps >= 0, eval_every >= 1 and log_every >= 1 required")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")

    def frozen_prefixes(self) -> tuple[str, ...]:
        if self.freeze is not None:
            return tuple(self.freeze)
        return FINETUNE_FROZEN if self.stage == "tsre-finetune" else ()

    def to_dict(self) -> dict:
        return asdict(self)


# -- Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0):
    """One bias-corrected Adam update with decoupled weight decay.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_params, m_out, v_out = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ConfigurationError(f"{name}: gradient {g.shape} vs parameter {theta.shape}")
        m = beta1 * state.m.get(name, np.zeros_like(theta)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(theta)) + (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = theta - lr * (update + weight_decay * theta)
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(t, m_out, v_out)


# -- checkpoints ----------------------------------------------------------------

@dataclass
class Checkpoint:
    step: int
    params: dict[str, np.ndarray]
    config: dict
    adam: AdamState = field(default_factory=AdamState)
    best_step: int = -1
    best_score: float = -1.0
    best_params: dict[str, np.ndarray] | None = None

    @property
    def digest(self) -> str:
        return config_digest(self.config)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"params/{k}": v for k, v in sorted(self.params.items())}
        out.update({f"adam/m/{k}": v for k, v in sorted(self.adam.m.items())})
        out.update({f"adam/v/{k}": v for k, v in sorted(self.adam.v.items())})
        if self.best_params is not None:
            out.update({f"best/{k}": v for k, v in sorted(self.best_params.items())})
        return out

    def save(self, path: str | Path) -> None:
        meta = {"kind": "checkpoint", "step": self.step, "config": self.config,
                "config_digest": self.digest, "adam_step": self.adam.step,
                "best_step": self.best_step, "best_score": self.best_score}
        container.save(path, self.arrays(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        arrays, meta = container.load(path)
        if meta.get("kind") != "checkpoint":
            raise ConfigurationError(f"{path} is not a checkpoint")

        def group(prefix):
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

        return cls(step=meta["step"], params=group("params/"), config=meta["config"],
                   adam=AdamState(meta["adam_step"], group("adam/m/"), group("adam/v/")),
                   best_step=meta["best_step"], best_score=meta["best_score"],
                   best_params=group("best/") or None)


def model_config(model: RetrievalModel, loss_cfg: LossConfig) -> dict:
    return {"encoder": model.cfg.to_dict(), "seed": model.seed,
            "tsre": model.tsre_cfg.to_dict() if model.tsre_cfg else None,
            "loss": asdict(loss_cfg)}


def model_from_checkpoint(ckpt: Checkpoint) -> RetrievalModel:
    cfg = ckpt.config
    loss = LossConfig(**cfg["loss"])
    tsre = TSREConfig(**cfg["tsre"]) if cfg.get("tsre") else None
    model = RetrievalModel(EncoderConfig(**cfg["encoder"]), cfg["seed"], tsre=tsre,
                           temperature=loss.temperature,
                           learnable_temperature=loss.learnable_temperature)
    model.load_arrays(ckpt.params)
    return model


def snapshot(model: RetrievalModel) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.parameters().items()}


# -- batching and losses --------------------------------------------------------

def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    if batch_size > n:
        raise ConfigurationError(f"batch_size {batch_size} exceeds {n} training samples")
    per_epoch = n // batch_size
    epoch, pos = divmod(step, per_epoch)
    perm = stream(seed, f"trainer/order/{epoch}").permutation(n)
    return perm[pos * batch_size:(pos + 1) * batch_size]


def batch_loss(model: RetrievalModel, corpus: Corpus, samples: Sequence[MixtureSample],
               loss_cfg: LossConfig) -> Tensor:
    """Vanilla loss for an unconditioned model, target-speaker loss with an adapter."""
    latents = np.stack([corpus.images[s.target_image_id] for s in samples])
    e_i = model.image(latents)
    log_t = model.log_temperature if loss_cfg.learnable_temperature else None
    x = np.stack([s.mixture for s in samples])
    if not model.speech.has_tsre:
        return vanilla_clip_loss(e_i, model.speech(x), loss_cfg, log_t)
    K = samples[0].k
    if any(s.k != K for s in samples):
        raise ConfigurationError("all samples in a batch must have the same speaker count")
    x_rep = np.repeat(x, K, axis=0)
    u_rep = np.stack([u for s in samples for u in s.enrollments])
    e_s = model.speech(x_rep, u_rep).reshape(len(samples), K, model.cfg.embed_dim)
    batch = ContrastiveBatch(e_i, e_s, np.array([s.target for s in samples]))
    return target_speaker_loss(batch, loss_cfg, log_t)


# -- training loop --------------------------------------------------------------

@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    history: list[dict]


def trainable_params(model: RetrievalModel, cfg: TrainConfig) -> dict[str, Tensor]:
    frozen = cfg.frozen_prefixes()
    return {k: v for k, v in model.trainable().items()
            if not any(k.startswith(p) for p in frozen)}


def train(model: RetrievalModel, corpus: Corpus, cfg: TrainConfig,
          loss_cfg: LossConfig | None = None, init: Checkpoint | None = None,
          resume: Checkpoint | None = None,
          on_log: Callable[[dict], None] | None = None) -> TrainResult:
    """Run Adam from ``init`` (base weights) or ``resume`` (a mid-run checkpoint).

    Validation speech->image recall@1 is measured every ``eval_every`` steps
    and at the last step; the best checkpoint keeps the earliest step among ties.
    """
    loss_cfg = loss_cfg or LossConfig()
    if cfg.stage == "tsre-finetune":
        if init is None and resume is None:
            raise TrainingError("tsre-finetune needs a base checkpoint to start from")
        if not model.speech.has_tsre:
            raise ConfigurationError("tsre-finetune needs a model with a TSRE adapter attached")
    elif model.speech.has_tsre:
        raise ConfigurationError("base stage trains an unconditioned encoder; detach TSRE")

    if resume is not None:
        model.load_arrays(resume.params)
        state = AdamState(resume.adam.step, dict(resume.adam.m), dict(resume.adam.v))
        start = resume.step
        best_step, best_score = resume.best_step, resume.best_score
        best_params = resume.best_params
    else:
        if init is not None:
            base = {k: v for k, v in init.params.items() if not k.startswith("tsre/")}
            model.load_arrays(base, strict=False)
        state = AdamState()
        start, best_step, best_score, best_params = 0, -1, -1.0, None

    if not loss_cfg.learnable_temperature:
        # a fixed temperature is part of the config; keep the stored value in sync
        model.log_temperature.data = np.array([math.log(loss_cfg.temperature)])
    config = model_config(model, loss_cfg)
    config["train"] = cfg.to_dict()
    protocol = "target" if model.speech.has_tsre else "single"
    params = trainable_params(model, cfg)
    train_samples = corpus.split("train")
    history: list[dict] = []

    def emit(rec):
        history.append(rec)
        if on_log:
            on_log(rec)

    def validate(step: int):
        nonlocal best_step, best_score, best_params
        s2i, i2s = evaluate(model, corpus, "val", protocol)
        score = s2i.recall[1]
        if score > best_score:
            best_step, best_score, best_params = step, score, snapshot(model)
        return {"val_s2i": s2i.recall, "val_i2s": i2s.recall}

    if resume is None and cfg.max_steps > 0:
        emit({"step": 0, **validate(0)})

    for step in range(start, cfg.max_steps):
        idx = batch_indices(len(train_samples), cfg.batch_size, cfg.seed, step)
        for p in params.values():
            p.grad = None
        try:
            loss = batch_loss(model, corpus, [train_samples[i] for i in idx], loss_cfg)
            loss.backward()
        except NumericalError as exc:
            raise TrainingAborted(f"non-finite value at step {step}: {exc}") from exc
        if not math.isfinite(loss.item()):
            raise TrainingAborted(f"loss is {loss.item()} at step {step}")
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in params.items()}
        new, state = adam_step({k: p.data for k, p in params.items()}, grads, state, cfg.lr,
                               cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        for k, p in params.items():
            p.data = new[k]
            p.grad = None
        done = step + 1
        rec = None
        if done % cfg.log_every == 0 or done == cfg.max_steps:
            rec = {"step": done, "loss": loss.item(), "lr": cfg.lr}
        if done % cfg.eval_every == 0 or done == cfg.max_steps:
            rec = {**(rec or {"step": done, "loss": loss.item(), "lr": cfg.lr}), **validate(done)}
        if rec is not None:
            emit(rec)

    final_params = snapshot(model)
    if best_params is None:
        best_params = final_params
    final = Checkpoint(max(cfg.max_steps, start), final_params, config, state, best_step,
                       best_score, best_params)
    best = Checkpoint(best_step, best_params, config, AdamState(), best_step, best_score)
    return TrainResult(final, best, history)


def write_log(history: Sequence[dict], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
