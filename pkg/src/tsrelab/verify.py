"""Finite-difference suite over every differentiable op and the full model loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .encoder import EncoderConfig, RetrievalModel
from .numcore import Tensor, check_gradients, ops, overall_relative_error
from .objective import ContrastiveBatch, target_speaker_loss, vanilla_clip_loss
from .tsre import VARIANTS, TSREConfig

TOLERANCE = 1e-4
GRADCHECK_ENCODER = EncoderConfig(num_layers=1, hidden_dim=8, num_heads=2, ff_dim=12, embed_dim=4,
                                  speaker_dim=3, input_dim=5, latent_dim=3)


@dataclass(frozen=True)
class GroupResult:
    group: str
    worst_rel_err: float
    n_checked: int

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.worst_rel_err < tol


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[np.ndarray]]]:
    r = lambda *s: rng.normal(size=s)
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)
    away = lambda *s: np.where(rng.random(s) < 0.5, -1, 1) * rng.uniform(0.2, 1.5, size=s)
    return {
        "add": (ops.add, [r(3, 4), r(4)]),
        "sub": (ops.sub, [r(3, 1), r(3, 4)]),
        "mul": (ops.mul, [r(2, 3), r(2, 3)]),
        "div": (ops.div, [r(2, 3), pos(2, 3)]),
        "scale": (lambda a: ops.scale(a, 1.7), [r(3)]),
        "exp": (ops.exp, [r(3, 2)]),
        "log": (ops.log, [pos(3, 2)]),
        "sqrt": (ops.sqrt, [pos(4)]),
        "relu": (ops.relu, [away(3, 3)]),
        "gelu": (ops.gelu, [r(3, 3)]),
        "matmul": (ops.matmul, [r(2, 3, 4), r(4, 2)]),
        "reshape": (lambda a: ops.reshape(a, (6, 2)), [r(3, 4)]),
        "transpose": (lambda a: ops.transpose(a, (2, 0, 1)), [r(2, 3, 4)]),
        "index": (lambda a: ops.index(a, (np.array([0, 2, 0]), slice(None))), [r(3, 2)]),
        "concat": (lambda a, b: ops.concat([a, b], axis=1), [r(2, 3), r(2, 2)]),
        "stack": (lambda a, b: ops.stack([a, b], axis=0), [r(2, 3), r(2, 3)]),
        "sum": (lambda a: ops.sum(a, axis=1, keepdims=True), [r(3, 4)]),
        "mean": (lambda a: ops.mean(a, axis=0), [r(3, 4)]),
        "softmax": (lambda a: ops.softmax(a, axis=1), [r(3, 4)]),
        "log_sum_exp": (lambda a: ops.log_sum_exp(a, axis=0), [r(3, 4)]),
        "log_softmax": (lambda a: ops.log_softmax(a, axis=-1), [r(3, 4)]),
        "standardize": (ops.standardize, [r(3, 5)]),
        "layer_norm": (ops.layer_norm, [r(2, 3, 5), r(2, 1, 5), r(5)]),
        "l2_normalize": (ops.l2_normalize, [r(3, 4)]),
        "cosine_similarity": (ops.cosine_similarity, [r(4), r(4)]),
        "conv1d_grouped": (lambda h, k: ops.conv1d_grouped(h, k, groups=2), [r(2, 6, 4), r(4, 2, 3)]),
        "conv1d_per_sample": (lambda h, k: ops.conv1d_grouped(h, k, groups=4), [r(2, 5, 4), r(2, 4, 1, 3)]),
        "vanilla_clip_loss": (lambda a, b: vanilla_clip_loss(ops.l2_normalize(a), ops.l2_normalize(b)),
                              [r(4, 3), r(4, 3)]),
        "target_speaker_loss": (lambda a, b: target_speaker_loss(ContrastiveBatch(
            ops.l2_normalize(a), ops.l2_normalize(b), np.array([1, 0, 1]))), [r(3, 4), r(3, 2, 4)]),
    }


def check_ops(seed: int = 0) -> list[GroupResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (fn, arrays) in _op_cases(rng).items():
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        weight_rng = np.random.default_rng(seed + 1)
        probe = fn(*leaves)
        weights = Tensor(weight_rng.normal(size=probe.shape)) if probe.ndim else None

        def loss(fn=fn, leaves=leaves, weights=weights):
            y = fn(*leaves)
            return (y * weights).sum() if weights is not None else y

        res = check_gradients(loss, {f"{name}/{i}": t for i, t in enumerate(leaves)})
        out.append(GroupResult(f"op/{name}", max(r.max_rel_err for r in res.values()),
                               sum(r.n_checked for r in res.values())))
    return out


def check_model(seed: int = 0, max_entries: int = 8) -> list[GroupResult]:
    """Encoder plus each adapter variant under the target-speaker loss.

    Adapter parameters are pushed off their identity start so every path
    carries gradient. Error is reported per parameter group relative to the
    scale of the whole gradient.
    """
    out = []
    cfg = GRADCHECK_ENCODER
    for variant in (None,) + VARIANTS:
        rng = np.random.default_rng(seed)
        model = RetrievalModel(cfg, seed, tsre=TSREConfig(variant) if variant else None,
                               learnable_temperature=True)
        for path, p in model.speech.params.items():
            if path.startswith("tsre/"):
                p.data = p.data + 0.3 * rng.normal(size=p.shape)
        N, K, T = 3, 2, 5
        x = np.repeat(rng.normal(size=(N, T, cfg.input_dim)), K, axis=0)
        u = rng.normal(size=(N * K, cfg.speaker_dim)) if variant else None
        lat = rng.normal(size=(N, cfg.latent_dim))
        target = np.array([1, 0, 1])

        def loss():
            e_i = model.image(lat)
            if variant is None:
                return vanilla_clip_loss(e_i, model.speech(x[::K]), log_temperature=model.log_temperature)
            e_s = model.speech(x, u).reshape(N, K, cfg.embed_dim)
            return target_speaker_loss(ContrastiveBatch(e_i, e_s, target),
                                       log_temperature=model.log_temperature)

        res = check_gradients(loss, model.trainable(), max_entries=max_entries, seed=seed)
        scale = max(max(r.grad_scale for r in res.values()), 1e-8)
        groups: dict[str, list] = {}
        for path, r in res.items():
            parts = path.split("/")
            key = "/".join(parts[:3] if parts[0] in ("tsre", "encoder") and len(parts) > 3 else parts[:2])
            groups.setdefault(key, []).append(r)
        label = variant or "base"
        for key, rs in sorted(groups.items()):
            out.append(GroupResult(f"model[{label}]/{key}", max(r.max_abs_err for r in rs) / scale,
                                   sum(r.n_checked for r in rs)))
        out.append(GroupResult(f"model[{label}]/overall", overall_relative_error(res),
                               sum(r.n_checked for r in res.values())))
    return out


def run_suite(seed: int = 0) -> list[GroupResult]:
    return check_ops(seed) + check_model(seed)
