"""Speech and image encoders mapping into a shared unit-norm retrieval space.

The speech tower is a small pre-norm transformer: input projection plus
sinusoidal positions, a stack of blocks, a learnable softmax-weighted sum over
all stack outputs, one head block, temporal mean-pooling and an output
projection. When a TSRE adapter is attached, every block listed in its sites
swaps both LayerNorms for speaker-conditioned ones and, for the convolutional
variants, passes the residual stream through the speaker-conditioned
convolution first.

The image tower is a frozen random linear map over caption latents.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tsre as tsre_mod
from .numcore import (
    ConfigurationError,
    ShapeError,
    Tensor,
    gelu,
    l2_normalize,
    layer_norm,
    softmax,
    stack,
    stream,
)
from .numcore.ops import LAYER_NORM_EPS
from .tsre import SCLParams, TSREConfig


class ConditioningError(ValueError):
    """Speaker embedding missing when an adapter is attached, or given when none is."""


@dataclass
class EncoderConfig:
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    embed_dim: int = 32
    speaker_dim: int = 16
    input_dim: int = 32
    latent_dim: int = 24
    layer_norm_eps: float = LAYER_NORM_EPS
    paper_scale_preset: bool = False

    def __post_init__(self):
        if self.paper_scale_preset:
            self.hidden_dim = 1024
            self.speaker_dim = 256
        for name in ("num_layers", "hidden_dim", "num_heads", "ff_dim", "embed_dim",
                     "speaker_dim", "input_dim", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim % self.num_heads:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.layer_norm_eps <= 0:
            raise ConfigurationError("layer_norm_eps must be positive")

    @classmethod
    def paper_scale(cls, **overrides) -> "EncoderConfig":
        """Dimensions used for parameter accounting against the published counts."""
        return cls(paper_scale_preset=True, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_positions(T: int, D: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(D)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / D)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def weighted_layer_sum(layer_outputs: Sequence[Tensor], alpha: Tensor) -> Tensor:
    """``sum_l softmax(alpha)_l * H_l`` over equally shaped layer outputs."""
    shapes = {h.shape for h in layer_outputs}
    if len(shapes) != 1:
        raise ShapeError(f"layer outputs differ in shape: {sorted(shapes)}")
    if alpha.shape != (len(layer_outputs),):
        raise ShapeError(f"alpha has shape {alpha.shape}, expected ({len(layer_outputs)},)")
    stacked = stack(layer_outputs, axis=0)
    w = softmax(alpha).reshape((len(layer_outputs),) + (1,) * (stacked.ndim - 1))
    return (stacked * w).sum(axis=0)


def _block_param_shapes(prefix: str, cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    D, F = cfg.hidden_dim, cfg.ff_dim
    return {
        f"{prefix}/ln1/gamma": (D,), f"{prefix}/ln1/beta": (D,),
        f"{prefix}/attn/wq": (D, D), f"{prefix}/attn/bq": (D,),
        f"{prefix}/attn/wk": (D, D), f"{prefix}/attn/bk": (D,),
        f"{prefix}/attn/wv": (D, D), f"{prefix}/attn/bv": (D,),
        f"{prefix}/attn/wo": (D, D), f"{prefix}/attn/bo": (D,),
        f"{prefix}/ln2/gamma": (D,), f"{prefix}/ln2/beta": (D,),
        f"{prefix}/ff/w1": (D, F), f"{prefix}/ff/b1": (F,),
        f"{prefix}/ff/w2": (F, D), f"{prefix}/ff/b2": (D,),
    }


def _init_array(path: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    leaf = path.rsplit("/", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf.startswith("b") or leaf == "layer_weights":
        return np.zeros(shape)
    fan_in = shape[0]
    return stream(seed, path).normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


class SpeechEncoder:
    """Trainable speech tower. Parameters live in ``self.params`` keyed by path."""

    def __init__(self, cfg: EncoderConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.tsre_cfg: TSREConfig | None = None
        shapes: dict[str, tuple[int, ...]] = {
            "encoder/input/w": (cfg.input_dim, cfg.hidden_dim),
            "encoder/input/b": (cfg.hidden_dim,),
        }
        for i in range(cfg.num_layers):
            shapes.update(_block_param_shapes(f"encoder/block{i}", cfg))
        shapes["encoder/layer_weights"] = (cfg.num_layers + 1,)
        shapes.update(_block_param_shapes("encoder/head", cfg))
        shapes["encoder/output/w"] = (cfg.hidden_dim, cfg.embed_dim)
        shapes["encoder/output/b"] = (cfg.embed_dim,)
        self.params: dict[str, Tensor] = {
            path: Tensor(_init_array(path, shape, seed), requires_grad=True)
            for path, shape in shapes.items()
        }

    # -- adapter management ---------------------------------------------------

    @property
    def has_tsre(self) -> bool:
        return self.tsre_cfg is not None

    def attach_tsre(self, cfg: TSREConfig, seed: int | None = None) -> None:
        """Add freshly initialized adapter parameters under ``tsre/``."""
        if self.has_tsre:
            raise ConfigurationError("a TSRE adapter is already attached")
        seed = self.seed if seed is None else seed
        for idx in cfg.resolved_sites(self.cfg.num_layers):
            prefix = f"tsre/{tsre_mod.site_name(idx, self.cfg.num_layers)}"
            arrays = tsre_mod.init_site_params(prefix, self.cfg.hidden_dim, self.cfg.speaker_dim,
                                               cfg, seed)
            for path, arr in arrays.items():
                self.params[path] = Tensor(arr, requires_grad=True)
        self.tsre_cfg = cfg

    def detach_tsre(self) -> None:
        for path in [p for p in self.params if p.startswith("tsre/")]:
            del self.params[path]
        self.tsre_cfg = None

    # -- forward ----------------------------------------------------------------

    def _norm(self, h: Tensor, prefix: str, ln: str, site: str | None, u: Tensor | None) -> Tensor:
        gamma = self.params[f"{prefix}/{ln}/gamma"]
        beta = self.params[f"{prefix}/{ln}/beta"]
        if site is None:
            return layer_norm(h, gamma, beta, self.cfg.layer_norm_eps)
        film = tsre_mod.film_params(self.params, f"tsre/{site}/{ln}")
        return tsre_mod.scl_forward(h, u, SCLParams(film, gamma, beta), self.cfg.layer_norm_eps)

    def _attention(self, a: Tensor, prefix: str) -> Tensor:
        P = self.params
        B, T, D = a.shape
        H = self.cfg.num_heads
        dh = D // H

        def heads(w, b):
            return (a @ P[f"{prefix}/attn/{w}"] + P[f"{prefix}/attn/{b}"]) \
                .reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        ctx = softmax(scores, axis=-1) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, T, D)
        return ctx @ P[f"{prefix}/attn/wo"] + P[f"{prefix}/attn/bo"]

    def _block(self, h: Tensor, prefix: str, site: str | None, u: Tensor | None) -> Tensor:
        P = self.params
        if site is not None and self.tsre_cfg.has_conv:
            h = tsre_mod.conv_forward(h, u, tsre_mod.scc_params(P, f"tsre/{site}/conv"))
        h = h + self._attention(self._norm(h, prefix, "ln1", site, u), prefix)
        f = self._norm(h, prefix, "ln2", site, u)
        f = gelu(f @ P[f"{prefix}/ff/w1"] + P[f"{prefix}/ff/b1"])
        return h + (f @ P[f"{prefix}/ff/w2"] + P[f"{prefix}/ff/b2"])

    def forward(self, x, u=None) -> Tensor:
        """Embed ``x`` of shape ``(T, input_dim)`` or ``(B, T, input_dim)``.

        ``u`` (``(speaker_dim,)`` or ``(B, speaker_dim)``) is required exactly
        when an adapter is attached. Returns unit-norm ``(E,)`` or ``(B, E)``.
        """
        cfg = self.cfg
        x = x if isinstance(x, Tensor) else Tensor(x)
        single = x.ndim == 2
        if single:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3 or x.shape[-1] != cfg.input_dim:
            raise ShapeError(f"speech input must be (B, T, {cfg.input_dim}), got {x.shape}")
        if x.shape[1] < 1:
            raise ShapeError("speech input needs at least one frame")
        if self.has_tsre and u is None:
            raise ConditioningError("TSRE adapter attached: a speaker embedding is required")
        if not self.has_tsre and u is not None:
            raise ConditioningError("no TSRE adapter attached: speaker embedding not accepted")
        if u is not None:
            u = u if isinstance(u, Tensor) else Tensor(u)
            if u.ndim == 1:
                u = u.reshape(1, u.shape[0])
            if u.shape != (x.shape[0], cfg.speaker_dim):
                raise ShapeError(f"speaker embedding must be ({x.shape[0]}, {cfg.speaker_dim}),"
                                 f" got {u.shape}")
            sites = {tsre_mod.site_name(i, cfg.num_layers)
                     for i in self.tsre_cfg.resolved_sites(cfg.num_layers)}
        else:
            sites = set()

        P = self.params
        T = x.shape[1]
        h = x @ P["encoder/input/w"] + P["encoder/input/b"] \
            + Tensor(sinusoidal_positions(T, cfg.hidden_dim))
        outputs = [h]
        for i in range(cfg.num_layers):
            name = f"block{i}"
            h = self._block(h, f"encoder/{name}", name if name in sites else None, u)
            outputs.append(h)
        h = weighted_layer_sum(outputs, P["encoder/layer_weights"])
        h = self._block(h, "encoder/head", "head" if "head" in sites else None, u)
        pooled = h.mean(axis=1)
        e = l2_normalize(pooled @ P["encoder/output/w"] + P["encoder/output/b"])
        return e[0] if single else e

    __call__ = forward

    def encode_speech(self, x, u=None) -> Tensor:
        return self.forward(x, u)


class ImageEncoder:
    """Frozen random projection from caption latents to the embedding space."""

    def __init__(self, cfg: EncoderConfig, seed: int):
        self.cfg = cfg
        w = stream(seed, "image/proj").normal(0.0, 1.0 / math.sqrt(cfg.latent_dim),
                                              size=(cfg.latent_dim, cfg.embed_dim))
        self.params = {"image/proj": Tensor(w, requires_grad=False)}

    def encode_image(self, latent) -> Tensor:
        z = latent if isinstance(latent, Tensor) else Tensor(latent)
        if z.shape[-1] != self.cfg.latent_dim:
            raise ShapeError(f"caption latent dim {z.shape[-1]} != {self.cfg.latent_dim}")
        return l2_normalize(z @ self.params["image/proj"]) if z.ndim > 1 else \
            l2_normalize(z.reshape(1, z.shape[0]) @ self.params["image/proj"])[0]

    __call__ = encode_image


class RetrievalModel:
    """Speech tower, frozen image tower and (optionally learnable) temperature."""

    def __init__(self, cfg: EncoderConfig, seed: int, tsre: TSREConfig | None = None,
                 temperature: float = 0.07, learnable_temperature: bool = False):
        self.cfg = cfg
        self.seed = seed
        self.speech = SpeechEncoder(cfg, seed)
        self.image = ImageEncoder(cfg, seed)
        self.log_temperature = Tensor(np.array([math.log(temperature)]),
                                      requires_grad=learnable_temperature)
        if tsre is not None:
            self.speech.attach_tsre(tsre, seed)

    @property
    def tsre_cfg(self) -> TSREConfig | None:
        return self.speech.tsre_cfg

    def parameters(self) -> dict[str, Tensor]:
        """Every tensor that goes into a checkpoint, trainable or not."""
        out = dict(self.speech.params)
        out.update(self.image.params)
        out["loss/log_temperature"] = self.log_temperature
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if v.requires_grad}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        unexpected = sorted(set(arrays) - set(params))
        if strict and (missing or unexpected):
            raise ConfigurationError(f"checkpoint mismatch: missing={missing[:5]} "
                                     f"unexpected={unexpected[:5]}")
        for path, arr in arrays.items():
            if path not in params:
                continue
            if params[path].shape != arr.shape:
                raise ShapeError(f"{path}: checkpoint shape {arr.shape} != model {params[path].shape}")
            params[path].data = np.array(arr, dtype=np.float64)
