"""Speaker-conditioned adapters: SCL, SCC and SCC-B.

* SCL replaces a LayerNorm scale ``gamma`` by ``w(u) * gamma + b(u)`` where
  ``w`` and ``b`` are affine maps of the speaker embedding ``u``.
* SCC adds a residual depthwise convolution whose kernel is the base kernel
  plus a speaker-dependent delta: ``h + s * conv(h, w_c + FC(u))``.
* SCC-B wraps that convolution between pointwise down/up projections.

All three are exact identities when freshly initialized: FiLM starts at
``w(u) = 1, b(u) = 0``, ``s`` starts at zero and the SCC-B up-projection is
zero. Attaching the adapter to a trained encoder therefore leaves its outputs
untouched until fine-tuning moves them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping

import numpy as np

from .numcore import ConfigurationError, ShapeError, Tensor, conv1d_grouped, layer_norm, stream
from .numcore.ops import LAYER_NORM_EPS

if TYPE_CHECKING:
    from .encoder import EncoderConfig

VARIANTS = ("scl", "scc", "scc-b5", "scc-b3")
DEFAULT_KERNEL = {"scc": 11, "scc-b5": 5, "scc-b3": 3}


@dataclass
class TSREConfig:
    """Which adapter to attach and where.

    ``sites`` lists block indices; ``num_layers`` (one past the last stack
    block) addresses the head block. ``None`` means every block plus the head.
    """

    variant: str = "scc-b3"
    kernel_size: int | None = None
    bottleneck_dim: int | None = None
    sites: list[int] | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown TSRE variant {self.variant!r}; choose from {VARIANTS}")
        if self.variant == "scl":
            return
        k = self.resolved_kernel()
        if k < 1 or k % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd and positive, got {k}")
        fixed = {"scc-b5": 5, "scc-b3": 3}.get(self.variant)
        if fixed is not None and k != fixed:
            raise ConfigurationError(f"{self.variant} requires kernel size {fixed}, got {k}")

    @property
    def has_conv(self) -> bool:
        return self.variant != "scl"

    @property
    def bottleneck(self) -> bool:
        return self.variant.startswith("scc-b")

    def resolved_kernel(self) -> int:
        return self.kernel_size if self.kernel_size is not None else DEFAULT_KERNEL[self.variant]

    def resolved_bottleneck(self, hidden_dim: int) -> int:
        return self.bottleneck_dim if self.bottleneck_dim is not None else hidden_dim // 2

    def resolved_sites(self, num_layers: int) -> list[int]:
        sites = list(range(num_layers + 1)) if self.sites is None else sorted(set(self.sites))
        for s in sites:
            if not 0 <= s <= num_layers:
                raise ConfigurationError(f"insertion site {s} outside 0..{num_layers}")
        return sites

    def to_dict(self) -> dict:
        return {"variant": self.variant, "kernel_size": self.kernel_size,
                "bottleneck_dim": self.bottleneck_dim, "sites": self.sites}


def site_name(index: int, num_layers: int) -> str:
    return "head" if index == num_layers else f"block{index}"


# -- parameter containers ---------------------------------------------------

@dataclass
class FiLMParams:
    """Affine maps ``w(u) = u @ W_w + b_w`` and ``b(u) = u @ W_b + b_b``."""

    w_w: Tensor
    b_w: Tensor
    w_b: Tensor
    b_b: Tensor


@dataclass
class SCLParams:
    film: FiLMParams
    gamma: Tensor
    beta: Tensor


@dataclass
class SCCParams:
    w_c: Tensor            # (C, k) base depthwise kernel
    mod_w: Tensor          # (S, C * k)
    mod_b: Tensor          # (C * k,)
    s: Tensor              # (1,) residual scale
    down_w: Tensor | None = None   # (C_b, D, 1) pointwise
    down_b: Tensor | None = None
    up_w: Tensor | None = None     # (D, C_b, 1) pointwise
    up_b: Tensor | None = None

    @property
    def bottleneck(self) -> bool:
        return self.down_w is not None


def film_params(params: Mapping[str, Tensor], prefix: str) -> FiLMParams:
    return FiLMParams(*(params[f"{prefix}/{n}"] for n in ("w_w", "b_w", "w_b", "b_b")))


def scc_params(params: Mapping[str, Tensor], prefix: str) -> SCCParams:
    get = params.get
    return SCCParams(
        w_c=params[f"{prefix}/w_c"], mod_w=params[f"{prefix}/mod_w"],
        mod_b=params[f"{prefix}/mod_b"], s=params[f"{prefix}/s"],
        down_w=get(f"{prefix}/down_w"), down_b=get(f"{prefix}/down_b"),
        up_w=get(f"{prefix}/up_w"), up_b=get(f"{prefix}/up_b"),
    )


# -- forward passes -----------------------------------------------------------

def _batched_u(u: Tensor, h: Tensor) -> Tensor:
    if u.ndim == 1:
        u = u.reshape(1, u.shape[0])
    if h.ndim == 3 and u.shape[0] != h.shape[0]:
        raise ShapeError(f"speaker batch {u.shape[0]} != hidden batch {h.shape[0]}")
    return u


def conditioned_gamma(u: Tensor, film: FiLMParams, gamma: Tensor) -> Tensor:
    """``gamma' = (u W_w + b_w) * gamma + (u W_b + b_b)`` for a batch of speakers."""
    w = u @ film.w_w + film.b_w
    b = u @ film.w_b + film.b_b
    return w * gamma + b


def scl_forward(h: Tensor, u: Tensor, p: SCLParams, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Speaker-conditioned LayerNorm of ``h`` (``(T, D)`` or ``(B, T, D)``)."""
    if u.shape[-1] != p.film.w_w.shape[0] or h.shape[-1] != p.gamma.shape[0]:
        raise ShapeError(f"scl: h {h.shape}, u {u.shape}, W_w {p.film.w_w.shape}")
    single = h.ndim == 2
    ub = _batched_u(u, h)
    g = conditioned_gamma(ub, p.film, p.gamma)          # (B, D)
    g = g.reshape(g.shape[0], 1, g.shape[1])
    if single:
        g = g[0]
    return layer_norm(h, g, p.beta, eps)


def speaker_kernel(u: Tensor, p: SCCParams) -> Tensor:
    """Per-sample depthwise kernels ``w_c + FC(u)``, shape ``(B, C, 1, k)``."""
    C, k = p.w_c.shape
    delta = (u @ p.mod_w + p.mod_b).reshape(u.shape[0], C, k)
    return (delta + p.w_c).reshape(u.shape[0], C, 1, k)


def _conditioned_residual(h: Tensor, u: Tensor, p: SCCParams) -> Tensor:
    single = h.ndim == 2
    hb = h.reshape(1, *h.shape) if single else h
    ub = _batched_u(u, hb)
    if ub.shape[0] != hb.shape[0]:
        raise ShapeError(f"speaker batch {ub.shape[0]} != hidden batch {hb.shape[0]}")
    if hb.shape[-1] != p.w_c.shape[0]:
        raise ShapeError(f"conv channels {p.w_c.shape[0]} != hidden {hb.shape[-1]}")
    conv = conv1d_grouped(hb, speaker_kernel(ub, p), groups=hb.shape[-1])
    out = hb + p.s * conv
    return out[0] if single else out


def scc_forward(h: Tensor, u: Tensor, p: SCCParams) -> Tensor:
    """``h + s * conv(h, w_c + FC(u))`` with a depthwise convolution."""
    if p.bottleneck:
        raise ConfigurationError("scc_forward expects the full (non-bottleneck) variant")
    return _conditioned_residual(h, u, p)


def sccb_forward(h: Tensor, u: Tensor, p: SCCParams) -> Tensor:
    """Bottleneck variant: down-project, conditioned residual conv, up-project, add."""
    if not p.bottleneck:
        raise ConfigurationError("sccb_forward expects the bottleneck variant")
    if h.shape[-1] != p.down_w.shape[1]:
        raise ShapeError(f"down projection expects {p.down_w.shape[1]} channels, got {h.shape[-1]}")
    low = conv1d_grouped(h, p.down_w, groups=1) + p.down_b
    low = _conditioned_residual(low, u, p)
    return h + (conv1d_grouped(low, p.up_w, groups=1) + p.up_b)


def conv_forward(h: Tensor, u: Tensor, p: SCCParams) -> Tensor:
    return sccb_forward(h, u, p) if p.bottleneck else scc_forward(h, u, p)


# -- initialization and accounting ------------------------------------------

def init_site_params(prefix: str, hidden_dim: int, speaker_dim: int, cfg: TSREConfig,
                     seed: int) -> dict[str, np.ndarray]:
    """Initial arrays for one insertion site (two SCLs, optionally one SCC/SCC-B)."""
    D, S = hidden_dim, speaker_dim
    out: dict[str, np.ndarray] = {}
    for ln in ("ln1", "ln2"):
        out[f"{prefix}/{ln}/w_w"] = np.zeros((S, D))
        out[f"{prefix}/{ln}/b_w"] = np.ones(D)
        out[f"{prefix}/{ln}/w_b"] = np.zeros((S, D))
        out[f"{prefix}/{ln}/b_b"] = np.zeros(D)
    if not cfg.has_conv:
        return out
    k = cfg.resolved_kernel()
    C = cfg.resolved_bottleneck(D) if cfg.bottleneck else D
    conv = f"{prefix}/conv"
    out[f"{conv}/w_c"] = stream(seed, f"{conv}/w_c").normal(0.0, 1.0 / np.sqrt(k), size=(C, k))
    out[f"{conv}/mod_w"] = stream(seed, f"{conv}/mod_w").normal(
        0.0, 1.0 / np.sqrt(S * k), size=(S, C * k))
    out[f"{conv}/mod_b"] = np.zeros(C * k)
    out[f"{conv}/s"] = np.zeros(1)
    if cfg.bottleneck:
        out[f"{conv}/down_w"] = stream(seed, f"{conv}/down_w").normal(
            0.0, 1.0 / np.sqrt(D), size=(C, D, 1))
        out[f"{conv}/down_b"] = np.zeros(C)
        out[f"{conv}/up_w"] = np.zeros((D, C, 1))
        out[f"{conv}/up_b"] = np.zeros(D)
    return out


def count_params(enc: "EncoderConfig", cfg: TSREConfig, paper_accounting: bool | None = None,
                 component: str | None = None) -> int:
    """Trainable TSRE parameters (host encoder excluded).

    ``component`` selects ``"scl"``, ``"conv"`` or ``None`` for both. With
    ``paper_accounting`` (the default under ``enc.paper_scale_preset``) the
    adapter is counted at one insertion block, only the component named by the
    variant is counted (the SCL for ``"scl"``, the convolution otherwise) and
    FiLM bias vectors are left out. Otherwise every parameter that the
    attached adapter would serialize is counted.
    """
    if paper_accounting is None:
        paper_accounting = enc.paper_scale_preset
    D, S = enc.hidden_dim, enc.speaker_dim
    if paper_accounting:
        n_sites = 1
        if component is None:
            component = "scl" if cfg.variant == "scl" else "conv"
    else:
        n_sites = len(cfg.resolved_sites(enc.num_layers))
    film_bias = 0 if paper_accounting else 2 * D
    scl = 2 * (2 * S * D + film_bias)
    conv = 0
    if cfg.has_conv:
        k = cfg.resolved_kernel()
        if cfg.bottleneck:
            C = cfg.resolved_bottleneck(D)
            conv = (C * D + C) + (D * C + D)
        else:
            C = D
        conv += C * k + S * C * k + C * k + 1
    per_site = {"scl": scl, "conv": conv, None: scl + conv}[component]
    return n_sites * per_site
