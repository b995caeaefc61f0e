"""Bidirectional contrastive objectives.

``vanilla_clip_loss`` is the symmetric InfoNCE loss over N paired image and
speech embeddings. ``target_speaker_loss`` extends it to mixtures: every
mixture ``n`` is encoded once per enrolled speaker ``q``, giving N x K
conditioned speech embeddings.

* image -> speech: image ``m`` must pick ``e_s[m, p_m]`` out of all N x K
  conditioned embeddings, so the same mixture conditioned on the wrong speaker
  is a hard negative.
* speech -> image: the target-conditioned embedding ``e_s[m, p_m]`` must pick
  image ``m`` out of the N images. Non-target conditions are not anchors.

With K = 1 the two losses coincide exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import ConfigurationError, ShapeError, Tensor, as_tensor, log_softmax, log_sum_exp


class BatchError(ValueError):
    pass


@dataclass
class LossConfig:
    temperature: float = 0.07
    learnable_temperature: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")


@dataclass
class ContrastiveBatch:
    """Image embeddings ``(N, E)``, conditioned speech ``(N, K, E)`` and 0-based targets."""

    image: Tensor
    speech: Tensor
    target: np.ndarray

    def __post_init__(self):
        self.image = as_tensor(self.image)
        self.speech = as_tensor(self.speech)
        self.target = np.asarray(self.target, dtype=np.int64)
        if self.speech.ndim == 2:
            self.speech = self.speech.reshape(self.speech.shape[0], 1, self.speech.shape[1])
        N, K, E = self.speech.shape
        if N == 0:
            raise BatchError("empty batch")
        if self.image.shape != (N, E):
            raise ShapeError(f"image embeddings {self.image.shape} vs speech {self.speech.shape}")
        if self.target.shape != (N,):
            raise BatchError(f"need one target index per sample, got shape {self.target.shape}")
        if np.any(self.target < 0) or np.any(self.target >= K):
            raise BatchError(f"target indices must lie in [0, {K}), got {self.target.tolist()}")

    @property
    def n(self) -> int:
        return self.speech.shape[0]

    @property
    def k(self) -> int:
        return self.speech.shape[1]


def similarity_matrix(a, b) -> Tensor:
    """Cosine similarities of unit-norm rows: ``a @ b.T``."""
    a, b = as_tensor(a), as_tensor(b)
    return a @ b.transpose(1, 0)


def _inv_temperature(cfg: LossConfig, log_temperature: Tensor | None):
    if log_temperature is not None:
        return (-log_temperature).exp()
    return 1.0 / cfg.temperature


def vanilla_clip_loss(e_i, e_s, cfg: LossConfig | None = None,
                      log_temperature: Tensor | None = None) -> Tensor:
    """Mean of image->speech and speech->image cross-entropies over N pairs."""
    cfg = cfg or LossConfig()
    e_i, e_s = as_tensor(e_i), as_tensor(e_s)
    if e_i.shape[0] == 0:
        raise BatchError("empty batch")
    if e_i.shape != e_s.shape:
        raise ShapeError(f"image {e_i.shape} and speech {e_s.shape} embeddings differ in shape")
    N = e_i.shape[0]
    logits = similarity_matrix(e_i, e_s) * _inv_temperature(cfg, log_temperature)
    diag = (np.arange(N), np.arange(N))
    i2s = log_softmax(logits, axis=1)[diag]
    s2i = log_softmax(logits, axis=0)[diag]
    return -(i2s.sum() + s2i.sum()) * (1.0 / (2 * N))


def target_speaker_loss(batch: ContrastiveBatch, cfg: LossConfig | None = None,
                        log_temperature: Tensor | None = None, parts: bool = False):
    """Speaker-conditioned bidirectional loss, averaged over ``2N`` terms.

    With ``parts=True`` also returns the per-sample image->speech and
    speech->image terms as arrays.
    """
    cfg = cfg or LossConfig()
    N, K, E = batch.speech.shape
    inv_t = _inv_temperature(cfg, log_temperature)
    rows = np.arange(N)
    flat = batch.speech.reshape(N * K, E)
    # image -> speech over all N*K conditioned candidates
    logits_is = similarity_matrix(batch.image, flat) * inv_t               # (N, N*K)
    pos_is = logits_is[rows, rows * K + batch.target]
    loss_is = log_sum_exp(logits_is, axis=1) - pos_is
    # speech -> image, anchored on target-conditioned speech only
    anchors = batch.speech[rows, batch.target]                               # (N, E)
    logits_si = similarity_matrix(anchors, batch.image) * inv_t             # (N, N)
    loss_si = log_sum_exp(logits_si, axis=1) - logits_si[rows, rows]
    total = (loss_is.sum() + loss_si.sum()) * (1.0 / (2 * N))
    if parts:
        return total, loss_is.data.copy(), loss_si.data.copy()
    return total
