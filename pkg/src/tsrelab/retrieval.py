"""Recall@K evaluation in both retrieval directions."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import Corpus, MixtureSample
from .encoder import RetrievalModel
from .numcore import ConfigurationError, ShapeError, no_grad

DEFAULT_KS = (1, 5, 10)
PROTOCOLS = ("single", "target")
SPEECH_TO_IMAGE = "speech->image"
IMAGE_TO_SPEECH = "image->speech"


@dataclass
class RecallReport:
    direction: str
    recall: dict[int, float]
    n_queries: int
    protocol: str = "single"
    config_digest: str = ""
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall"] = {str(k): v for k, v in self.recall.items()}
        return d


class EmbeddingIndex:
    """Unit-norm vectors with unique ids; brute-force cosine search."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray, atol: float = 1e-9):
        vectors = np.asarray(vectors, dtype=np.float64)
        if len(set(ids)) != len(ids):
            raise ValueError("index ids must be unique")
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise ShapeError(f"{len(ids)} ids but vectors of shape {vectors.shape}")
        if np.any(np.abs(np.linalg.norm(vectors, axis=1) - 1.0) > atol):
            raise ValueError("index rows must be unit-norm")
        self.ids = list(ids)
        self.vectors = vectors

    def __len__(self) -> int:
        return len(self.ids)

    def similarities(self, queries: np.ndarray) -> np.ndarray:
        return np.atleast_2d(queries) @ self.vectors.T

    def search(self, query: np.ndarray, k: int) -> list[tuple[str, float]]:
        sims = self.similarities(query)[0]
        order = np.lexsort((np.arange(len(sims)), -sims))[:k]
        return [(self.ids[i], float(sims[i])) for i in order]


def gold_ranks(sims: np.ndarray, gold) -> np.ndarray:
    """0-based rank of each query's best gold candidate.

    A candidate outranks the gold one if its similarity is larger, or equal
    with a smaller column index.
    """
    sims = np.asarray(sims, dtype=np.float64)
    Q, C = sims.shape
    ranks = np.empty(Q, dtype=np.int64)
    cols = np.arange(C)
    for q in range(Q):
        golds = [gold[q]] if np.isscalar(gold[q]) else list(gold[q])
        if not golds:
            raise ValueError(f"query {q} has no gold candidate")
        best = C
        for g in golds:
            if not 0 <= g < C:
                raise ValueError(f"gold index {g} out of range for {C} candidates")
            s = sims[q, g]
            r = int(np.sum(sims[q] > s) + np.sum((sims[q] == s) & (cols < g)))
            best = min(best, r)
        ranks[q] = best
    return ranks


def recall_at_k(sims, gold, ks: Sequence[int] = DEFAULT_KS, direction: str = SPEECH_TO_IMAGE,
                protocol: str = "single", config_digest: str = "") -> RecallReport:
    """Fraction of queries whose gold candidate ranks in the top k.

    ``k`` larger than the candidate count is clamped, and the clamp is noted in
    ``warnings``.
    """
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 2 or sims.shape[0] != len(gold):
        raise ShapeError(f"similarities {sims.shape} vs {len(gold)} gold entries")
    ranks = gold_ranks(sims, gold)
    C = sims.shape[1]
    recall, warnings = {}, []
    for k in ks:
        kk = k
        if k > C:
            warnings.append(f"k={k} exceeds {C} candidates; clamped")
            kk = C
        recall[int(k)] = float(np.mean(ranks < kk))
    return RecallReport(direction, recall, len(gold), protocol, config_digest, warnings)


# -- model evaluation -------------------------------------------------------

def encode_images(model: RetrievalModel, corpus: Corpus, image_ids: Sequence[str]) -> np.ndarray:
    with no_grad():
        return model.image(np.stack([corpus.images[i] for i in image_ids])).data.copy()


def encode_samples(model: RetrievalModel, samples: Sequence[MixtureSample], conditioned: bool,
                   batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x = np.stack([s.mixture for s in chunk])
            u = np.stack([s.target_enrollment for s in chunk]) if conditioned else None
            out.append(model.speech(x, u).data.copy())
    return np.concatenate(out, axis=0)


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def evaluate(model: RetrievalModel, corpus: Corpus, split: str, protocol: str,
             ks: Sequence[int] = DEFAULT_KS, digest: str = "") -> tuple[RecallReport, RecallReport]:
    """Speech->image and image->speech recall on one split.

    ``single`` encodes each mixture without conditioning (a clean utterance
    when K = 1, the Base* setting when K > 1) and needs a model without an
    adapter. ``target`` conditions each mixture on its target speaker's
    enrollment and needs an adapter. Gold is always the target caption's image.
    """
    if protocol not in PROTOCOLS:
        raise ConfigurationError(f"unknown protocol {protocol!r}")
    if protocol == "target" and not model.speech.has_tsre:
        raise ConfigurationError("target-speaker protocol needs a model with a TSRE adapter")
    if protocol == "single" and model.speech.has_tsre:
        raise ConfigurationError("single protocol evaluates an unconditioned model; "
                                 "detach the TSRE adapter first")
    samples = corpus.split(split)
    image_ids = corpus.split_images(split)
    col = {iid: j for j, iid in enumerate(image_ids)}
    e_img = encode_images(model, corpus, image_ids)
    e_sp = encode_samples(model, samples, conditioned=(protocol == "target"))
    sims = e_sp @ e_img.T
    s2i_gold = [col[s.target_image_id] for s in samples]
    i2s_gold = [[n for n, s in enumerate(samples) if s.target_image_id == iid] for iid in image_ids]
    s2i = recall_at_k(sims, s2i_gold, ks, SPEECH_TO_IMAGE, protocol, digest)
    i2s = recall_at_k(sims.T, i2s_gold, ks, IMAGE_TO_SPEECH, protocol, digest)
    return s2i, i2s


def write_reports(reports: Sequence[RecallReport], out_dir: str | Path, stem: str = "recall") -> None:
    """JSON list of reports plus a CSV with one row per (protocol, direction, k)."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{stem}.json").write_text(
        json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    with open(d / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["protocol", "direction", "k", "recall", "n_queries", "config_digest"])
        for r in reports:
            for k, v in r.recall.items():
                w.writerow([r.protocol, r.direction, k, repr(v), r.n_queries, r.config_digest])
