"""Synthetic spoken-caption corpus with K-speaker mixtures.

The world is built from named random streams, so a ``(DataConfig, seed)`` pair
fixes every array bit for bit:

* Images own a latent vector; each caption latent is the image latent plus a
  small jitter.
* A lexicon assigns each latent coordinate a short frame pattern ("word")
  placed at a fixed onset. Each pattern is zero-mean over its frames plus a
  per-word constant of size ``lexicon_dc``, so an utterance's time average
  still carries caption information for a mean-pooled encoder.
* A speaker is a signature vector. It colors an utterance twice: a per-channel
  timbre gain ``exp(contrast * P sig)`` multiplies the content, and a
  per-channel offset ``Q sig`` is added to every frame.
* Enrollment is the mean of a speaker's enrollment frames (which is the
  offset plus noise, content averages out) through a frozen projection,
  normalized to unit length.
* A mixture is the frame-wise sum of K utterances by distinct speakers, each
  scaled to unit RMS and tail-padded to the longest one.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .numcore import ConfigurationError, stream

SPLITS = ("train", "val", "test")


class InfeasibleCorpusError(ConfigurationError):
    pass


@dataclass
class DataConfig:
    num_images: int = 400
    captions_per_image: int = 1
    num_speakers: int = 40
    k: int = 2
    latent_dim: int = 24
    input_dim: int = 32
    frames: int = 16
    word_frames: int = 4
    signature_dim: int = 8
    speaker_dim: int = 16
    enroll_frames: int = 24
    noise_std: float = 0.05
    ambient_noise_std: float = 0.0
    timbre_contrast: float = 1.0
    offset_scale: float = 3.0
    caption_jitter: float = 0.2
    lexicon_dc: float = 1.0
    split_fractions: tuple[float, float, float] = (0.75, 0.125, 0.125)
    train_passes: int = 1

    def __post_init__(self):
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        if self.k not in (1, 2, 3):
            raise ConfigurationError(f"k must be 1, 2 or 3, got {self.k}")
        for name in ("num_images", "captions_per_image", "num_speakers", "latent_dim",
                     "input_dim", "frames", "word_frames", "signature_dim", "speaker_dim",
                     "enroll_frames", "train_passes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.word_frames > min(self.frames, self.enroll_frames):
            raise ConfigurationError("word_frames longer than an utterance")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9:
            raise ConfigurationError("split_fractions must be three numbers summing to 1")
        if self.noise_std < 0 or self.ambient_noise_std < 0:
            raise ConfigurationError("noise levels must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d


@dataclass
class CaptionLatent:
    caption_id: str
    latent: np.ndarray
    image_id: str


@dataclass
class SpeakerProfile:
    speaker_id: str
    signature: np.ndarray
    enrollment_frames: np.ndarray


@dataclass
class MixtureSample:
    sample_id: str
    split: str
    mixture: np.ndarray
    components: list[tuple[str, str]]
    target: int
    enrollments: list[np.ndarray]
    target_image_id: str
    gains: list[float] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def target_enrollment(self) -> np.ndarray:
        return self.enrollments[self.target]


# -- world ------------------------------------------------------------------

def word_onsets(latent_dim: int, frames: int, word_frames: int) -> np.ndarray:
    span = frames - word_frames
    if latent_dim == 1:
        return np.zeros(1, dtype=int)
    return np.floor(np.arange(latent_dim) * span / (latent_dim - 1) + 1e-9).astype(int)


class SyntheticWorld:
    """Lexicon, speaker coloring maps and the frozen enrollment projection."""

    def __init__(self, cfg: DataConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        L, W, F, G = cfg.latent_dim, cfg.word_frames, cfg.input_dim, cfg.signature_dim
        lex = stream(seed, "world/lexicon").normal(size=(L, W, F))
        lex -= lex.mean(axis=1, keepdims=True)
        lex += cfg.lexicon_dc * stream(seed, "world/lexicon_dc").normal(size=(L, 1, F))
        # unit expected content energy per entry for standard-normal latents
        self.lexicon = lex * math.sqrt(cfg.frames * F / max(np.sum(lex ** 2), 1e-300))
        self.timbre_map = stream(seed, "world/timbre").normal(size=(F, G)) / math.sqrt(G)
        self.offset_map = stream(seed, "world/offset").normal(size=(F, G)) / math.sqrt(G)
        self.enroll_proj = stream(seed, "world/enroll_proj").normal(
            size=(F, cfg.speaker_dim)) / math.sqrt(F)

    def content(self, latent: np.ndarray, frames: int) -> np.ndarray:
        cfg = self.cfg
        out = np.zeros((frames, cfg.input_dim))
        for j, onset in enumerate(word_onsets(cfg.latent_dim, frames, cfg.word_frames)):
            out[onset:onset + cfg.word_frames] += latent[j] * self.lexicon[j]
        return out

    def timbre(self, speaker: SpeakerProfile) -> np.ndarray:
        return np.exp(self.cfg.timbre_contrast * (self.timbre_map @ speaker.signature))

    def offset(self, speaker: SpeakerProfile) -> np.ndarray:
        return self.cfg.offset_scale * (self.offset_map @ speaker.signature)

    def _colored(self, latent: np.ndarray, speaker: SpeakerProfile, frames: int,
                 rng: np.random.Generator) -> np.ndarray:
        x = self.content(latent, frames) * self.timbre(speaker) + self.offset(speaker)
        if self.cfg.noise_std > 0:
            x = x + rng.normal(0.0, self.cfg.noise_std, size=x.shape)
        return x

    def render_utterance(self, caption: CaptionLatent, speaker: SpeakerProfile,
                         seed: int) -> np.ndarray:
        """Frames ``(T, input_dim)`` of ``speaker`` saying ``caption``; ``seed`` drives the noise."""
        rng = stream(seed, f"render/{caption.caption_id}/{speaker.speaker_id}")
        return self._colored(caption.latent, speaker, self.cfg.frames, rng)

    def make_speaker(self, speaker_id: str, segment: int = 0,
                     signature: np.ndarray | None = None) -> SpeakerProfile:
        """Speaker with an enrollment recording of a caption nobody else says."""
        cfg = self.cfg
        sig = stream(self.seed, f"speaker/{speaker_id}").normal(size=cfg.signature_dim) \
            if signature is None else np.asarray(signature, dtype=np.float64)
        profile = SpeakerProfile(speaker_id, sig, np.zeros((cfg.enroll_frames, cfg.input_dim)))
        latent = stream(self.seed, f"enroll/{speaker_id}/{segment}/latent").normal(size=cfg.latent_dim)
        rng = stream(self.seed, f"enroll/{speaker_id}/{segment}/noise")
        profile.enrollment_frames = self._colored(latent, profile, cfg.enroll_frames, rng)
        return profile

    def enroll(self, speaker: SpeakerProfile) -> np.ndarray:
        """Unit-norm speaker embedding from the speaker's enrollment frames."""
        v = speaker.enrollment_frames.mean(axis=0) @ self.enroll_proj
        n = np.linalg.norm(v)
        if n == 0:
            raise ConfigurationError(f"speaker {speaker.speaker_id} has an all-zero enrollment")
        return v / n


# -- mixing -------------------------------------------------------------------

def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def equal_loudness_gains(utterances: Sequence[np.ndarray]) -> list[float]:
    """Gains that bring every utterance to unit RMS."""
    gains = []
    for u in utterances:
        r = rms(u)
        if r == 0:
            raise ConfigurationError("cannot loudness-normalize a silent utterance")
        gains.append(1.0 / r)
    return gains


def mix(utterances: Sequence[np.ndarray], gains: Sequence[float]) -> np.ndarray:
    """Frame-wise ``sum_q gain_q * utterance_q``, tail-padding with zeros to the longest."""
    if not utterances:
        raise ConfigurationError("mix needs at least one utterance")
    if len(gains) != len(utterances):
        raise ConfigurationError(f"{len(utterances)} utterances but {len(gains)} gains")
    T = max(u.shape[0] for u in utterances)
    out = np.zeros((T, utterances[0].shape[1]))
    for u, g in zip(utterances, gains):
        out[:u.shape[0]] += g * u
    return out


# -- corpus -------------------------------------------------------------------

@dataclass
class Corpus:
    config: DataConfig
    seed: int
    images: dict[str, np.ndarray]
    image_split: dict[str, str]
    speakers: dict[str, np.ndarray]
    samples: dict[str, list[MixtureSample]]

    def split(self, name: str) -> list[MixtureSample]:
        return self.samples[name]

    def split_images(self, name: str) -> list[str]:
        return [i for i in sorted(self.images) if self.image_split[i] == name]

    @property
    def k(self) -> int:
        return self.config.k

    def stats(self) -> list[dict]:
        rows = []
        for name in SPLITS:
            samples = self.samples[name]
            rows.append({
                "split": name,
                "images": len(self.split_images(name)),
                "utterances": len(samples),
                "speakers_per_utt": self.config.k,
                "frames": int(sum(s.mixture.shape[0] for s in samples)),
            })
        return rows


def _split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    return n_train, n_val, n - n_train - n_val


def build_corpus(cfg: DataConfig, seed: int) -> Corpus:
    """Deterministic corpus: every caption is the target of ``train_passes``
    (train) or one (val/test) mixture; interferers come from the same split."""
    if cfg.num_speakers < cfg.k:
        raise InfeasibleCorpusError(f"need at least k={cfg.k} speakers, have {cfg.num_speakers}")
    counts = _split_counts(cfg.num_images, cfg.split_fractions)
    if min(counts) < cfg.k:
        raise InfeasibleCorpusError(
            f"every split needs at least k={cfg.k} images, split sizes are {counts}")

    world = SyntheticWorld(cfg, seed)
    image_ids = [f"img{i:05d}" for i in range(cfg.num_images)]
    images = {iid: stream(seed, f"image/{iid}").normal(size=cfg.latent_dim) for iid in image_ids}
    captions: dict[str, CaptionLatent] = {}
    by_image: dict[str, list[str]] = {}
    for iid in image_ids:
        for c in range(cfg.captions_per_image):
            cid = f"{iid}_c{c}"
            jitter = stream(seed, f"caption/{cid}").normal(size=cfg.latent_dim)
            captions[cid] = CaptionLatent(cid, images[iid] + cfg.caption_jitter * jitter, iid)
            by_image.setdefault(iid, []).append(cid)

    order = stream(seed, "split").permutation(cfg.num_images)
    image_split = {}
    bounds = np.cumsum((0,) + counts)
    for s, name in enumerate(SPLITS):
        for i in order[bounds[s]:bounds[s + 1]]:
            image_split[image_ids[i]] = name

    speaker_ids = [f"spk{j:03d}" for j in range(cfg.num_speakers)]
    profiles = {sid: world.make_speaker(sid) for sid in speaker_ids}
    enrolled = {sid: world.enroll(p) for sid, p in profiles.items()}

    samples: dict[str, list[MixtureSample]] = {}
    for name in SPLITS:
        split_imgs = [i for i in image_ids if image_split[i] == name]
        split_caps = [c for i in split_imgs for c in by_image[i]]
        passes = cfg.train_passes if name == "train" else 1
        out = []
        for ps in range(passes):
            for cid in split_caps:
                sid = f"{name}_{ps}_{cid}"
                rng = stream(seed, f"sample/{sid}")
                target_img = captions[cid].image_id
                others = [i for i in split_imgs if i != target_img]
                picked = rng.choice(len(others), size=cfg.k - 1, replace=False)
                interferers = [by_image[others[i]][rng.integers(len(by_image[others[i]]))]
                               for i in picked]
                spk = [speaker_ids[i] for i in rng.choice(len(speaker_ids), size=cfg.k,
                                                           replace=False)]
                target = int(rng.integers(cfg.k))
                caps = list(interferers)
                caps.insert(target, cid)
                seeds = [int(x) for x in rng.integers(0, 2**31 - 1, size=cfg.k)]
                utts = [world.render_utterance(captions[c], profiles[s], sd)
                        for c, s, sd in zip(caps, spk, seeds)]
                gains = equal_loudness_gains(utts)
                x = mix(utts, gains)
                if cfg.ambient_noise_std > 0:
                    x = x + rng.normal(0.0, cfg.ambient_noise_std, size=x.shape)
                out.append(MixtureSample(
                    sample_id=sid, split=name, mixture=x,
                    components=list(zip(spk, caps)), target=target,
                    enrollments=[enrolled[s] for s in spk], target_image_id=target_img,
                    gains=gains, seeds=seeds,
                ))
        samples[name] = out
    return Corpus(cfg, seed, images, image_split, enrolled, samples)


# -- on-disk format -----------------------------------------------------------

MANIFEST = "manifest.jsonl"
STORE = "frames.bin"
META = "corpus.json"


def save_corpus(corpus: Corpus, directory: str | Path) -> None:
    """Write ``manifest.jsonl``, ``frames.bin`` and ``corpus.json`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    offset = 0

    def put(path: str, arr: np.ndarray) -> dict:
        nonlocal offset
        arrays[path] = arr
        entry = {"path": path, "offset": offset, "shape": list(arr.shape)}
        offset += 8 * arr.size
        return entry

    lines = []
    for name in SPLITS:
        for s in corpus.samples[name]:
            frames = put(f"mixture/{s.sample_id}", s.mixture)
            lines.append(container.dumps_json({
                "sample_id": s.sample_id, "split": s.split, "k": s.k,
                "components": [{"speaker_id": spk, "caption_id": cap, "gain": g, "seed": sd}
                               for (spk, cap), g, sd in zip(s.components, s.gains, s.seeds)],
                "target_index": s.target, "target_image_id": s.target_image_id,
                "frames": frames,
            }))
    for iid in sorted(corpus.images):
        put(f"image/{iid}", corpus.images[iid])
    for spk in sorted(corpus.speakers):
        put(f"enrollment/{spk}", corpus.speakers[spk])
    meta = {"config": corpus.config.to_dict(), "seed": corpus.seed,
            "image_split": corpus.image_split}
    container.save(d / STORE, arrays, meta)
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    (d / META).write_text(json.dumps({"config": corpus.config.to_dict(), "seed": corpus.seed,
                                      "stats": corpus.stats()}, indent=2, sort_keys=True) + "\n")


def load_corpus(directory: str | Path) -> Corpus:
    d = Path(directory)
    arrays, meta = container.load(d / STORE)
    cfg = DataConfig(**meta["config"])
    images = {p.split("/", 1)[1]: a for p, a in arrays.items() if p.startswith("image/")}
    speakers = {p.split("/", 1)[1]: a for p, a in arrays.items() if p.startswith("enrollment/")}
    samples: dict[str, list[MixtureSample]] = {name: [] for name in SPLITS}
    for line in (d / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        comps = [(c["speaker_id"], c["caption_id"]) for c in rec["components"]]
        samples[rec["split"]].append(MixtureSample(
            sample_id=rec["sample_id"], split=rec["split"],
            mixture=arrays[rec["frames"]["path"]], components=comps,
            target=rec["target_index"], enrollments=[speakers[s] for s, _ in comps],
            target_image_id=rec["target_image_id"],
            gains=[c["gain"] for c in rec["components"]],
            seeds=[c["seed"] for c in rec["components"]],
        ))
    return Corpus(cfg, meta["seed"], images, meta["image_split"], speakers, samples)


def directory_digest(directory: str | Path) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(directory).iterdir()):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# -- validation helpers -------------------------------------------------------

def linear_probe_accuracy(cfg: DataConfig, seed: int, n_captions: int = 50,
                          n_train_speakers: int = 15, n_test_speakers: int = 5,
                          ridge: float = 1e-2) -> float:
    """Ridge-regress caption latents from clean utterances of training speakers,
    then classify held-out speakers' utterances by nearest caption latent."""
    world = SyntheticWorld(cfg, seed)
    caps = [CaptionLatent(f"probe{c}", stream(seed, f"probe/caption/{c}").normal(
        size=cfg.latent_dim), f"probe{c}") for c in range(n_captions)]
    speakers = [world.make_speaker(f"probe_spk{j}") for j in range(n_train_speakers + n_test_speakers)]

    def design(spks):
        X, Y, labels = [], [], []
        for s in spks:
            for i, c in enumerate(caps):
                X.append(world.render_utterance(c, s, seed).reshape(-1))
                Y.append(c.latent)
                labels.append(i)
        X = np.array(X)
        return np.hstack([X, np.ones((len(X), 1))]), np.array(Y), np.array(labels)

    Xtr, Ytr, _ = design(speakers[:n_train_speakers])
    Xte, _, lte = design(speakers[n_train_speakers:])
    W = np.linalg.solve(Xtr.T @ Xtr + ridge * np.eye(Xtr.shape[1]), Xtr.T @ Ytr)
    pred = Xte @ W
    lat = np.array([c.latent for c in caps])
    pred /= np.linalg.norm(pred, axis=1, keepdims=True)
    lat /= np.linalg.norm(lat, axis=1, keepdims=True)
    return float(np.mean(np.argmax(pred @ lat.T, axis=1) == lte))
