"""One JSON document configuring a whole run.

Sections ``encoder``, ``tsre``, ``loss``, ``data`` and ``trainer`` map onto the
corresponding dataclasses; ``seed`` is the global seed. Every key is checked
against the dataclass fields before anything runs, so a typo fails loudly
instead of silently falling back to a default.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .datagen import DataConfig
from .encoder import EncoderConfig
from .numcore import ConfigurationError
from .objective import LossConfig
from .trainer import TrainConfig
from .tsre import TSREConfig

SEED_ENV = "TSRELAB_SEED"
_SECTIONS = {"encoder": EncoderConfig, "tsre": TSREConfig, "loss": LossConfig,
             "data": DataConfig, "trainer": TrainConfig}


def _build(section: str, cls, values: Any):
    if not isinstance(values, dict):
        raise ConfigurationError(f"section {section!r} must be an object, got {type(values).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {section!r}: {unknown}; allowed: {sorted(known)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"bad value in {section!r}: {exc}") from exc


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tsre: TSREConfig | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    seed: int | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigurationError("run config must be a JSON object")
        unknown = sorted(set(doc) - set(_SECTIONS) - {"seed"})
        if unknown:
            raise ConfigurationError(f"unknown top-level key(s): {unknown}")
        kwargs: dict[str, Any] = {}
        for name, sub in _SECTIONS.items():
            if name in doc and doc[name] is not None:
                kwargs[name] = _build(name, sub, doc[name])
        seed = doc.get("seed")
        if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool) or seed < 0):
            raise ConfigurationError(f"seed must be a non-negative integer, got {seed!r}")
        return cls(seed=seed, **kwargs)

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def resolve_seed(self, flag: int | None = None) -> int:
        """``--seed`` flag, then the config file, then ``$TSRELAB_SEED``, then 0."""
        if flag is not None:
            return flag
        if self.seed is not None:
            return self.seed
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                return int(env)
            except ValueError as exc:
                raise ConfigurationError(f"{SEED_ENV}={env!r} is not an integer") from exc
        return 0

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(),
                "tsre": self.tsre.to_dict() if self.tsre else None,
                "loss": asdict(self.loss), "data": self.data.to_dict(),
                "trainer": self.trainer.to_dict(), "seed": self.seed}
