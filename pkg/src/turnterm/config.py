"""Run configuration: one JSON/TOML document, overridable from the command line.

Precedence (highest first): command-line flags, config file, defaults below.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from . import __version__
from .errors import ConfigInvalid


@dataclass
class RunConfig:
    manifest: str = ""
    media_root: str = ""
    out: str = "runs/default"
    asr_cache: str = ""
    embedding_cache: str = ""
    asr: str = "synthetic"
    asr_params: dict = field(default_factory=dict)
    audio_provider: str = "stub-audio"
    audio_params: dict = field(default_factory=dict)
    text_provider: str = "stub-text"
    text_params: dict = field(default_factory=dict)
    window: float = 3.0
    head: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    architectures: list = field(default_factory=lambda: ["TO", "AO", "EF", "LF", "AF"])
    train_settings: list = field(default_factory=lambda: ["ref_auto", "ref_man", "3s_auto"])
    test_settings: list = field(default_factory=lambda: ["ref_auto", "ref_man", "3s_auto"])
    n_seeds: int = 10
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if not self.media_root and self.manifest:
            self.media_root = str(Path(self.manifest).resolve().parent)
        if not self.asr_cache:
            self.asr_cache = str(Path(self.out) / "cache" / "asr")
        if not self.embedding_cache:
            self.embedding_cache = str(Path(self.out) / "cache" / "embeddings")
        if self.asr == "synthetic" and "corpus_dir" not in self.asr_params and self.media_root:
            self.asr_params = {**self.asr_params, "corpus_dir": self.media_root}

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        # worker count does not change any artifact
        d = {k: v for k, v in self.to_dict().items() if k != "jobs"}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def stamp(self) -> dict:
        return {"toolkit": "turnterm", "version": __version__, "config_hash": self.hash()}

    def validate(self, need_manifest: bool = True) -> None:
        if need_manifest:
            if not self.manifest:
                raise ConfigInvalid("no manifest given")
            if not Path(self.manifest).exists():
                raise ConfigInvalid(f"manifest not found: {self.manifest}")
            if self.media_root and not Path(self.media_root).is_dir():
                raise ConfigInvalid(f"media root is not a directory: {self.media_root}")
        if self.n_seeds < 1:
            raise ConfigInvalid("n_seeds must be >= 1")
        if self.window <= 0:
            raise ConfigInvalid("window must be > 0")

    def write(self, directory) -> Path:
        path = Path(directory) / "config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({**self.to_dict(), "_meta": self.stamp()}, fh, indent=2, sort_keys=True)
        return path


def load_config(path: Optional[str] = None, **overrides) -> RunConfig:
    data: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigInvalid(f"config file not found: {path}")
        try:
            if p.suffix.lower() == ".toml":
                try:
                    import tomllib
                except ImportError:
                    import tomli as tomllib
                with open(p, "rb") as fh:
                    data = tomllib.load(fh)
            else:
                with open(p, encoding="utf-8") as fh:
                    data = json.load(fh)
        except (ValueError, OSError) as exc:
            raise ConfigInvalid(f"cannot parse {path}: {exc}") from exc
    data.pop("_meta", None)
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from exc
