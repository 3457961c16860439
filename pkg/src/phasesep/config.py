"""Experiment configuration: JSON on disk, validated, hashed.

Unknown keys are rejected at every nesting level. The hash is the SHA-256
of the canonical JSON of the resolved configuration (output location and
overwrite flag excluded), so reruns into different directories embed the
same hash.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .dataset import SynthSpec
from .experiments import FEATURE_VARIANTS, phase_variant
from .neuralnet import ARCHITECTURES, TrainConfig
from .phase_features import PhaseFeatureConfig
from .separation import WienerConfig
from .stft import StftConfig

__all__ = ["PROFILES", "ConfigError", "ExperimentConfig", "load_config"]

PROFILES = {
    "desk": {"sample_rate": 8000, "fft_size": 512, "hop": 128},
    "paper": {"sample_rate": 44100, "fft_size": 4096, "hop": 1024},
}


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


_DEFAULTS: dict[str, Any] = {
    "profile": "desk",
    "stft": {"window": "hann"},
    "phase_features": "dt+df_shift",
    "architectures": ["amp_only", "joint"],
    "ablation": [],
    "task": "separation",
    "train": {},
    "hidden": 500,
    "context": 5,
    "synth": {"n_dev": 6, "n_test": 4, "duration": 6.0, "channels": 2},
    "corpus": None,
    "seeds": [0],
    "wiener": {},
    "theory": {"lambdas": [0.02], "threshold": 0.01, "tolerance": 0.05},
    "features": {"bins": [1, 2, 3, 4, 8, 16, 32], "histogram_bins": 64},
}

_STFT_KEYS = {"fft_size", "hop", "window", "sample_rate", "center_pad", "gaussian_lambda"}
_SYNTH_KEYS = {"n_dev", "n_test", "duration", "channels"}
_THEORY_KEYS = {"lambdas", "threshold", "tolerance"}
_FEATURE_KEYS = {"bins", "histogram_bins"}
_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)
_WIENER_KEYS = set(WienerConfig.__dataclass_fields__)


def _check_keys(d: dict, allowed: set, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


@dataclass
class ExperimentConfig:
    """Resolved experiment configuration.

    ``raw`` holds the merged JSON document; typed views are exposed as
    properties. ``out`` is where artifacts go and is not part of the hash.
    """

    raw: dict
    out: Path = field(default_factory=lambda: Path("runs"))

    def __post_init__(self):
        self.out = Path(self.out)
        self.validate()

    # -- construction -------------------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict | None = None, out=None, **overrides) -> "ExperimentConfig":
        """Merge ``doc`` over the defaults, then apply non-None ``overrides``."""
        doc = dict(doc or {})
        file_out = doc.pop("out", None)
        out = out if out is not None else file_out
        _check_keys(doc, set(_DEFAULTS), "config")
        raw = copy.deepcopy(_DEFAULTS)
        for key, value in doc.items():
            if isinstance(raw[key], dict) and isinstance(value, dict):
                raw[key].update(value)
            else:
                raw[key] = value
        if overrides.get("profile") is not None:
            raw["profile"] = overrides["profile"]
        if overrides.get("seed") is not None:
            raw["seeds"] = [int(overrides["seed"])]
        return cls(raw, Path(out) if out is not None else Path("runs"))

    def validate(self):
        r = self.raw
        if r["profile"] not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {r['profile']!r}")
        _check_keys(r["stft"], _STFT_KEYS, "stft")
        _check_keys(r["synth"], _SYNTH_KEYS, "synth")
        _check_keys(r["theory"], _THEORY_KEYS, "theory")
        _check_keys(r["features"], _FEATURE_KEYS, "features")
        _check_keys(r["train"], _TRAIN_KEYS, "train")
        _check_keys(r["wiener"], _WIENER_KEYS, "wiener")
        for arch in r["architectures"]:
            if arch not in ARCHITECTURES:
                raise ConfigError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
        for v in [r["phase_features"], *r["ablation"]]:
            if v not in FEATURE_VARIANTS:
                raise ConfigError(f"unknown phase variant {v!r}; choose from {FEATURE_VARIANTS}")
        if r["task"] not in ("separation", "clean"):
            raise ConfigError("task must be 'separation' or 'clean'")
        if not r["seeds"] or not all(isinstance(s, int) and s >= 0 for s in r["seeds"]):
            raise ConfigError("seeds must be a non-empty list of non-negative integers")
        if int(r["synth"]["n_dev"]) < 1 or int(r["synth"]["n_test"]) < 0:
            raise ConfigError("synth needs n_dev >= 1 and n_test >= 0")
        try:
            self.stft_config
            self.train_config
            self.wiener_config
            self.synth_spec
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    # -- typed views --------------------------------------------------------

    @property
    def stft_config(self) -> StftConfig:
        params = dict(PROFILES[self.raw["profile"]])
        params.update(self.raw["stft"])
        return StftConfig(**params)

    @property
    def phase_config(self) -> PhaseFeatureConfig:
        return phase_variant(self.raw["phase_features"], self.stft_config)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.raw["train"])

    @property
    def wiener_config(self) -> WienerConfig:
        return WienerConfig(**self.raw["wiener"])

    @property
    def synth_spec(self) -> SynthSpec:
        s = self.raw["synth"]
        return SynthSpec(duration=float(s["duration"]), sample_rate=self.stft_config.sample_rate,
                         channels=int(s["channels"]))

    @property
    def seeds(self) -> list[int]:
        return list(self.raw["seeds"])

    @property
    def corpus_root(self) -> Path:
        c = self.raw["corpus"]
        return Path(c) if c else self.out / "corpus"

    # -- hashing ------------------------------------------------------------

    def canonical_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def stamp(self, **extra) -> dict:
        """Metadata embedded in every output."""
        meta = {"config_hash": self.hash[:16], "profile": self.raw["profile"]}
        meta.update(extra)
        return meta


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a JSON config (or use defaults when ``path`` is None).

    Raises
    ------
    ConfigError
        The file is not valid JSON or fails validation.
    """
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(doc, **overrides)
