"""Run configuration: one YAML file, strictly validated.

Unknown keys anywhere in the document are rejected with the offending path
(fail-closed), so typos cannot silently fall back to defaults. The document
shape:

    seed: 7
    mode: CDVAE_CLS_GAN
    paths: {corpus_root: ..., output_root: ..., checkpoint: ...}
    arch: {...ArchConfig fields...}
    train: {...TrainConfig fields except mode...}
    synth: {...SynthConfig fields...}
    conversion: {path: MCC_MCC, pairs: [...], all_pairs: false, gv_postfilter: false, split: test}
    evaluation: {metrics: [...], silence_threshold_db: 40.0, split: test}
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import yaml

from .errors import ConfigError
from .modes import Mode
from .networks import ArchConfig
from .objectives import LossWeights
from .synthetic import SynthConfig
from .training import TrainConfig

_DOMAIN_KEYS = {"SP", "MCC"}

_ARCH_KEYS = {f.name for f in dataclasses.fields(ArchConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"mode"}
_SYNTH_KEYS = {f.name for f in dataclasses.fields(SynthConfig)}
_WEIGHT_KEYS = {f.name for f in dataclasses.fields(LossWeights)}
_TERM_KEYS = {"recon_in", "kld", "recon_cross", "lat_sim",
              "recon_in_SP", "recon_in_MCC", "kld_SP", "kld_MCC"}

SCHEMA = {
    "seed": None,
    "mode": None,
    "paths": {"corpus_root": None, "output_root": None, "checkpoint": None},
    "arch": {k: None for k in _ARCH_KEYS},
    "train": {
        **{k: None for k in _TRAIN_KEYS},
        "weights": {k: None for k in _WEIGHT_KEYS},
        "term_weights": {k: None for k in _TERM_KEYS},
    },
    "synth": {k: None for k in _SYNTH_KEYS},
    "conversion": {"path": None, "pairs": None, "all_pairs": None, "gv_postfilter": None, "split": None},
    "evaluation": {"metrics": None, "silence_threshold_db": None, "split": None},
}


def _validate_keys(doc, schema, prefix=""):
    if not isinstance(doc, dict) or schema is None:
        return
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key: {path}")
        sub = schema[key]
        if isinstance(sub, dict):
            _validate_keys(value, sub, prefix=f"{path}.")
        elif path.startswith("arch.") and isinstance(value, dict) and key.endswith(("_dims", "_channels")):
            bad = set(value) - _DOMAIN_KEYS
            if bad:
                raise ConfigError(f"unknown config key: {path}.{sorted(bad)[0]}")


@dataclasses.dataclass
class RunConfig:
    seed: int = 1234
    mode: Mode = Mode.CDVAE_CLS_GAN
    paths: dict = dataclasses.field(default_factory=dict)
    arch: ArchConfig = dataclasses.field(default_factory=ArchConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)
    conversion: dict = dataclasses.field(default_factory=dict)
    evaluation: dict = dataclasses.field(default_factory=dict)

    @property
    def corpus_root(self) -> Path:
        return Path(self.paths.get("corpus_root", "corpus"))

    @property
    def output_root(self) -> Path:
        return Path(self.paths.get("output_root", "out"))

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.paths.get("checkpoint", self.output_root / "checkpoint.pt"))


def load_config(path, seed: int | None = None, mode: str | None = None) -> RunConfig:
    """Parse and validate the YAML run config; CLI overrides win over the file."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    _validate_keys(doc, SCHEMA)

    run_mode = Mode.from_name(mode if mode is not None else doc.get("mode", "CDVAE_CLS_GAN"))
    train_doc = dict(doc.get("train", {}))
    train_doc["mode"] = run_mode.name
    try:
        arch = ArchConfig.from_dict(doc["arch"]) if "arch" in doc else ArchConfig()
        train = TrainConfig.from_dict(train_doc)
        synth = SynthConfig(**doc.get("synth", {}))
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return RunConfig(
        seed=int(seed if seed is not None else doc.get("seed", 1234)),
        mode=run_mode,
        paths=dict(doc.get("paths", {})),
        arch=arch,
        train=train,
        synth=synth,
        conversion=dict(doc.get("conversion", {})),
        evaluation=dict(doc.get("evaluation", {})),
    )
