"""TOML run configuration with strict key checking.

Sections mirror the dataclasses they feed: ``[train]`` -> :class:`TrainConfig`,
``[model]`` -> :class:`EncoderConfig`, ``[eval]`` -> :class:`EvalConfig`,
plus ``[data]`` and ``[synth]`` for inputs. Omitted keys take the defaults.
"""

from __future__ import annotations

import dataclasses
import difflib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from fei.errors import ConfigError
from fei.evaluation import EvalConfig
from fei.model import EncoderConfig
from fei.pretrain import TrainConfig


@dataclass
class DataSection:
    train: Optional[str] = None
    val: Optional[str] = None
    val_fraction: float = 0.2
    normalize: bool = True
    length: Optional[int] = None
    task: str = "classification"


@dataclass
class EvalDataSection:
    data: Optional[str] = None
    fractions: list = field(default_factory=lambda: [0.6, 0.2, 0.2])
    split_seed: int = 0


@dataclass
class SynthSection:
    num_classes: int = 4
    per_class: int = 500
    length: int = 128
    noise_std: float = 0.1
    seed: int = 0
    min_bin: int = 2
    spacing: int = 3
    freq_shift: int = 0


@dataclass
class RunConfig:
    seed: Optional[int] = None
    data: DataSection = field(default_factory=DataSection)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    eval_data: EvalDataSection = field(default_factory=EvalDataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    source: Optional[str] = None

    def encoder_config(self, in_channels: int, length: int) -> EncoderConfig:
        return EncoderConfig(**{**self.model, "in_channels": in_channels, "length": length})

    def resolved(self) -> dict:
        """Every setting with defaults materialized, ready for a manifest."""
        model_defaults = {f.name: f.default if f.default is not dataclasses.MISSING else f.default_factory()
                          for f in dataclasses.fields(EncoderConfig)}
        return {
            "seed": self.seed,
            "data": dataclasses.asdict(self.data),
            "model": {**model_defaults, **self.model},
            "train": self.train.to_dict(),
            "eval": {**self.eval.to_dict(), **dataclasses.asdict(self.eval_data)},
            "synth": dataclasses.asdict(self.synth),
        }


def suggest(key: str, valid) -> list[str]:
    """Close matches for a misspelled key, underscore-components first (``lr_rate`` -> ``lr``)."""
    valid = list(valid)
    parts = key.split("_")
    component = [v for v in valid if v in parts or key.startswith(v + "_") or key.endswith("_" + v)]
    fuzzy = difflib.get_close_matches(key, valid, n=3, cutoff=0.5)
    return list(dict.fromkeys(component + fuzzy))


def _check_keys(section: str, given: dict, valid) -> None:
    valid = list(valid)
    for key in given:
        if key not in valid:
            hint = suggest(key, valid)
            msg = f"unknown key {key!r} in [{section}]" if section else f"unknown top-level key {key!r}"
            if hint:
                msg += f"; did you mean {hint[0]!r}?"
            raise ConfigError(msg)


def _names(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _build(cls, section: str, values: dict, exclude=()):
    _check_keys(section, values, [n for n in _names(cls) if n not in exclude])
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


EVAL_DATA_KEYS = _names(EvalDataSection)
SECTIONS = ("data", "model", "train", "eval", "synth")


def parse_config(raw: dict, source: Optional[str] = None) -> RunConfig:
    _check_keys("", raw, ["seed", *SECTIONS])
    for name in SECTIONS:
        if name in raw and not isinstance(raw[name], dict):
            raise ConfigError(f"[{name}] must be a table")
    model = dict(raw.get("model", {}))
    _check_keys("model", model, [n for n in _names(EncoderConfig) if n not in ("in_channels", "length")])
    try:
        EncoderConfig(**model)
    except TypeError as exc:
        raise ConfigError(f"[model]: {exc}") from None

    train = dict(raw.get("train", {}))
    seed = raw.get("seed")
    if seed is not None:
        train.setdefault("seed", seed)
    ev = dict(raw.get("eval", {}))
    ev_data = {k: ev.pop(k) for k in list(ev) if k in EVAL_DATA_KEYS}
    _check_keys("eval", ev, [*_names(EvalConfig), *EVAL_DATA_KEYS])
    synth = dict(raw.get("synth", {}))
    if seed is not None:
        ev.setdefault("seed", seed)
        synth.setdefault("seed", seed)

    return RunConfig(
        seed=seed,
        data=_build(DataSection, "data", raw.get("data", {})),
        model=model,
        train=_build(TrainConfig, "train", train),
        eval=_build(EvalConfig, "eval", ev),
        eval_data=_build(EvalDataSection, "eval", ev_data),
        synth=_build(SynthSection, "synth", synth),
        source=source,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = parse_config(raw, source=str(path))
    # relative data paths resolve against the config file's directory
    base = path.parent
    for sec, attr in ((cfg.data, "train"), (cfg.data, "val"), (cfg.eval_data, "data")):
        val = getattr(sec, attr)
        if val is not None and not Path(val).is_absolute():
            setattr(sec, attr, str(base / val))
    return cfg
