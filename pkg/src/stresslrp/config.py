"""Pipeline configuration: one JSON file with a section per concern."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .lrp import rule_from_name
from .nn.network import ARCHITECTURES
from .train import TrainConfig

# read by the command-line front end: flag > environment > config file > default
OUTPUT_DIR_ENV = "STRESSLRP_OUTPUT_DIR"


def _section(cls, d, name):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class Paths:
    output_dir: str = "out"
    manifest: str | None = None
    noise_wav: str | None = None
    tracks_dir: str | None = None


@dataclass(frozen=True)
class SynthSection:
    n_per_class: int = 200
    tokens_per_type: int = 4


@dataclass(frozen=True)
class DspSection:
    word_window_s: float = 0.5
    lowpass_hz: float = 3000.0
    snr_db: tuple = (20.0, 10.0, 3.0)


@dataclass(frozen=True)
class SplitSection:
    train_types: int | None = None
    val_types: int | None = None
    test_types: int | None = None
    fractions: tuple = (0.7, 0.15, 0.15)


@dataclass(frozen=True)
class LrpSection:
    rules: tuple = ("composite", "alpha1", "epsilon", "z")
    epsilon: float = 1e-6
    target: str = "label"
    split: str = "test"


@dataclass(frozen=True)
class AnalysisSection:
    rule: str = "composite"
    tau: float = 0.05
    permutations: int = 1000


@dataclass(frozen=True)
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    synth: SynthSection = field(default_factory=SynthSection)
    dsp: DspSection = field(default_factory=DspSection)
    split: SplitSection = field(default_factory=SplitSection)
    architecture: str = "lenet5"
    train: TrainConfig = field(default_factory=TrainConfig)
    lrp: LrpSection = field(default_factory=LrpSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.synth.n_per_class < 0 or self.synth.tokens_per_type < 1:
            raise ConfigError("synth.n_per_class must be >= 0 and tokens_per_type >= 1")
        if self.dsp.word_window_s <= 0:
            raise ConfigError("dsp.word_window_s must be positive")
        if not 0 < self.dsp.lowpass_hz < 8000:
            raise ConfigError("dsp.lowpass_hz must lie in (0, 8000)")
        fr = self.split.fractions
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1) > 1e-9:
            raise ConfigError("split.fractions must be three nonnegative numbers summing to 1")
        counts = (self.split.train_types, self.split.val_types, self.split.test_types)
        if any(c is None for c in counts) and any(c is not None for c in counts):
            raise ConfigError("give all three split type counts or none")
        for r in self.lrp.rules:
            rule_from_name(r, self.lrp.epsilon)
        rule_from_name(self.analysis.rule, self.lrp.epsilon)
        if self.lrp.target not in ("label", "predicted"):
            raise ConfigError("lrp.target must be 'label' or 'predicted'")
        if self.lrp.split not in ("train", "validation", "test"):
            raise ConfigError("lrp.split must name a split")
        if not 0 < self.analysis.tau < 1:
            raise ConfigError("analysis.tau must lie in (0, 1)")
        if self.analysis.permutations < 1:
            raise ConfigError("analysis.permutations must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration sections {sorted(unknown)}")
        dsp = dict(d.get("dsp") or {})
        if "snr_db" in dsp:
            dsp["snr_db"] = tuple(float(x) for x in dsp["snr_db"])
        split = dict(d.get("split") or {})
        if "fractions" in split:
            split["fractions"] = tuple(split["fractions"])
        lrp = dict(d.get("lrp") or {})
        if "rules" in lrp:
            lrp["rules"] = tuple(lrp["rules"])
        try:
            return cls(
                paths=_section(Paths, d.get("paths"), "paths"),
                synth=_section(SynthSection, d.get("synth"), "synth"),
                dsp=_section(DspSection, dsp, "dsp"),
                split=_section(SplitSection, split, "split"),
                architecture=d.get("architecture", "lenet5"),
                train=_section(TrainConfig, d.get("train"), "train"),
                lrp=_section(LrpSection, lrp, "lrp"),
                analysis=_section(AnalysisSection, d.get("analysis"), "analysis"),
                seed=int(d.get("seed", 0)),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        if path is None:
            return cls()
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    # resolved locations

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir)

    @property
    def corpus_dir(self) -> Path:
        return self.output_dir / "corpus"

    @property
    def manifest_path(self) -> Path:
        return Path(self.paths.manifest) if self.paths.manifest else self.corpus_dir / "manifest.jsonl"

    @property
    def noise_path(self) -> Path:
        return Path(self.paths.noise_wav) if self.paths.noise_wav else self.corpus_dir / "noise.wav"

    @property
    def tracks_dir(self) -> Path:
        return Path(self.paths.tracks_dir) if self.paths.tracks_dir else self.corpus_dir / "tracks"

    @property
    def splits_dir(self) -> Path:
        return self.output_dir / "splits"

    @property
    def checkpoint_path(self) -> Path:
        return self.output_dir / "model" / "model.slrp"
