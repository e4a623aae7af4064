"""Corpus ingest, word windowing, type-disjoint splits and synthetic material.

Alignments and manifests are JSON; audio is 16-bit mono PCM WAV. Samples
carry a fixed-width window cut at the aligned word start, together with
the alignment shifted so that the window starts at time zero.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, IngestError, RangeError, ValidationError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
WINDOW_S = 0.5
STRESS_CLASSES = ("initial", "final")
AUGMENTATION_TAGS = ("none", "lowpass", "snr20", "snr10", "snr3")

_TIME_TOL = 1e-9


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size == 0:
            raise ValidationError("samples", "must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(x)):
            raise ValidationError("samples", "contains non-finite values")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValidationError("sample_rate", f"must be a positive integer, got {self.sample_rate}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def segment(self, start_s: float, end_s: float) -> np.ndarray:
        a = max(int(round(start_s * self.sample_rate)), 0)
        b = min(int(round(end_s * self.sample_rate)), self.samples.size)
        return self.samples[a:b]


@dataclass(frozen=True)
class Phone:
    label: str
    start: float
    end: float
    is_vowel: bool = False
    is_stressed_vowel: bool = False


@dataclass(frozen=True)
class Alignment:
    word_label: str
    word_start: float
    word_end: float
    phones: tuple
    syllable_boundary: float
    stress: str

    def __post_init__(self):
        object.__setattr__(self, "phones", tuple(self.phones))
        self.validate()

    def validate(self):
        if self.stress not in STRESS_CLASSES:
            raise ValidationError("stress", f"must be one of {STRESS_CLASSES}, got {self.stress!r}")
        if not self.word_start <= self.word_end:
            raise ValidationError("word_end", "word_end precedes word_start")
        if not (self.word_start - _TIME_TOL <= self.syllable_boundary <= self.word_end + _TIME_TOL):
            raise ValidationError("syllable_boundary", "outside the word interval")
        prev_end = -np.inf
        for k, ph in enumerate(self.phones):
            if ph.end < ph.start:
                raise ValidationError(f"phones[{k}]", "end precedes start")
            if ph.start < self.word_start - _TIME_TOL or ph.end > self.word_end + _TIME_TOL:
                raise ValidationError(f"phones[{k}]", "not nested in the word interval")
            if ph.start < prev_end - _TIME_TOL:
                raise ValidationError(f"phones[{k}]", "overlaps or precedes the previous phone")
            if ph.is_stressed_vowel and not ph.is_vowel:
                raise ValidationError(f"phones[{k}]", "stressed vowel flag on a non-vowel")
            prev_end = ph.end
        n_stressed = sum(ph.is_stressed_vowel for ph in self.phones)
        if n_stressed != 1:
            raise ValidationError("phones", f"expected exactly one stressed vowel, found {n_stressed}")
        stressed = self.stressed_vowel
        mid = 0.5 * (stressed.start + stressed.end)
        on_initial = mid < self.syllable_boundary
        if on_initial != (self.stress == "initial"):
            raise ValidationError("stress", "stressed vowel lies in the other syllable")

    @property
    def vowels(self) -> list:
        return [ph for ph in self.phones if ph.is_vowel]

    @property
    def stressed_vowel(self) -> Phone:
        return next(ph for ph in self.phones if ph.is_stressed_vowel)

    @property
    def label(self) -> int:
        return STRESS_CLASSES.index(self.stress)

    def initial_final_vowels(self) -> tuple:
        """The vowel of each syllable (first vowel before / after the boundary)."""
        first = [v for v in self.vowels if 0.5 * (v.start + v.end) < self.syllable_boundary]
        second = [v for v in self.vowels if 0.5 * (v.start + v.end) >= self.syllable_boundary]
        if not first or not second:
            raise ValidationError("phones", "both syllables need a vowel")
        return first[0], second[0]

    def shifted(self, offset: float) -> "Alignment":
        return Alignment(
            word_label=self.word_label,
            word_start=self.word_start + offset,
            word_end=self.word_end + offset,
            phones=tuple(dataclasses.replace(p, start=p.start + offset, end=p.end + offset) for p in self.phones),
            syllable_boundary=self.syllable_boundary + offset,
            stress=self.stress,
        )

    def to_dict(self) -> dict:
        return {
            "word_label": self.word_label,
            "word_start": self.word_start,
            "word_end": self.word_end,
            "phones": [dataclasses.asdict(p) for p in self.phones],
            "syllable_boundary": self.syllable_boundary,
            "stress": self.stress,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Alignment":
        try:
            phones = tuple(
                Phone(
                    label=str(p["label"]),
                    start=float(p["start"]),
                    end=float(p["end"]),
                    is_vowel=bool(p.get("is_vowel", False)),
                    is_stressed_vowel=bool(p.get("is_stressed_vowel", False)),
                )
                for p in d["phones"]
            )
            return cls(
                word_label=str(d["word_label"]),
                word_start=float(d["word_start"]),
                word_end=float(d["word_end"]),
                phones=phones,
                syllable_boundary=float(d["syllable_boundary"]),
                stress=str(d["stress"]),
            )
        except KeyError as exc:
            raise ValidationError(str(exc.args[0]), "missing field") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError("alignment", str(exc)) from None


@dataclass(frozen=True)
class Sample:
    clip: AudioClip
    alignment: Alignment
    word_type: str
    source_id: str
    augmentation_tag: str = "none"

    def __post_init__(self):
        if self.augmentation_tag not in AUGMENTATION_TAGS:
            raise ValidationError("augmentation_tag", f"unknown tag {self.augmentation_tag!r}")
        object.__setattr__(self, "word_type", self.word_type.casefold())

    @property
    def label(self) -> int:
        return self.alignment.label


@dataclass(frozen=True)
class DatasetSplit:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        sets = [self.types(part) for part in (self.train, self.validation, self.test)]
        for i in range(3):
            for j in range(i + 1, 3):
                common = sets[i] & sets[j]
                if common:
                    raise ValidationError("word_type", f"types shared across splits: {sorted(common)[:5]}")

    @staticmethod
    def types(samples: Iterable[Sample]) -> set:
        return {s.word_type for s in samples}


# ---------------------------------------------------------------------------
# WAV and manifest IO


def read_wav(path) -> AudioClip:
    """Decode 16-bit mono PCM WAV into samples scaled to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise IngestError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise IngestError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
            if w.getcomptype() != "NONE":
                raise IngestError(f"{path}: compressed WAV not supported")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise IngestError(f"{path}: not a PCM WAV file ({exc})") from None
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if data.size == 0:
        raise IngestError(f"{path}: no audio frames")
    return AudioClip(data, rate)


def write_wav(path, clip: AudioClip):
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


def read_alignment(path) -> Alignment:
    with open(path, encoding="utf-8") as fh:
        return Alignment.from_dict(json.load(fh))


def write_alignment(path, alignment: Alignment):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(alignment.to_dict(), fh, indent=1)
        fh.write("\n")


def read_manifest_rows(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            missing = [k for k in ("audio_path", "alignment_path", "word_type", "source_id") if k not in row]
            if missing:
                raise IngestError(f"{path}:{lineno}: missing fields {missing}")
            rows.append(row)
    return rows


def write_manifest(path, rows: Sequence[dict]):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_manifest(path, window_s: float = WINDOW_S) -> list:
    """Load every manifest row as a windowed :class:`Sample`.

    Relative paths are resolved against the manifest's directory. The
    returned alignment is shifted so that the window starts at t = 0.
    """
    path = Path(path)
    base = path.parent
    samples = []
    for lineno, row in enumerate(read_manifest_rows(path), 1):
        where = f"row {lineno} ({row['source_id']})"
        audio_path = base / row["audio_path"]
        align_path = base / row["alignment_path"]
        for p in (audio_path, align_path):
            if not p.is_file():
                raise IngestError(f"{where}: missing file {p}")
        clip = read_wav(audio_path)
        try:
            alignment = read_alignment(align_path)
        except ValidationError as exc:
            raise ValidationError(exc.field, f"{where}: {exc}") from None
        window = extract_word_window(clip, alignment, window_s)
        samples.append(
            Sample(
                clip=window,
                alignment=alignment.shifted(-alignment.word_start),
                word_type=str(row["word_type"]),
                source_id=str(row["source_id"]),
                augmentation_tag=row.get("augmentation_tag", "none"),
            )
        )
    return samples


# ---------------------------------------------------------------------------
# windowing and splitting


def extract_word_window(clip: AudioClip, alignment: Alignment, window_s: float = WINDOW_S) -> AudioClip:
    """Cut ``window_s`` seconds starting at the word onset, zero-padding past the end."""
    if window_s <= 0:
        raise ConfigError(f"window_s must be positive, got {window_s}")
    n = int(round(window_s * clip.sample_rate))
    start = int(round(alignment.word_start * clip.sample_rate))
    if alignment.word_start < 0 or start >= len(clip):
        raise RangeError(f"word_start {alignment.word_start} s outside clip of {clip.duration} s")
    out = np.zeros(n)
    chunk = clip.samples[start : start + n]
    out[: chunk.size] = chunk
    return AudioClip(out, clip.sample_rate)


def split_by_word_type(
    samples: Sequence[Sample], n_train_types: int, n_val_types: int, n_test_types: int, seed: int = 0
) -> DatasetSplit:
    types = sorted({s.word_type for s in samples})
    counts = (n_train_types, n_val_types, n_test_types)
    if any(c < 0 for c in counts) or sum(counts) != len(types):
        raise ConfigError(f"type counts {counts} do not sum to {len(types)} distinct word types")
    order = np.random.default_rng(seed).permutation(len(types))
    shuffled = [types[i] for i in order]
    owner = {}
    for k, t in enumerate(shuffled):
        owner[t] = 0 if k < n_train_types else (1 if k < n_train_types + n_val_types else 2)
    parts = ([], [], [])
    for s in samples:
        parts[owner[s.word_type]].append(s)
    return DatasetSplit(*parts)


def type_counts_from_fractions(n_types: int, fractions=(0.7, 0.15, 0.15)) -> tuple:
    """Integer type counts summing to ``n_types``; rounding remainder goes to train."""
    val = int(round(n_types * fractions[1]))
    test = int(round(n_types * fractions[2]))
    return n_types - val - test, val, test


# ---------------------------------------------------------------------------
# synthetic disyllables


@dataclass(frozen=True)
class SynthParams:
    """Controls for the synthetic two-vowel word generator.

    The stressed/unstressed multipliers scale the vowel's RMS amplitude,
    duration and F0 relative to the base values.
    """

    base_f0: float = 120.0
    formant1_hz: float = 600.0
    formant2_hz: float = 1150.0
    formant3_hz: float = 2500.0
    formant_sigma_hz: float = 90.0
    n_harmonics: int = 12
    vowel_s: float = 0.11
    vowel_rms: float = 0.2
    stressed_amp: float = 1.0
    unstressed_amp: float = 0.45
    stressed_dur: float = 1.6
    unstressed_dur: float = 0.8
    stressed_pitch: float = 1.2
    unstressed_pitch: float = 1.0
    consonant_rms: float = 0.03
    noise_floor: float = 1e-3
    jitter: float = 0.1
    sample_rate: int = SAMPLE_RATE
    clip_s: float = WINDOW_S

    def __post_init__(self):
        for name in ("stressed_amp", "unstressed_amp", "stressed_dur", "unstressed_dur",
                     "stressed_pitch", "unstressed_pitch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.base_f0 <= 0 or self.vowel_s <= 0 or self.n_harmonics < 1:
            raise ConfigError("base_f0, vowel_s and n_harmonics must be positive")


@dataclass(frozen=True)
class VowelPlan:
    start: float
    end: float
    f0: float
    formants: tuple
    rms: float
    stressed: bool


@dataclass(frozen=True)
class DisyllablePlan:
    stress: str
    word_start: float
    word_end: float
    syllable_boundary: float
    vowels: tuple
    consonants: tuple  # (label, start, end)
    formant_sigma_hz: float


_RAMP_S = 0.010
_ONSET_S = 0.04
_GAP_S = 0.06
_CODA_S = 0.03


def plan_disyllable(stress: str, seed: int, params: SynthParams = SynthParams()) -> DisyllablePlan:
    """Draw the timing and source parameters of one synthetic token."""
    if stress not in STRESS_CLASSES:
        raise ConfigError(f"stress must be one of {STRESS_CLASSES}")
    rng = np.random.default_rng(seed)
    j = params.jitter

    def jit():
        return 1.0 + rng.uniform(-j, j)

    f0 = params.base_f0 * jit()
    lead = 0.02 + rng.uniform(0.0, 0.01)
    t = lead
    consonants = [("C", t, t + _ONSET_S)]
    t += _ONSET_S
    vowels = []
    for k in range(2):
        stressed = (k == 0) == (stress == "initial")
        dur = params.vowel_s * (params.stressed_dur if stressed else params.unstressed_dur) * jit()
        rms = params.vowel_rms * (params.stressed_amp if stressed else params.unstressed_amp) * jit()
        pitch = f0 * (params.stressed_pitch if stressed else params.unstressed_pitch)
        formants = (
            params.formant1_hz * (1.0 + 0.5 * j * rng.uniform(-1, 1)),
            params.formant2_hz * (1.0 + 0.5 * j * rng.uniform(-1, 1)),
            params.formant3_hz,
        )
        vowels.append(VowelPlan(t, t + dur, pitch, formants, rms, stressed))
        t += dur
        if k == 0:
            boundary = t + _GAP_S / 2
            consonants.append(("T", t, boundary))
            consonants.append(("S", boundary, t + _GAP_S))
            t += _GAP_S
    consonants.append(("N", t, t + _CODA_S))
    t += _CODA_S
    if t > params.clip_s:
        raise ConfigError(f"word of {t:.3f} s does not fit a {params.clip_s} s clip")
    return DisyllablePlan(stress, lead, t, boundary, tuple(vowels), tuple(consonants), params.formant_sigma_hz)


def _ramp(n: int, sr: int) -> np.ndarray:
    env = np.ones(n)
    r = min(int(round(_RAMP_S * sr)), n // 2)
    if r > 0:
        up = np.linspace(0.0, 1.0, r, endpoint=False)
        env[:r] = up
        env[n - r :] = up[::-1]
    return env


def _render_vowel(v: VowelPlan, sigma: float, n_harm: int, sr: int, rng) -> np.ndarray:
    n = int(round((v.end - v.start) * sr))
    t = np.arange(n) / sr
    x = np.zeros(n)
    for h in range(1, n_harm + 1):
        fh = h * v.f0
        if fh >= sr / 2:
            break
        gain = np.exp(-0.5 * ((fh - v.formants[0]) / sigma) ** 2) + 0.6 * np.exp(
            -0.5 * ((fh - v.formants[1]) / sigma) ** 2
        )
        x += gain * np.sin(2 * np.pi * fh * t + rng.uniform(0, 2 * np.pi))
    rms = np.sqrt(np.mean(x**2))
    if rms > 0:
        x *= v.rms / rms
    return x * _ramp(n, sr)


def render_plan(plan: DisyllablePlan, seed: int, params: SynthParams = SynthParams()) -> AudioClip:
    sr = params.sample_rate
    rng = np.random.default_rng([seed, 1])
    n_total = int(round(params.clip_s * sr))
    x = params.noise_floor * rng.standard_normal(n_total)
    for v in plan.vowels:
        a = int(round(v.start * sr))
        seg = _render_vowel(v, plan.formant_sigma_hz, params.n_harmonics, sr, rng)
        x[a : a + seg.size] += seg
    for _, s, e in plan.consonants:
        a, b = int(round(s * sr)), int(round(e * sr))
        x[a:b] += params.consonant_rms * rng.standard_normal(b - a) * _ramp(b - a, sr)
    return AudioClip(np.clip(x, -1.0, 1.0), sr)


def plan_alignment(plan: DisyllablePlan, word_label: str = "synthetic") -> Alignment:
    phones = [Phone(lbl, s, e) for lbl, s, e in plan.consonants]
    for v in plan.vowels:
        phones.append(Phone("AA1" if v.stressed else "AH0", v.start, v.end, True, v.stressed))
    phones.sort(key=lambda p: p.start)
    return Alignment(word_label, plan.word_start, plan.word_end, tuple(phones), plan.syllable_boundary, plan.stress)


def synthesize_disyllable(stress: str, seed: int, params: SynthParams = SynthParams(), word_label: str = "synthetic"):
    """Synthesize a two-vowel token with stress cues on the requested side.

    Returns ``(clip, alignment)``; identical arguments give bit-identical
    audio.
    """
    plan = plan_disyllable(stress, seed, params)
    return render_plan(plan, seed, params), plan_alignment(plan, word_label)


# vowel qualities (F1, F2) used to give each synthetic word type its own timbre
VOWEL_TABLE = ((700.0, 1150.0), (550.0, 1000.0), (450.0, 1300.0), (650.0, 1350.0), (500.0, 1100.0))


def word_type_params(type_index: int, params: SynthParams = SynthParams()) -> SynthParams:
    f1, f2 = VOWEL_TABLE[type_index % len(VOWEL_TABLE)]
    return dataclasses.replace(params, formant1_hz=f1, formant2_hz=f2)


def synthesize_babble(seed: int, duration_s: float = 2.0, n_talkers: int = 4,
                      params: SynthParams = SynthParams()) -> AudioClip:
    """Multi-talker babble surrogate: overlapped synthetic tokens at random offsets."""
    rng = np.random.default_rng(seed)
    sr = params.sample_rate
    n = int(round(duration_s * sr))
    x = np.zeros(n)
    clip_n = int(round(params.clip_s * sr))
    for talker in range(n_talkers):
        pos = int(rng.integers(0, clip_n))
        k = 0
        while pos < n:
            stress = STRESS_CLASSES[int(rng.integers(0, 2))]
            p = word_type_params(int(rng.integers(0, len(VOWEL_TABLE))), params)
            p = dataclasses.replace(p, base_f0=float(rng.uniform(90, 220)), noise_floor=0.0)
            clip, _ = synthesize_disyllable(stress, seed * 1000 + talker * 100 + k, p)
            seg = clip.samples[: n - pos]
            x[pos : pos + seg.size] += seg
            pos += clip_n
            k += 1
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= 0.5 / peak
    return AudioClip(x, sr)


@dataclass(frozen=True)
class SynthToken:
    source_id: str
    word_type: str
    clip: AudioClip
    alignment: Alignment
    plan: DisyllablePlan
    seed: int

    def sample(self, window_s: float = WINDOW_S) -> Sample:
        window = extract_word_window(self.clip, self.alignment, window_s)
        return Sample(window, self.alignment.shifted(-self.alignment.word_start), self.word_type, self.source_id)


def synthetic_corpus(n_per_class: int, seed: int = 0, tokens_per_type: int = 4,
                     params: SynthParams = SynthParams()) -> list:
    """``n_per_class`` tokens per stress class; word types alternate stress and each owns a vowel quality."""
    if n_per_class < 0 or tokens_per_type < 1:
        raise ConfigError("n_per_class must be >= 0 and tokens_per_type >= 1")
    tokens = []
    n_types = -(-n_per_class // tokens_per_type)
    for cls_idx, stress in enumerate(STRESS_CLASSES):
        made = 0
        for t in range(n_types):
            type_index = 2 * t + cls_idx
            word_type = f"w{type_index:04d}"
            p = word_type_params(type_index, params)
            for k in range(tokens_per_type):
                if made == n_per_class:
                    break
                token_seed = seed * 1_000_003 + type_index * 1000 + k
                plan = plan_disyllable(stress, token_seed, p)
                clip = render_plan(plan, token_seed, p)
                source_id = f"{word_type}_{k:02d}"
                tokens.append(SynthToken(source_id, word_type, clip, plan_alignment(plan, word_type), plan, token_seed))
                made += 1
    return tokens
