"""Region overlap, feature-specific heatmaps, correlation and residual bands.

All maps here are ``[bin, frame]`` matrices in the spectrogram's grid.
Relevance is clamped at zero for mass-type measures (overlap ratio and
residual bands); correlation uses the signed map.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Alignment, DisyllablePlan
from .dsp import Spectrogram
from .errors import ConfigError, DegenerateCorrelationError, RegionError, UndefinedRatioError

REGION_TAGS = ("stressed_vowel", "stressed_other", "unstressed_vowel", "unstressed_other")
FEATURES = ("F0", "F1", "F2", "F3")
BANDS = ("F0-F1", "F1-F2", "F2-F3", "above_F3")
DEFAULT_TAU = 0.05
DEFAULT_PERMUTATIONS = 1000

_EPS_T = 1e-9


def _matrix(m) -> np.ndarray:
    v = getattr(m, "matrix", m)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 3 and v.shape[0] == 1:
        v = v[0]
    if v.ndim != 2:
        raise ConfigError(f"expected a [bin, frame] matrix, got shape {v.shape}")
    return v


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class Region:
    """Half-open frame spans over a bin range; ``spans`` may hold several pieces."""

    tag: str
    spans: tuple
    bins: tuple

    @property
    def n_frames(self) -> int:
        return sum(b - a for a, b in self.spans)

    @property
    def empty(self) -> bool:
        return self.n_frames == 0 or self.bins[1] <= self.bins[0]

    def frame_mask(self, n_frames: int) -> np.ndarray:
        m = np.zeros(n_frames, dtype=bool)
        for a, b in self.spans:
            m[a:b] = True
        return m

    def mask(self, shape) -> np.ndarray:
        n_bins, n_frames = shape
        if self.bins[1] > n_bins or any(b > n_frames for _, b in self.spans):
            raise RegionError(f"region {self.tag} exceeds a {shape} grid")
        m = np.zeros(shape, dtype=bool)
        m[self.bins[0] : self.bins[1], :] = self.frame_mask(n_frames)[None, :]
        return m


def frame_of(t: float, hop_s: float) -> int:
    """Index of the frame whose start is the nearest at or below ``t``."""
    return int(math.floor(t / hop_s + _EPS_T))


def _subtract(span, inner):
    a, b = span
    c, d = max(inner[0], a), min(inner[1], b)
    if c >= d:
        return ((a, b),) if a < b else ()
    return tuple(s for s in ((a, c), (d, b)) if s[0] < s[1])


def make_regions(alignment: Alignment, spec: Spectrogram) -> list:
    """Stressed/unstressed vowel and remainder regions over the full frequency band."""
    hop, n = spec.frame_s, spec.n_frames
    extent = (n - 1) * hop + spec.window_s
    if alignment.word_start < -_EPS_T or alignment.word_end > extent + _EPS_T:
        raise RegionError(f"word [{alignment.word_start}, {alignment.word_end}] outside {extent:.3f} s spectrogram")

    def fr(t):
        return min(max(frame_of(t, hop), 0), n)

    syllables = ((fr(alignment.word_start), fr(alignment.syllable_boundary)),
                 (fr(alignment.syllable_boundary), fr(alignment.word_end)))
    vowels = alignment.initial_final_vowels()
    stressed_idx = 0 if alignment.stress == "initial" else 1
    full = (0, spec.n_bins)
    out = {}
    for k, (syl, v) in enumerate(zip(syllables, vowels)):
        if v.end - v.start < hop - _EPS_T:
            raise RegionError(f"vowel {v.label} shorter than one hop ({v.end - v.start:.4f} s)")
        vspan = (max(fr(v.start), syl[0]), min(fr(v.end), syl[1]))
        if vspan[0] >= vspan[1]:
            raise RegionError(f"vowel {v.label} covers no frames")
        prefix = "stressed" if k == stressed_idx else "unstressed"
        out[f"{prefix}_vowel"] = Region(f"{prefix}_vowel", (vspan,), full)
        out[f"{prefix}_other"] = Region(f"{prefix}_other", _subtract(syl, vspan), full)
    return [out[t] for t in REGION_TAGS]


def iou_mu(rmap, region: Region) -> float:
    """Share of positive relevance mass inside ``region``."""
    m = np.maximum(_matrix(rmap), 0.0)
    total = m.sum()
    if not total > 0:
        raise UndefinedRatioError("relevance map has no positive mass")
    return float(m[region.mask(m.shape)].sum() / total)


def region_mus(rmap, regions: Sequence[Region]) -> dict:
    return {r.tag: iou_mu(rmap, r) for r in regions}


# ---------------------------------------------------------------------------
# feature tracks

_TRACK_COLUMNS = ("time_s", "F0", "F1", "B1", "F2", "B2", "F3", "B3", "intensity_db")


@dataclass(frozen=True, eq=False)
class FeatureTrack:
    """Per-row pitch/formant values; NaN marks an absent (unvoiced) value."""

    time_s: np.ndarray
    F0: np.ndarray
    F1: np.ndarray
    F2: np.ndarray
    F3: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    B3: np.ndarray
    intensity_db: np.ndarray

    def __post_init__(self):
        n = None
        for name in _TRACK_COLUMNS:
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 1 or (n is not None and a.size != n):
                raise ConfigError(f"track column {name} has inconsistent length")
            n = a.size
            object.__setattr__(self, name, a)
        for c, b in (("F1", "B1"), ("F2", "B2"), ("F3", "B3")):
            present = ~np.isnan(getattr(self, c))
            bw = getattr(self, b)[present]
            if np.any(~(bw > 0)):
                raise ConfigError(f"{b} must be > 0 where {c} is present")
        if np.any(np.diff(self.time_s) <= 0):
            raise ConfigError("track times must increase")

    def __len__(self):
        return self.time_s.size

    def center(self, feature: str) -> np.ndarray:
        return getattr(self, feature)

    def bandwidth(self, feature: str) -> np.ndarray:
        return getattr(self, "B" + feature[1])

    def shifted(self, offset: float) -> "FeatureTrack":
        cols = {c: getattr(self, c) for c in _TRACK_COLUMNS}
        cols["time_s"] = self.time_s + offset
        return FeatureTrack(**cols)

    def at_frames(self, spec: Spectrogram) -> "FeatureTrack":
        """Nearest-row resampling at frame centers; frames with no nearby row get absent values."""
        centers = spec.frame_starts() + spec.window_s / 2
        if len(self) == 0:
            idx = np.zeros(centers.size, dtype=int)
            ok = np.zeros(centers.size, dtype=bool)
        else:
            step = np.median(np.diff(self.time_s)) if len(self) > 1 else spec.frame_s
            idx = np.clip(np.searchsorted(self.time_s, centers), 0, len(self) - 1)
            left = np.clip(idx - 1, 0, len(self) - 1)
            closer = np.abs(self.time_s[left] - centers) <= np.abs(self.time_s[idx] - centers)
            idx = np.where(closer, left, idx)
            ok = np.abs(self.time_s[idx] - centers) <= max(step, spec.frame_s) + _EPS_T
        cols = {"time_s": centers}
        for c in _TRACK_COLUMNS[1:]:
            v = getattr(self, c)[idx] if len(self) else np.full(centers.size, np.nan)
            cols[c] = np.where(ok, v, np.nan)
        return FeatureTrack(**cols)


def read_track_csv(path) -> FeatureTrack:
    cols = {c: [] for c in _TRACK_COLUMNS}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in _TRACK_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{path}: missing track columns {missing}")
        for row in reader:
            for c in _TRACK_COLUMNS:
                v = (row[c] or "").strip()
                cols[c].append(float(v) if v not in ("", "--undefined--") else np.nan)
    return FeatureTrack(**{c: np.array(v, dtype=np.float64) for c, v in cols.items()})


def write_track_csv(path, track: FeatureTrack):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_TRACK_COLUMNS)
        for k in range(len(track)):
            w.writerow(["" if np.isnan(v) else f"{v:.6f}" for v in (getattr(track, c)[k] for c in _TRACK_COLUMNS)])


def synthetic_track(plan: DisyllablePlan, samples: np.ndarray, sample_rate: int, step_s: float = 0.005,
                    f3_bandwidth: float = 200.0) -> FeatureTrack:
    """Ground-truth track of a synthetic token in its source time axis."""
    n = samples.size
    times = np.arange(step_s, n / sample_rate - step_s / 2, step_s)
    half = int(round(0.0125 * sample_rate))
    bw = 2.0 * math.sqrt(2.0 * math.log(2.0)) * plan.formant_sigma_hz
    rows = {c: np.full(times.size, np.nan) for c in _TRACK_COLUMNS[1:]}
    for k, t in enumerate(times):
        c = int(round(t * sample_rate))
        seg = samples[max(c - half, 0) : c + half]
        r = math.sqrt(float(np.mean(seg**2))) if seg.size else 0.0
        rows["intensity_db"][k] = max(20.0 * math.log10(r / 2e-5), 0.0) if r > 0 else 0.0
        for v in plan.vowels:
            if v.start <= t < v.end:
                rows["F0"][k] = v.f0
                rows["F1"][k], rows["F2"][k], rows["F3"][k] = v.formants
                rows["B1"][k] = rows["B2"][k] = bw
                rows["B3"][k] = f3_bandwidth
    return FeatureTrack(time_s=times, **rows)


# ---------------------------------------------------------------------------
# feature heatmaps


def all_subsets() -> list:
    """The 15 nonempty subsets of the four features, as sorted tuples."""
    return [c for k in range(1, 5) for c in itertools.combinations(FEATURES, k)]


def subset_label(subset) -> str:
    return "+".join(sorted(subset))


def _feature_bins(feature, center, bandwidth, bin_hz, n_bins):
    if feature == "F0":
        k = int(round(center / bin_hz))
        lo, hi = k - 1, k + 1
    else:
        if not bandwidth > 0:
            return None
        lo = int(math.ceil((center - bandwidth / 2) / bin_hz - _EPS_T))
        hi = int(math.floor((center + bandwidth / 2) / bin_hz + _EPS_T))
    lo, hi = max(lo, 0), min(hi, n_bins - 1)
    return (lo, hi) if lo <= hi else None


def feature_heatmap(tracks: FeatureTrack, subset, spec: Spectrogram) -> np.ndarray:
    """Band-limited spectral intensity of the chosen features, in [0, 1].

    Per frame and feature, cells inside ``center +/- bandwidth/2`` get the
    magnitude divided by the band maximum, times the frame intensity
    scaled by its maximum over the track. F0 uses its nearest bin and one
    bin on each side. Several features combine by cell-wise maximum.
    """
    subset = tuple(subset)
    if not subset or any(f not in FEATURES for f in subset):
        raise ConfigError(f"feature subset must be a nonempty selection of {FEATURES}, got {subset}")
    if spec.normalized:
        raise ConfigError("feature heatmaps need the raw magnitude spectrogram")
    mag = spec.values
    n_bins, n_frames = mag.shape
    tr = tracks.at_frames(spec)
    inten = np.nan_to_num(np.maximum(tr.intensity_db, 0.0), nan=0.0)
    top = inten.max() if inten.size else 0.0
    weight = inten / top if top > 0 else np.zeros_like(inten)
    nyquist = (n_bins - 1) * spec.bin_hz
    heat = np.zeros_like(mag, dtype=np.float64)
    for f in subset:
        centers = tr.center(f)
        widths = tr.bandwidth(f) if f != "F0" else np.full(n_frames, np.nan)
        for t in range(n_frames):
            c = centers[t]
            if np.isnan(c) or weight[t] == 0:
                continue
            if not 0 <= c <= nyquist:
                raise ConfigError(f"{f} = {c} Hz outside [0, {nyquist}] at frame {t}")
            span = _feature_bins(f, c, widths[t], spec.bin_hz, n_bins)
            if span is None:
                continue
            band = mag[span[0] : span[1] + 1, t]
            peak = band.max()
            if peak <= 0:
                continue
            vals = band / peak * weight[t]
            cur = heat[span[0] : span[1] + 1, t]
            heat[span[0] : span[1] + 1, t] = np.maximum(cur, vals)
    return heat


# ---------------------------------------------------------------------------
# correlation


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p: float
    feature_subset: tuple = ()
    permutations: int = 0


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    ac, bc = a - a.mean(), b - b.mean()
    den = math.sqrt(float(ac @ ac) * float(bc @ bc))
    if den == 0:
        raise DegenerateCorrelationError("zero variance")
    return float(np.clip((ac @ bc) / den, -1.0, 1.0))


def correlate_region(rmap, feat, region: Region, permutations: int = DEFAULT_PERMUTATIONS, seed: int = 0,
                     feature_subset=()) -> CorrelationResult:
    """Pearson r inside ``region`` with a permutation p-value.

    ``p = (1 + #{|r_perm| >= |r|}) / (1 + permutations)``, shuffling the
    feature cells within the region.
    """
    m, f = _matrix(rmap), _matrix(feat)
    if m.shape != f.shape:
        raise ConfigError(f"map {m.shape} and feature heatmap {f.shape} differ in shape")
    mask = region.mask(m.shape)
    if not mask.any():
        raise RegionError(f"region {region.tag} is empty")
    a, b = m[mask], f[mask]
    if a.std() == 0 or b.std() == 0:
        raise DegenerateCorrelationError(f"zero variance inside region {region.tag}")
    r = pearson(a, b)
    hits = 0
    if permutations > 0:
        rng = np.random.default_rng(seed)
        ac = a - a.mean()
        bc = b - b.mean()
        den = math.sqrt(float(ac @ ac) * float(bc @ bc))
        chunk = max(1, 2_000_000 // a.size)
        done = 0
        while done < permutations:
            k = min(chunk, permutations - done)
            shuffled = rng.permuted(np.broadcast_to(bc, (k, bc.size)), axis=1)
            rp = (shuffled @ ac) / den
            hits += int(np.count_nonzero(np.abs(rp) >= abs(r)))
            done += k
    p = (1 + hits) / (1 + permutations)
    return CorrelationResult(r, p, tuple(feature_subset), permutations)


# ---------------------------------------------------------------------------
# residual distribution


@dataclass(frozen=True)
class ResidualBands:
    fractions: dict
    mass: float
    n_cells: int
    unassigned_mass: float = 0.0

    @property
    def empty(self) -> bool:
        return self.n_cells == 0 or self.mass == 0


def residual_mask(rmap, combined_feat, region: Region, tau: float = DEFAULT_TAU) -> np.ndarray:
    if not 0 < tau < 1:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")
    m, f = np.maximum(_matrix(rmap), 0.0), _matrix(combined_feat)
    mask = region.mask(m.shape)
    if not mask.any():
        raise RegionError(f"region {region.tag} is empty")
    thresh = tau * f[mask].max()
    return mask & (m > 0) & (f <= thresh)


def residual_distribution(rmap, combined_feat, tracks: FeatureTrack, region: Region, spec: Spectrogram,
                          tau: float = DEFAULT_TAU) -> ResidualBands:
    """Split unexplained positive relevance in ``region`` into formant bands.

    A cell is unexplained when the combined feature heatmap there is at most
    ``tau`` times its regional maximum. Cells below F0 count toward the
    F0-F1 band; frames lacking F1-F3 leave their cells unassigned.
    """
    m = np.maximum(_matrix(rmap), 0.0)
    res = residual_mask(m, combined_feat, region, tau)
    tr = tracks.at_frames(spec)
    freqs = spec.bin_frequencies()
    mass = np.zeros(len(BANDS))
    unassigned = 0.0
    for t in np.flatnonzero(res.any(axis=0)):
        cells = np.flatnonzero(res[:, t])
        w = m[cells, t]
        f1, f2, f3 = tr.F1[t], tr.F2[t], tr.F3[t]
        if np.isnan(f1) or np.isnan(f2) or np.isnan(f3):
            unassigned += float(w.sum())
            continue
        band = np.searchsorted(np.array([f1, f2, f3]), freqs[cells], side="right")
        np.add.at(mass, band, w)
    total = float(mass.sum())
    fr = mass / total if total > 0 else np.zeros_like(mass)
    return ResidualBands(dict(zip(BANDS, fr.tolist())), total, int(res.sum()), unassigned)


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class SubsetRow:
    subset: tuple
    mean_r: float
    mean_p: float
    n: int


def subset_table(results: Sequence[CorrelationResult]) -> list:
    """Mean r and p per feature subset, sorted by mean r (descending)."""
    groups = {}
    for res in results:
        groups.setdefault(tuple(res.feature_subset), []).append(res)
    rows = [SubsetRow(k, float(np.mean([x.r for x in v])), float(np.mean([x.p for x in v])), len(v))
            for k, v in groups.items()]
    rows.sort(key=lambda row: (-row.mean_r, subset_label(row.subset)))
    return rows


@dataclass
class SampleAnalysis:
    source_id: str
    stress: str
    mus: dict
    correlations: list = field(default_factory=list)
    residual: ResidualBands | None = None
    skipped_subsets: list = field(default_factory=list)


def analyze_sample(rmap, spec: Spectrogram, alignment: Alignment, track: FeatureTrack | None = None,
                   permutations: int = DEFAULT_PERMUTATIONS, seed: int = 0, tau: float = DEFAULT_TAU,
                   source_id: str = "") -> SampleAnalysis:
    """Overlap ratios for the four regions, plus feature correlations and
    residual bands in the stressed vowel when a track is given."""
    regions = make_regions(alignment, spec)
    out = SampleAnalysis(source_id, alignment.stress, region_mus(rmap, regions))
    if track is None:
        return out
    vowel = regions[0]
    for subset in all_subsets():
        heat = feature_heatmap(track, subset, spec)
        try:
            out.correlations.append(correlate_region(rmap, heat, vowel, permutations, seed, subset))
        except DegenerateCorrelationError:
            out.skipped_subsets.append(subset)
    combined = feature_heatmap(track, FEATURES, spec)
    if combined[vowel.mask(combined.shape)].max() > 0:
        out.residual = residual_distribution(rmap, combined, track, vowel, spec, tau)
    return out
