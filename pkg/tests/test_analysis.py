import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stresslrp import analysis as A
from stresslrp.corpus import synthesize_disyllable
from stresslrp.dsp import Spectrogram, stft_magnitude
from stresslrp.errors import ConfigError, DegenerateCorrelationError, RegionError, UndefinedRatioError

from conftest import make_alignment

N_BINS, N_FRAMES = 161, 49


def _spec(values=None):
    v = np.ones((N_BINS, N_FRAMES)) if values is None else values
    return Spectrogram(v, 50.0, 0.01, 0.02)


def _track(n=N_FRAMES, **cols):
    times = np.arange(n) * 0.01 + 0.01
    base = {c: np.full(n, np.nan) for c in ("F0", "F1", "F2", "F3", "B1", "B2", "B3")}
    base["intensity_db"] = np.full(n, 60.0)
    for k, v in cols.items():
        base[k] = np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()
    return A.FeatureTrack(time_s=times, **base)


# -- regions -----------------------------------------------------------------


def test_boundary_0_2s_gives_frames_0_to_19():
    regions = A.make_regions(make_alignment(boundary=0.2), _spec())
    first = [r for r in regions if r.tag.startswith("stressed")]
    frames = sorted(set().union(*[set(range(a, b)) for r in first for a, b in r.spans]))
    assert frames == list(range(0, 20))


def test_frame_of_hop_start_below():
    assert A.frame_of(0.2, 0.01) == 20
    assert A.frame_of(0.2049, 0.01) == 20
    assert A.frame_of(0.0, 0.01) == 0


def test_vowel_spanning_syllable_leaves_other_empty():
    a = make_alignment(word_start=0.05, v1=(0.05, 0.2), v2=(0.25, 0.35), boundary=0.2, word_end=0.4)
    regions = {r.tag: r for r in A.make_regions(a, _spec())}
    assert regions["stressed_other"].empty
    assert regions["stressed_other"].mask((N_BINS, N_FRAMES)).sum() == 0


def test_regions_follow_stress_side():
    a = make_alignment("final")
    regions = {r.tag: r for r in A.make_regions(a, _spec())}
    assert regions["stressed_vowel"].spans == ((25, 35),)
    assert regions["unstressed_vowel"].spans == ((5, 15),)
    assert regions["stressed_vowel"].bins == (0, N_BINS)


def test_short_vowel_is_region_error():
    a = make_alignment(v1=(0.05, 0.052))
    with pytest.raises(RegionError):
        A.make_regions(a, _spec())


def test_word_outside_spectrogram_is_region_error():
    a = make_alignment(v2=(0.25, 0.45), word_end=0.6)
    with pytest.raises(RegionError):
        A.make_regions(a, _spec())


@st.composite
def alignments(draw):
    t = sorted(draw(st.lists(st.floats(0.0, 0.49), min_size=6, max_size=6, unique=True)))
    ws, v1s, v1e, b, v2s, v2e = t
    v1e = max(v1e, v1s + 0.011)
    b = max(b, v1e)
    v2s = max(v2s, b)
    v2e = max(v2e, v2s + 0.011)
    we = v2e
    if we > 0.5:
        return make_alignment()
    stress = draw(st.sampled_from(["initial", "final"]))
    return make_alignment(stress, word_start=ws, v1=(v1s, v1e), v2=(v2s, v2e), boundary=b, word_end=we)


@settings(max_examples=60, deadline=None)
@given(a=alignments(), seed=st.integers(0, 1000))
def test_regions_disjoint_and_mu_sum_le_1(a, seed):
    try:
        regions = A.make_regions(a, _spec())
    except RegionError:
        return
    masks = [r.mask((N_BINS, N_FRAMES)) for r in regions]
    total = np.sum(masks, axis=0)
    assert total.max() <= 1
    m = np.random.default_rng(seed).normal(size=(N_BINS, N_FRAMES))
    mus = A.region_mus(m, regions)
    assert sum(mus.values()) <= 1 + 1e-9
    # support inside the word extent gives equality
    inside = np.where(total > 0, np.abs(m), 0.0)
    if inside.sum() > 0:
        assert sum(A.region_mus(inside, regions).values()) == pytest.approx(1.0, abs=1e-12)


# -- mu ----------------------------------------------------------------------


def test_mu_all_inside_is_1():
    region = A.Region("stressed_vowel", ((5, 15),), (0, N_BINS))
    m = np.zeros((N_BINS, N_FRAMES))
    m[:, 5:15] = np.random.default_rng(0).uniform(size=(N_BINS, 10))
    assert A.iou_mu(m, region) == 1.0


def test_mu_uniform_half():
    region = A.Region("x", ((0, 2),), (0, 3))
    assert A.iou_mu(np.ones((3, 4)), region) == pytest.approx(0.5)


def test_mu_random_recount():
    rng = np.random.default_rng(2)
    m = rng.uniform(size=(N_BINS, N_FRAMES))
    region = A.Region("x", ((3, 9), (20, 31)), (0, N_BINS))
    inside = sum(m[i, j] for i in range(N_BINS) for j in list(range(3, 9)) + list(range(20, 31)))
    assert A.iou_mu(m, region) == pytest.approx(inside / m.sum(), abs=1e-12)


def test_mu_clamps_negative_relevance():
    m = np.array([[1.0, -5.0], [1.0, 2.0]])
    assert A.iou_mu(m, A.Region("x", ((1, 2),), (0, 2))) == pytest.approx(0.5)


def test_mu_zero_map_is_undefined():
    with pytest.raises(UndefinedRatioError):
        A.iou_mu(np.zeros((3, 3)), A.Region("x", ((0, 1),), (0, 3)))
    with pytest.raises(UndefinedRatioError):
        A.iou_mu(-np.ones((3, 3)), A.Region("x", ((0, 1),), (0, 3)))


# -- feature tracks and heatmaps ---------------------------------------------


def test_heatmap_zero_intensity():
    tr = _track(F1=500.0, B1=100.0, intensity_db=0.0)
    assert np.all(A.feature_heatmap(tr, ("F1",), _spec()) == 0)


def test_heatmap_f1_band_bins_9_to_11():
    tr = _track(F1=np.where(np.arange(N_FRAMES) == 10, 500.0, np.nan), B1=100.0)
    h = A.feature_heatmap(tr, ("F1",), _spec())
    assert sorted(np.flatnonzero(h[:, 10])) == [9, 10, 11]
    assert np.count_nonzero(h) == 3


def test_heatmap_normalizes_by_band_peak_and_intensity():
    v = np.ones((N_BINS, N_FRAMES))
    v[9:12, 10] = [1.0, 4.0, 2.0]
    db = np.full(N_FRAMES, 30.0)
    db[20] = 60.0
    tr = _track(F1=500.0, B1=100.0, intensity_db=db)
    h = A.feature_heatmap(tr, ("F1",), _spec(v))
    np.testing.assert_allclose(h[9:12, 10], [0.125, 0.5, 0.25])
    np.testing.assert_allclose(h[9:12, 20], [1.0, 1.0, 1.0])


def test_heatmap_f0_uses_nearest_bin_and_neighbors():
    tr = _track(F0=120.0)
    h = A.feature_heatmap(tr, ("F0",), _spec())
    assert sorted(np.flatnonzero(h[:, 0])) == [1, 2, 3]


def test_heatmap_absent_center_contributes_nothing():
    f1 = np.full(N_FRAMES, np.nan)
    f1[4] = 700.0
    h = A.feature_heatmap(_track(F1=f1, B1=120.0), ("F1",), _spec())
    assert np.count_nonzero(h[:, 5:]) == 0 and np.count_nonzero(h[:, 4]) > 0


def test_heatmap_rejects_normalized_spectrogram_and_bad_subset():
    tr = _track(F1=500.0, B1=100.0)
    with pytest.raises(ConfigError):
        A.feature_heatmap(tr, ("F1",), Spectrogram(np.ones((N_BINS, N_FRAMES)), 50.0, 0.01, 0.02, True))
    with pytest.raises(ConfigError):
        A.feature_heatmap(tr, ("F5",), _spec())
    with pytest.raises(ConfigError):
        A.feature_heatmap(tr, (), _spec())


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_heatmap_range_and_max_monotonicity(seed):
    rng = np.random.default_rng(seed)
    tr = _track(F0=rng.uniform(80, 250, N_FRAMES), F1=rng.uniform(300, 900, N_FRAMES),
                F2=rng.uniform(900, 2500, N_FRAMES), F3=rng.uniform(2500, 3500, N_FRAMES),
                B1=rng.uniform(40, 300, N_FRAMES), B2=rng.uniform(40, 300, N_FRAMES),
                B3=rng.uniform(40, 300, N_FRAMES), intensity_db=rng.uniform(0, 80, N_FRAMES))
    spec = _spec(rng.uniform(0, 3, (N_BINS, N_FRAMES)))
    h1 = A.feature_heatmap(tr, ("F1",), spec)
    h12 = A.feature_heatmap(tr, ("F1", "F2"), spec)
    assert np.all(h1 <= h12)
    assert h12.min() >= 0 and h12.max() <= 1


def test_all_subsets_count_and_labels():
    subs = A.all_subsets()
    assert len(subs) == 15 and len(set(subs)) == 15
    assert A.subset_label(("F2", "F1")) == "F1+F2"


def test_track_csv_round_trip(tmp_path):
    f1 = np.full(N_FRAMES, 500.0)
    f1[3] = np.nan
    tr = _track(F1=f1, B1=80.0)
    A.write_track_csv(tmp_path / "t.csv", tr)
    back = A.read_track_csv(tmp_path / "t.csv")
    np.testing.assert_allclose(back.F1, tr.F1, equal_nan=True)
    np.testing.assert_allclose(back.intensity_db, tr.intensity_db)
    assert np.isnan(back.F2).all()


def test_track_rejects_nonpositive_bandwidth():
    with pytest.raises(ConfigError):
        _track(F1=500.0, B1=0.0)


def test_track_at_frames_nearest_row():
    times = np.array([0.0, 0.1, 0.2])
    tr = A.FeatureTrack(times, [100.0, 110.0, 120.0], *[np.full(3, np.nan)] * 6, [50.0, 50.0, 50.0])
    spec = _spec()
    res = tr.at_frames(spec)
    # frame 4 centers at 0.05 s: rows at 0.0 and 0.1 are equally near, the earlier wins
    assert res.F0[4] == 100.0 and res.F0[9] == 110.0
    # frames whose centers are far past the last row get absent values
    assert np.isnan(res.F0[-1])


def test_synthetic_track_matches_plan():
    from stresslrp.corpus import plan_disyllable

    plan = plan_disyllable("initial", 3)
    clip, _ = synthesize_disyllable("initial", 3)
    tr = A.synthetic_track(plan, clip.samples, 16000)
    v = plan.vowels[0]
    inside = (tr.time_s >= v.start) & (tr.time_s < v.end)
    np.testing.assert_allclose(tr.F1[inside], v.formants[0])
    np.testing.assert_allclose(tr.F0[inside], v.f0)
    assert np.isnan(tr.F1[tr.time_s < plan.vowels[0].start]).all()


# -- correlation -------------------------------------------------------------


def _region():
    return A.Region("stressed_vowel", ((5, 20),), (0, N_BINS))


def test_correlation_identity_and_negation():
    m = np.random.default_rng(0).normal(size=(N_BINS, N_FRAMES))
    res = A.correlate_region(m, m, _region(), permutations=200, seed=1)
    assert res.r == pytest.approx(1.0) and res.p == pytest.approx(1 / 201)
    assert A.correlate_region(m, -m, _region(), permutations=10).r == pytest.approx(-1.0)


def test_correlation_matches_covariance_formula_and_is_symmetric():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(N_BINS, N_FRAMES)), rng.normal(size=(N_BINS, N_FRAMES))
    mask = _region().mask(a.shape)
    x, y = a[mask], b[mask]
    n = x.size
    cov = sum((x[i] - x.mean()) * (y[i] - y.mean()) for i in range(n)) / n
    want = cov / (x.std() * y.std())
    res = A.correlate_region(a, b, _region(), permutations=50, seed=0)
    assert res.r == pytest.approx(want, abs=1e-12)
    assert A.correlate_region(b, a, _region(), permutations=50, seed=9).r == pytest.approx(res.r, abs=1e-12)
    assert 0 < res.p <= 1


def test_correlation_p_recount_against_explicit_shuffles():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(N_BINS, N_FRAMES))
    b = a + rng.normal(0, 30, size=a.shape)
    region = _region()
    res = A.correlate_region(a, b, region, permutations=300, seed=2)
    mask = region.mask(a.shape)
    x, y = a[mask], b[mask]
    # the permutation null of |r| for independent shuffles; p must agree with its tail mass roughly
    null = np.array([abs(np.corrcoef(x, rng.permutation(y))[0, 1]) for _ in range(2000)])
    tail = (1 + np.sum(null >= abs(res.r))) / (1 + null.size)
    assert abs(res.p - tail) < 0.08


def test_correlation_deterministic_under_seed():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(N_BINS, N_FRAMES)), rng.normal(size=(N_BINS, N_FRAMES))
    assert A.correlate_region(a, b, _region(), 100, 7) == A.correlate_region(a, b, _region(), 100, 7)


def test_correlation_zero_variance_is_error():
    m = np.random.default_rng(0).normal(size=(N_BINS, N_FRAMES))
    with pytest.raises(DegenerateCorrelationError):
        A.correlate_region(m, np.zeros_like(m), _region(), 10)


def test_map_on_f1_band_correlates_with_f1_over_f3():
    clip, a = synthesize_disyllable("initial", 7)
    from stresslrp.corpus import plan_disyllable

    plan = plan_disyllable("initial", 7)
    spec = stft_magnitude(clip)
    tr = A.synthetic_track(plan, clip.samples, 16000)
    region = A.make_regions(a, spec)[0]
    h1 = A.feature_heatmap(tr, ("F1",), spec)
    r1 = A.correlate_region(h1, h1 * 1.0 + 1e-3 * np.random.default_rng(0).normal(size=h1.shape), region, 50)
    r3 = A.correlate_region(h1, A.feature_heatmap(tr, ("F3",), spec), region, 50)
    assert r1.r > 0.9 and r1.r > r3.r


def test_subset_table_sorted_by_mean_r():
    rs = [A.CorrelationResult(0.1, 0.5, ("F3",)), A.CorrelationResult(0.7, 0.01, ("F1",)),
          A.CorrelationResult(0.5, 0.02, ("F1",)), A.CorrelationResult(0.3, 0.2, ("F0",))]
    table = A.subset_table(rs)
    assert [row.subset for row in table] == [("F1",), ("F0",), ("F3",)]
    assert table[0].mean_r == pytest.approx(0.6) and table[0].n == 2


# -- residual bands ----------------------------------------------------------


def _residual_case():
    tr = _track(F0=120.0, F1=500.0, F2=1500.0, F3=2500.0, B1=100.0, B2=100.0, B3=100.0)
    region = _region()
    return tr, region


def test_residual_mass_below_f1_goes_to_f0_f1():
    tr, region = _residual_case()
    m = np.zeros((N_BINS, N_FRAMES))
    m[4, 5:20] = 1.0  # 200 Hz
    combined = np.zeros_like(m)
    combined[30, 5:20] = 1.0
    res = A.residual_distribution(m, combined, tr, region, _spec())
    assert res.fractions["F0-F1"] == 1.0
    assert sum(res.fractions.values()) == pytest.approx(1.0, abs=1e-12)


def test_residual_below_f0_folds_into_first_band():
    tr, region = _residual_case()
    m = np.zeros((N_BINS, N_FRAMES))
    m[1, 5:20] = 2.0  # 50 Hz, under F0
    res = A.residual_distribution(m, np.zeros_like(m) + (np.arange(N_BINS)[:, None] == 80), tr, region, _spec())
    assert res.fractions["F0-F1"] == 1.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), tau=st.floats(0.01, 0.5))
def test_residual_matches_per_cell_oracle(seed, tau):
    rng = np.random.default_rng(seed)
    f1 = rng.uniform(300, 900, N_FRAMES)
    f2 = rng.uniform(1000, 2000, N_FRAMES)
    f3 = rng.uniform(2200, 3500, N_FRAMES)
    tr = _track(F0=rng.uniform(90, 200, N_FRAMES), F1=f1, F2=f2, F3=f3, B1=100.0, B2=100.0, B3=100.0)
    region = _region()
    m = rng.normal(size=(N_BINS, N_FRAMES))
    comb = rng.uniform(size=(N_BINS, N_FRAMES)) ** 4
    res = A.residual_distribution(m, comb, tr, region, _spec(), tau)
    mask = region.mask(m.shape)
    thresh = tau * comb[mask].max()
    mass = dict.fromkeys(A.BANDS, 0.0)
    for i in range(N_BINS):
        for j in range(N_FRAMES):
            if not mask[i, j] or m[i, j] <= 0 or comb[i, j] > thresh:
                continue
            f = 50.0 * i
            band = "F0-F1" if f < f1[j] else "F1-F2" if f < f2[j] else "F2-F3" if f < f3[j] else "above_F3"
            mass[band] += m[i, j]
    total = sum(mass.values())
    if total == 0:
        assert res.empty
        return
    for b in A.BANDS:
        assert res.fractions[b] == pytest.approx(mass[b] / total, abs=1e-12)
    assert sum(res.fractions.values()) == pytest.approx(1.0, abs=1e-9)


def test_residual_empty_when_everything_explained():
    tr, region = _residual_case()
    m = np.ones((N_BINS, N_FRAMES))
    res = A.residual_distribution(m, np.ones_like(m), tr, region, _spec())
    assert res.empty and all(v == 0 for v in res.fractions.values())


def test_residual_tau_out_of_range():
    tr, region = _residual_case()
    with pytest.raises(ConfigError):
        A.residual_distribution(np.ones((N_BINS, N_FRAMES)), np.ones((N_BINS, N_FRAMES)), tr, region, _spec(), 1.5)


# -- per-sample pipeline -----------------------------------------------------


def test_analyze_sample_on_synthetic_token():
    from stresslrp.corpus import plan_disyllable

    plan = plan_disyllable("final", 4)
    clip, a = synthesize_disyllable("final", 4)
    spec = stft_magnitude(clip)
    tr = A.synthetic_track(plan, clip.samples, 16000)
    m = A.feature_heatmap(tr, ("F1", "F2"), spec) + 0.01
    res = A.analyze_sample(m, spec, a, tr, permutations=20, source_id="t")
    assert set(res.mus) == set(A.REGION_TAGS)
    assert res.mus["stressed_vowel"] > res.mus["unstressed_vowel"]
    assert len(res.correlations) + len(res.skipped_subsets) == 15
    assert res.residual is not None
