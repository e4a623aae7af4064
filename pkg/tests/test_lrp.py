import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stresslrp import lrp
from stresslrp.errors import AssignmentError, CanonizationError, ConfigError, SingularityError
from stresslrp.nn import layers as L
from stresslrp.nn import network as N

from lrp_oracle import oracle_relevance, random_mlp

F64 = np.float64


def _explain(net, x, target, rule):
    _, trace = N.forward(net, x)
    return lrp.relevance(trace, target, rule)


def _dense_stack(rmap):
    """Relevance at the input of each dense layer, output side first."""
    return rmap.layers


# -- small worked cases ------------------------------------------------------


def test_single_unit_equal_split():
    net = N.NetworkSpec([L.Dense(np.array([[1.0, 1.0], [0.0, 0.0]]), np.zeros(2))], (2,))
    r = _explain(net, np.array([1.0, 1.0]), 0, lrp.Z)
    np.testing.assert_allclose(r.values, [1.0, 1.0])


def test_zero_weight_input_gets_nothing():
    net = N.NetworkSpec([L.Dense(np.array([[2.0, 0.0, 1.0], [1.0, 1.0, 1.0]]), np.zeros(2))], (3,))
    r = _explain(net, np.array([1.0, 5.0, 1.0]), 0, lrp.Z)
    assert r.values[1] == 0.0
    assert r.values.sum() == pytest.approx(3.0)


def test_output_relevance_is_raw_logit():
    net = random_mlp(np.random.default_rng(0), 2)
    x = np.random.default_rng(1).normal(size=net.input_shape)
    logits, trace = N.forward(net, x)
    r = lrp.relevance(trace, 1, lrp.EPSILON)
    np.testing.assert_array_equal(r.layers[-1], [0.0, logits[1]])


def test_mlp_3_2_1_z_rule_matches_oracle():
    rng = np.random.default_rng(7)
    w1, w2 = rng.normal(0, 0.3, (2, 3)), rng.normal(0, 0.3, (2, 2))
    w2[1] = 0
    net = N.NetworkSpec([L.Dense(w1, np.zeros(2)), L.ReLU(), L.Dense(w2, np.zeros(2))], (3,))
    x = np.abs(rng.normal(size=3))
    got = _explain(net, x, 0, lrp.Z).values
    want = oracle_relevance(net, x, 0, "z")[-1]
    np.testing.assert_allclose(got, want, atol=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_all_rules_match_oracle_with_biases(seed):
    rng = np.random.default_rng(seed)
    net = random_mlp(rng, bias=True)
    x = rng.normal(size=net.input_shape)
    for name, kw in [("z", {}), ("epsilon", {"epsilon": 1e-6}), ("alphabeta", {"alpha": 1.0, "beta": 0.0}),
                     ("alphabeta", {"alpha": 0.5, "beta": 0.5}), ("alphabeta", {"alpha": 0.25, "beta": 0.75})]:
        rule = lrp.RuleConfig(name, **kw)
        try:
            got = _explain(net, x, seed % 2, rule)
        except SingularityError:
            continue
        want = oracle_relevance(net, x, seed % 2, name, **kw)
        dense_inputs = [r for r, e in zip(got.layers, net.layers) if e.kind == "dense"][::-1]
        for a, b in zip(dense_inputs, want[1:]):
            np.testing.assert_allclose(a, b, atol=1e-9)


def test_alpha1_equals_z_when_all_positive():
    rng = np.random.default_rng(3)
    net = N.NetworkSpec([L.Dense(np.abs(rng.normal(size=(3, 4))), np.zeros(3)), L.ReLU(),
                         L.Dense(np.abs(rng.normal(size=(2, 3))), np.zeros(2))], (4,))
    x = np.abs(rng.normal(size=4)) + 0.1
    np.testing.assert_allclose(_explain(net, x, 0, lrp.ALPHA1).values, _explain(net, x, 0, lrp.Z).values, atol=1e-9)


def test_tiny_epsilon_matches_z():
    rng = np.random.default_rng(4)
    for _ in range(20):
        net = random_mlp(rng)
        x = rng.normal(size=net.input_shape)
        _, trace = N.forward(net, x)
        zs = [e.output for e in trace if e.layer.kind == "dense"]
        if min(np.min(np.abs(z)) for z in zs) < 1e-3:
            continue
        a = lrp.relevance(trace, 0, lrp.RuleConfig("epsilon", epsilon=1e-12)).values
        b = lrp.relevance(trace, 0, lrp.Z).values
        np.testing.assert_allclose(a, b, atol=1e-6)


def test_epsilon_sign_zero_is_positive():
    net = N.NetworkSpec([L.Dense(np.array([[1.0, -1.0], [1.0, 1.0]]), np.zeros(2))], (2,))
    _, trace = N.forward(net, np.array([1.0, 1.0]))
    # z_0 = 0 and its logit is 0, so nothing is propagated; no division by zero occurs
    r = lrp.relevance(trace, 0, lrp.EPSILON)
    assert np.all(np.isfinite(r.values))


def test_z_rule_singularity_names_unit():
    # Z = 1 - 1 = 0 for the only output unit, which carries relevance 1
    with pytest.raises(SingularityError, match=r"layer 0, unit \(0,\)"):
        lrp.propagate_linear(np.array([1.0, 1.0]), np.array([[1.0, -1.0]]), None, np.array([1.0]),
                             lambda x, w: w @ x, lambda s, w: w.T @ s, lrp.Z, layer_index=0)


def test_z_rule_zero_unit_without_relevance_is_fine():
    out = lrp.propagate_linear(np.array([1.0, 1.0]), np.array([[1.0, -1.0], [1.0, 1.0]]), None,
                               np.array([0.0, 2.0]), lambda x, w: w @ x, lambda s, w: w.T @ s, lrp.Z)
    np.testing.assert_allclose(out, [1.0, 1.0])


# -- conservation ------------------------------------------------------------


def _layer_totals(rmap):
    return [float(np.sum(r)) for r in rmap.layers]


@pytest.mark.parametrize("seed", range(15))
def test_z_rule_conserves_without_bias(seed):
    rng = np.random.default_rng(100 + seed)
    net = random_mlp(rng)
    x = rng.normal(size=net.input_shape)
    tot = _layer_totals(_explain(net, x, 0, lrp.Z))
    for t in tot:
        assert t == pytest.approx(tot[-1], rel=1e-6, abs=1e-12)


@pytest.mark.parametrize("seed", range(15))
def test_alphabeta_conserves_when_pools_nonempty(seed):
    rng = np.random.default_rng(200 + seed)
    net = random_mlp(rng)
    x = rng.normal(size=net.input_shape)
    _, trace = N.forward(net, x)
    for alpha in (1.0, 0.5):
        rule = lrp.RuleConfig("alphabeta", alpha=alpha, beta=1 - alpha)
        rmap = lrp.relevance(trace, 0, rule)
        ok = True
        for k, e in enumerate(trace):
            if e.layer.kind != "dense":
                continue
            zij = e.layer.weight * e.input[None, :]
            carries = np.abs(rmap.layers[k + 1]) > 0
            if np.any(carries & ~(zij > 0).any(axis=1)) or (alpha < 1 and np.any(carries & ~(zij < 0).any(axis=1))):
                ok = False
        if ok:
            tot = _layer_totals(rmap)
            for t in tot:
                assert t == pytest.approx(tot[-1], rel=1e-6, abs=1e-12)


def test_epsilon_deficit_shrinks_with_epsilon():
    rng = np.random.default_rng(5)
    for _ in range(20):
        net = random_mlp(rng)
        x = rng.normal(size=net.input_shape)
        _, trace = N.forward(net, x)
        deficits = []
        for eps in (1e-2, 1e-4, 1e-6):
            r = lrp.relevance(trace, 0, lrp.RuleConfig("epsilon", epsilon=eps))
            deficits.append(abs(r.layers[-1].sum() - r.values.sum()))
        assert deficits[0] >= deficits[1] >= deficits[2]


# -- convolution and pooling -------------------------------------------------


def _unrolled(layer, in_shape):
    """Dense matrix of a conv or avg-pool layer, found by probing unit inputs."""
    n_in = int(np.prod(in_shape))
    cols = []
    for i in range(n_in):
        e = np.zeros(n_in)
        e[i] = 1.0
        y, _ = layer.forward(e.reshape((1,) + tuple(in_shape)))
        if layer.kind == "conv2d":
            y = y - layer.bias.reshape(1, -1, 1, 1)
        cols.append(y.ravel())
    return np.stack(cols, axis=1)


@pytest.mark.parametrize("rule", [lrp.Z, lrp.EPSILON, lrp.ALPHA1, lrp.RuleConfig("alphabeta", alpha=0.5, beta=0.5)])
def test_conv_matches_unrolled_dense(rule):
    rng = np.random.default_rng(11)
    conv = L.conv2d(2, 3, 3, rng, padding=1, stride=2, dtype=F64).with_arrays(bias=rng.normal(0, 0.1, 3))
    in_shape = (2, 5, 6)
    out_shape = conv.output_shape(in_shape)
    head = L.dense(int(np.prod(out_shape)), 2, rng, F64)
    net = N.NetworkSpec([conv, L.Flatten(), head], in_shape)
    w = _unrolled(conv, in_shape)
    b = np.repeat(conv.bias, int(np.prod(out_shape[1:])))
    dnet = N.NetworkSpec([L.Flatten(), L.Dense(w, b), head], in_shape)
    x = rng.normal(size=in_shape)
    a = _explain(net, x, 1, rule).values
    d = _explain(dnet, x, 1, rule).values
    np.testing.assert_allclose(a, d, atol=1e-10)


def test_avg_pool_is_uniform_conv():
    rng = np.random.default_rng(12)
    in_shape = (2, 4, 6)
    pool = L.AvgPool((2, 2))
    out_shape = pool.output_shape(in_shape)
    head = L.dense(int(np.prod(out_shape)), 2, rng, F64)
    net = N.NetworkSpec([pool, L.Flatten(), head], in_shape)
    dnet = N.NetworkSpec([L.Flatten(), L.Dense(_unrolled(pool, in_shape), np.zeros(int(np.prod(out_shape)))), head],
                         in_shape)
    x = rng.normal(size=in_shape)
    for rule in (lrp.Z, lrp.EPSILON, lrp.ALPHA1):
        np.testing.assert_allclose(_explain(net, x, 0, rule).values, _explain(dnet, x, 0, rule).values, atol=1e-10)


def test_max_pool_winner_take_all():
    rng = np.random.default_rng(13)
    x = rng.permutation(32).reshape(2, 4, 4).astype(F64)
    net = N.NetworkSpec([L.MaxPool((2, 2)), L.Flatten(), L.dense(8, 2, rng, F64)], (2, 4, 4))
    r = _explain(net, x, 0, lrp.EPSILON)
    pooled = r.layers[1]
    for c in range(2):
        for i in range(2):
            for j in range(2):
                win = x[c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                rw = r.values[c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                k = np.unravel_index(np.argmax(win), win.shape)
                assert rw[k] == pooled[c, i, j]
                mask = np.ones_like(rw, dtype=bool)
                mask[k] = False
                assert np.all(rw[mask] == 0.0)


def test_flat_identity_on_identity_weights():
    rng = np.random.default_rng(14)
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    conv = L.Conv2D(w, np.zeros(3))
    x = rng.normal(size=(3, 4, 4))
    r_out = rng.normal(size=(3, 4, 4))
    wt, b, fwd, adj = lrp._linear_ops(conv, x.shape)
    np.testing.assert_allclose(lrp.propagate_linear(x, wt, b, r_out, fwd, adj, lrp.FLAT), r_out, atol=0)
    wd = np.eye(5)
    r = rng.normal(size=5)
    out = lrp.propagate_linear(rng.normal(size=5), wd, None, r, lambda v, m: m @ v, lambda s, m: m.T @ s, lrp.FLAT)
    np.testing.assert_array_equal(out, r)


def test_flat_rule_spreads_evenly_over_receptive_field():
    conv = L.Conv2D(np.ones((1, 1, 3, 3)), np.zeros(1))
    x = np.random.default_rng(0).normal(size=(1, 3, 3))
    wt, b, fwd, adj = lrp._linear_ops(conv, x.shape)
    out = lrp.propagate_linear(x, wt, b, np.array([[[9.0]]]), fwd, adj, lrp.FLAT)
    np.testing.assert_allclose(out, np.ones((1, 3, 3)))


# -- composite ---------------------------------------------------------------


def test_composite_lenet():
    assert lrp.weighted_rule_names(N.lenet5()) == ["flat_identity", "flat_identity", "alpha1", "epsilon", "epsilon"]


def test_composite_vgg_mini():
    names = lrp.weighted_rule_names(N.vgg())
    assert names == ["flat_identity"] * 2 + ["alpha1"] * 2 + ["epsilon"] * 3


def test_composite_pooling_follows_conv():
    net = N.fold_batchnorm(N.lenet5())
    rules = lrp.composite_assignment(net)
    for k, layer in enumerate(net.layers):
        if layer.kind == "avg_pool":
            assert rules[k] is rules[k - 2]
        if layer.kind in ("relu", "flatten"):
            assert rules[k] is None


def test_composite_one_conv_is_error():
    rng = np.random.default_rng(0)
    net = N.NetworkSpec([L.conv2d(1, 2, 3, rng, dtype=F64), L.Flatten(), L.dense(2 * 2 * 2, 2, rng, F64)], (1, 4, 4))
    with pytest.raises(AssignmentError):
        lrp.composite_assignment(net)


def test_composite_runs_on_lenet_and_keeps_shape():
    net = N.canonize(N.lenet5(seed=1)).astype(F64)
    x = np.random.default_rng(0).normal(size=(1, 161, 49))
    r = _explain(net, x, 0, lrp.COMPOSITE)
    assert r.values.shape == (1, 161, 49) and r.matrix.shape == (161, 49)
    assert np.all(np.isfinite(r.values))


def test_unfolded_batchnorm_is_canonization_error():
    net = N.lenet5(seed=0).astype(F64)
    _, trace = N.forward(net, np.zeros((1, 161, 49)))
    with pytest.raises(CanonizationError):
        lrp.relevance(trace, 0, lrp.EPSILON)


def test_rule_config_invariants():
    with pytest.raises(ConfigError):
        lrp.RuleConfig("alphabeta", alpha=0.7, beta=0.7)
    with pytest.raises(ConfigError):
        lrp.RuleConfig("epsilon", epsilon=0)
    with pytest.raises(ConfigError):
        lrp.RuleConfig("gradient")
    assert lrp.rule_from_name("alpha0.5").beta == 0.5


def test_target_out_of_range():
    net = random_mlp(np.random.default_rng(0))
    _, trace = N.forward(net, np.zeros(net.input_shape))
    with pytest.raises(ConfigError):
        lrp.relevance(trace, 2, lrp.Z)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_relevance_is_finite_and_input_shaped(seed):
    rng = np.random.default_rng(seed)
    net = random_mlp(rng, bias=True)
    x = rng.normal(size=net.input_shape)
    for rule in (lrp.EPSILON, lrp.ALPHA1, lrp.FLAT):
        r = _explain(net, x, int(rng.integers(2)), rule)
        assert r.values.shape == net.input_shape and np.all(np.isfinite(r.values))


# -- export ------------------------------------------------------------------


def test_export_files_and_determinism(tmp_path):
    from PIL import Image

    m = np.random.default_rng(0).normal(size=(161, 49))
    rmap = lrp.RelevanceMap(m[None], 1, "composite")
    side = lrp.export_map(rmap, tmp_path / "a")
    lrp.export_map(rmap, tmp_path / "b")
    for ext in ("csv", "png", "json"):
        assert (tmp_path / f"a.{ext}").read_bytes() == (tmp_path / f"b.{ext}").read_bytes()
    np.testing.assert_allclose(lrp.read_map_csv(tmp_path / "a.csv"), m, rtol=1e-8)
    img = np.asarray(Image.open(tmp_path / "a.png"))
    assert img.shape == (161, 49) and img.dtype == np.uint8
    assert img.min() == 0 and img.max() == 255
    # row 0 of the matrix (lowest frequency) is the bottom image row
    assert img[-1, np.argmax(m[0])] == np.round((m[0].max() - m.min()) / (m.max() - m.min()) * 255)
    assert json.loads((tmp_path / "a.json").read_text()) == side
    assert side["min"] == m.min() and side["max"] == m.max()


def test_export_constant_map(tmp_path):
    from PIL import Image

    lrp.export_map(lrp.RelevanceMap(np.zeros((1, 4, 3)), 0, "z"), tmp_path / "c")
    assert np.all(np.asarray(Image.open(tmp_path / "c.png")) == 0)
