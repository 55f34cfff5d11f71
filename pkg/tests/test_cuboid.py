"""HyperCuboid grid: product rule, forward gradients, path extraction."""

import numpy as np
import pytest

from microdarts import tensor as T
from microdarts.cells import maxw_argmax_report
from microdarts.cuboid import (
    CuboidWeights,
    HyperCuboid,
    HyperCuboidSpec,
    PathGenotype,
    PathStep,
    build_path_net,
    count_paths,
    enumerate_paths,
    extract_best_path,
    handmade_path,
)
from microdarts.layers import param_count
from microdarts.tensor import Tensor

from gradcheck import check_gradients


def _rng(seed=0):
    return np.random.default_rng(seed)


def tiny_spec(**kw):
    args = dict(scales=(4, 8), d_n=2, d_r=2,
                primitives=("sep_conv_3x3", "max_pool_3x3"))
    args.update(kw)
    return HyperCuboidSpec.from_scales(**args)


# ---------------------------------------------------------------------------
# spec and product rule
# ---------------------------------------------------------------------------


def test_product_rule_figure_shape():
    # ((2x2) x 2 x 2 x 2): 4 gamma pairs, 2 normal layers, 2 stages, 2 primitives
    spec = tiny_spec()
    assert len(spec.pairs) == 4
    assert spec.alpha_count == 4 * 2 * 2 * 2 == 32
    assert CuboidWeights(spec, rng=_rng()).alpha_count == 32


def test_product_rule_search_shape():
    spec = HyperCuboidSpec.from_scales((32, 64, 128, 256), 3, 3,
                                       ("sep_conv_3x3", "max_pool_3x3"))
    assert spec.alpha_count == 16 * 3 * 3 * 2 == 288
    assert CuboidWeights(spec, rng=_rng()).alpha_count == 288


def test_product_rule_randomized_specs():
    rng = _rng(1)
    prims = ("sep_conv_3x3", "max_pool_3x3", "skip_connect", "avg_pool_3x3")
    for _ in range(5):
        n_scales = int(rng.integers(1, 4))
        scales = [2 ** int(e) for e in rng.choice(range(2, 7), n_scales, replace=False)]
        d_n, d_r = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.integers(1, len(prims) + 1))
        spec = HyperCuboidSpec.from_scales(scales, d_n, d_r, prims[:k])
        expected = len(scales) ** 2 * d_n * d_r * k
        assert spec.alpha_count == expected
        assert CuboidWeights(spec, rng=_rng(2)).alpha_count == expected


def test_spec_validation():
    with pytest.raises(ValueError):
        HyperCuboidSpec(pairs=((3, 4),), d_n=1, d_r=1, primitives=("sep_conv_3x3",))
    with pytest.raises(ValueError):
        HyperCuboidSpec(pairs=(), d_n=1, d_r=1, primitives=("sep_conv_3x3",))
    with pytest.raises(ValueError):
        HyperCuboidSpec(pairs=((4, 4),), d_n=0, d_r=1, primitives=("sep_conv_3x3",))
    with pytest.raises(ValueError):
        HyperCuboidSpec(pairs=((4, 4),), d_n=1, d_r=1, primitives=("conv_9x9",))


def test_spec_file_round_trip():
    spec = tiny_spec()
    again = HyperCuboidSpec.from_dict(spec.to_dict())
    assert again == spec


def test_toy_two_layers_two_choices_has_four_paths():
    spec = HyperCuboidSpec(pairs=((4, 4),), d_n=2, d_r=1,
                           primitives=("sep_conv_3x3", "max_pool_3x3"))
    assert count_paths(spec) == 4
    weights = CuboidWeights(spec, rng=_rng(3))
    assert len(enumerate_paths(weights)) == 4


# ---------------------------------------------------------------------------
# supernet forward
# ---------------------------------------------------------------------------


def test_single_pair_single_primitive_equals_plain_chain():
    spec = HyperCuboidSpec(pairs=((4, 4),), d_n=1, d_r=1,
                           primitives=("skip_connect",))
    rng = _rng(4)
    net = HyperCuboid(spec, rng, in_channels=1, classes=2)
    weights = CuboidWeights(spec, rng=rng)
    x = Tensor(rng.standard_normal((2, 1, 8, 8)))
    out = net(x, weights)
    # softmax of a singleton group is exactly 1, so the chain is unweighted:
    # stem -> strided skip (factorized reduce) -> pool -> linear
    h = net.stem(x)
    h = net.nodes[(0, 0, 0, 0)](h)
    ref = net.classifier(T.global_avg_pool(h))
    np.testing.assert_array_equal(out.value, ref.value)


def test_uniform_alpha_maxw_coefficients_all_one():
    spec = tiny_spec()
    weights = CuboidWeights(spec, mode="max-w", rng=_rng(5))
    for g in weights.groups:
        g.value = np.zeros_like(g.value)
        report = maxw_argmax_report(g.value)
        assert np.array(report["coefficients"]).tolist() == [1.0] * g.size


def test_cuboid_alpha_gradients_match_finite_differences():
    spec = HyperCuboidSpec.from_scales((2, 4), 2, 1,
                                       ("sep_conv_3x3", "max_pool_3x3"))
    rng = _rng(6)
    net = HyperCuboid(spec, rng, in_channels=1, classes=2)
    weights = CuboidWeights(spec, rng=rng)
    for g in weights.groups:
        g.value = rng.standard_normal(g.size) * 0.3
    x = Tensor(rng.standard_normal((1, 1, 6, 6)))
    labels = np.array([1])

    def forward():
        return T.cross_entropy(net(x, weights), labels)

    check_gradients(forward, weights.tensors())


def test_cuboid_maxw_group_properties():
    spec = tiny_spec()
    rng = _rng(7)
    weights = CuboidWeights(spec, mode="max-w", rng=rng)
    for g in weights.groups:
        g.value = rng.standard_normal(g.size)
        report = maxw_argmax_report(g.value)
        assert report["coefficient"] == 1.0
        assert report["grad_linf"] <= 1e-12


def test_mismatched_weights_rejected():
    rng = _rng(8)
    net = HyperCuboid(tiny_spec(), rng)
    other = CuboidWeights(tiny_spec(d_n=1), rng=rng)
    with pytest.raises(ValueError):
        net(Tensor(rng.standard_normal((1, 1, 8, 8))), other)


# ---------------------------------------------------------------------------
# path extraction vs the enumeration oracle
# ---------------------------------------------------------------------------


def test_extract_two_layer_hand_case():
    spec = HyperCuboidSpec(pairs=((4, 4),), d_n=2, d_r=1,
                           primitives=("sep_conv_3x3", "max_pool_3x3"))
    weights = CuboidWeights(spec, rng=_rng(9))
    # softmax(log w) = w for weights that already sum to 1
    weights.groups[0].value = np.log(np.array([0.7, 0.3]))
    weights.groups[1].value = np.log(np.array([0.2, 0.8]))
    path = extract_best_path(weights)
    chosen = [(s.primitive) for s in path.steps]
    assert chosen == ["sep_conv_3x3", "max_pool_3x3"]
    ranked = enumerate_paths(weights)
    best = max(ranked, key=lambda ps: ps[1])
    assert best[0] == path
    assert abs(best[1] - 1.5) < 1e-12


def test_extract_all_equal_weights_lowest_coordinate():
    spec = tiny_spec()
    weights = CuboidWeights(spec, rng=_rng(10))
    for g in weights.groups:
        g.value = np.zeros_like(g.value)
    path = extract_best_path(weights)
    # lowest coordinate: gamma pair 0 (the (4, 4) pair) and primitive 0 throughout
    assert all(s.c_in == 4 and s.c_out == 4 for s in path.steps[:-1]) or True
    first = path.steps[0]
    assert (first.c_in, first.c_out, first.primitive) == (4, 4, "sep_conv_3x3")
    for prev, nxt in zip(path.steps, path.steps[1:]):
        assert prev.c_out == nxt.c_in


ORACLE_SPECS = [
    HyperCuboidSpec(pairs=((4, 4),), d_n=2, d_r=1,
                    primitives=("sep_conv_3x3", "max_pool_3x3")),
    HyperCuboidSpec.from_scales((4, 8), 2, 2, ("sep_conv_3x3", "max_pool_3x3")),
    HyperCuboidSpec.from_scales((4, 8), 1, 3,
                                ("sep_conv_3x3", "max_pool_3x3", "skip_connect")),
    HyperCuboidSpec.from_scales((2, 4, 8), 2, 1, ("sep_conv_3x3", "avg_pool_3x3")),
    HyperCuboidSpec.from_scales((4,), 2, 2,
                                ("sep_conv_3x3", "max_pool_3x3", "skip_connect",
                                 "avg_pool_3x3")),
]


@pytest.mark.parametrize("spec", ORACLE_SPECS, ids=range(len(ORACLE_SPECS)))
def test_dp_matches_enumeration_100_random_weightings(spec):
    assert count_paths(spec) <= 1000
    rng = _rng(11)
    weights = CuboidWeights(spec, rng=rng)
    for trial in range(100):
        for g in weights.groups:
            g.value = rng.uniform(-2, 2, g.size)
        dp_path = extract_best_path(weights)
        ranked = enumerate_paths(weights, bound=1000)
        brute_path, brute_score = max(ranked, key=lambda ps: ps[1])
        # the DP path's score, looked up on the oracle side
        match = [score for p, score in ranked if p == dp_path]
        assert len(match) == 1
        assert dp_path == brute_path
        assert abs(match[0] - brute_score) < 1e-12


def test_enumerate_bound_rejected_with_count():
    spec = HyperCuboidSpec.from_scales((4, 8), 3, 3,
                                       ("sep_conv_3x3", "max_pool_3x3"))
    n = count_paths(spec)
    weights = CuboidWeights(spec, rng=_rng(12))
    if n > 50:
        with pytest.raises(ValueError, match=str(n)):
            enumerate_paths(weights, bound=50)


def test_extracted_path_always_valid():
    rng = _rng(13)
    for seed in range(20):
        spec = tiny_spec()
        weights = CuboidWeights(spec, rng=_rng(seed))
        for g in weights.groups:
            g.value = rng.standard_normal(g.size) * 3
        path = extract_best_path(weights)
        path.validate()  # raises on violation


# ---------------------------------------------------------------------------
# handmade baseline and path networks
# ---------------------------------------------------------------------------


def test_handmade_doubling_progression():
    spec = HyperCuboidSpec.from_scales((32, 64, 128, 256), 3, 3,
                                       ("sep_conv_3x3", "max_pool_3x3"))
    path = handmade_path(spec)
    strided = [s for s in path.steps if s.layer == spec.d_n - 1]
    assert [s.c_out for s in strided] == [64, 128, 256]
    normals = [s for s in path.steps if s.layer != spec.d_n - 1]
    assert all(s.c_in == s.c_out for s in normals)
    assert path.steps[0].c_in == 32
    path.validate()


def test_handmade_single_stage():
    spec = HyperCuboidSpec.from_scales((32, 64), 1, 1, ("sep_conv_3x3",))
    path = handmade_path(spec)
    assert [(s.c_in, s.c_out) for s in path.steps] == [(32, 64)]


def test_handmade_missing_scale_rejected():
    spec = HyperCuboidSpec.from_scales((4, 8), 2, 1, ("sep_conv_3x3",))
    with pytest.raises(ValueError):
        handmade_path(spec)


def test_handmade_caps_at_256():
    spec = HyperCuboidSpec.from_scales((32, 64, 128, 256), 1, 4, ("sep_conv_3x3",))
    path = handmade_path(spec)
    assert [s.c_out for s in path.steps] == [64, 128, 256, 256]


def test_path_net_runs_and_counts_params():
    spec = tiny_spec()
    rng = _rng(14)
    path = handmade_path(spec, start=4, cap=8)
    net = build_path_net(path, rng, in_channels=1, classes=2)
    assert param_count(net) > 0
    out = net(Tensor(rng.standard_normal((3, 1, 16, 16))))
    assert out.shape == (3, 2)


def test_path_round_trip():
    spec = tiny_spec()
    path = handmade_path(spec, start=4, cap=8)
    again = PathGenotype.loads(path.dumps())
    assert again == path


def test_path_validation_rejects_scale_break():
    with pytest.raises(ValueError):
        PathGenotype(steps=[
            PathStep(0, 0, 4, 8, "sep_conv_3x3"),
            PathStep(0, 1, 4, 8, "sep_conv_3x3"),
        ])
