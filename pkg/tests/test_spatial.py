import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stationnet import autodiff as ad
from stationnet import graphs, spatial
from stationnet.autodiff import Tensor
from stationnet.spatial import GcnParameters

from gradcheck import analytic_grad, numeric_grad, rel_err


def random_graphs(rng, n, k=3):
    out = []
    for _ in range(k):
        a = graphs._mirror_upper(rng.uniform(size=(n, n)))
        np.fill_diagonal(a, 1.0)
        out.append(graphs.graph_function(a))
    return out


def brute_layer(h, gs, w):
    n, u_in = h.shape
    u_out = w.shape[1]
    out = np.zeros((n, u_out))
    for i in range(n):
        for o in range(u_out):
            total = 0.0
            for g in gs:
                for j in range(n):
                    for k in range(u_in):
                        total += g[i][j] * h[j][k] * w[k][o]
            out[i][o] = max(total, 0.0)
    return out


def params_with(weights):
    p = GcnParameters(weights[0].shape[0], layers=0)
    p.weights = [[Tensor(w, requires_grad=True)] for w in weights]
    p.width = weights[-1].shape[1]
    return p


class TestLayer:
    def test_identity_graphs_triple(self):
        h = np.abs(np.random.default_rng(0).normal(size=(4, 3)))
        out = spatial.multigraph_conv_layer(Tensor(h), [np.eye(4)] * 3, Tensor(np.eye(3)))
        np.testing.assert_allclose(out.data, 3 * h)

    def test_zero_input(self):
        rng = np.random.default_rng(1)
        out = spatial.multigraph_conv_layer(Tensor(np.zeros((5, 3))), random_graphs(rng, 5), Tensor(rng.normal(size=(3, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((5, 2)))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_triple_loop(self, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        gs = random_graphs(rng, 5)
        out = spatial.multigraph_conv_layer(Tensor(h), gs, Tensor(w))
        np.testing.assert_allclose(out.data, brute_layer(h, gs, w), rtol=0, atol=1e-10)

    def test_station_count_mismatch(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ad.ShapeError):
            spatial.multigraph_conv_layer(Tensor(np.ones((4, 2))), random_graphs(rng, 5), Tensor(np.ones((2, 2))))

    def test_per_graph_weights(self):
        rng = np.random.default_rng(3)
        h = rng.normal(size=(4, 3))
        gs = random_graphs(rng, 4)
        ws = [rng.normal(size=(3, 2)) for _ in gs]
        out = spatial.multigraph_conv_layer(Tensor(h), gs, [Tensor(w) for w in ws])
        want = np.maximum(sum(g @ h @ w for g, w in zip(gs, ws)), 0)
        np.testing.assert_allclose(out.data, want, atol=1e-12)


class TestEncodeNetwork:
    def test_zero_layers_pass_through(self):
        h = np.random.default_rng(4).normal(size=(3, 5))
        p = GcnParameters(5, layers=0)
        assert p.out_width == 5
        np.testing.assert_array_equal(spatial.encode_network(Tensor(h), [np.eye(3)] * 3, p).data, h)

    def test_one_layer_equals_layer(self):
        rng = np.random.default_rng(5)
        h, w = rng.normal(size=(4, 3)), rng.normal(size=(3, 6))
        gs = random_graphs(rng, 4)
        a = spatial.encode_network(Tensor(h), gs, params_with([w])).data
        b = spatial.multigraph_conv_layer(Tensor(h), gs, Tensor(w)).data
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("seed", range(3))
    def test_two_layers_match_sequential_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        h = rng.normal(size=(4, 3))
        w1, w2 = rng.normal(size=(3, 5)), rng.normal(size=(5, 2))
        gs = random_graphs(rng, 4)
        out = spatial.encode_network(Tensor(h), gs, params_with([w1, w2])).data
        np.testing.assert_allclose(out, brute_layer(brute_layer(h, gs, w1), gs, w2), atol=1e-10)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2**32 - 1))
    def test_permutation_equivariance(self, n, seed):
        rng = np.random.default_rng(seed)
        h = rng.normal(size=(n, 4))
        gs = random_graphs(rng, n)
        p = GcnParameters(4, 6, layers=2, rng=rng)
        perm = np.eye(n)[rng.permutation(n)]
        lhs = spatial.encode_network(Tensor(perm @ h), [perm @ g @ perm.T for g in gs], p).data
        rhs = perm @ spatial.encode_network(Tensor(h), gs, p).data
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1, 1e6))
    def test_output_finite(self, seed, scale):
        rng = np.random.default_rng(seed)
        h = rng.normal(size=(5, 3)) * scale
        out = spatial.encode_network(Tensor(h), random_graphs(rng, 5), GcnParameters(3, 4, rng=rng))
        assert np.all(np.isfinite(out.data))

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_through_two_layers(self, seed):
        rng = np.random.default_rng(seed)
        gs = random_graphs(rng, 4)
        h0, w1, w2 = rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=(5, 2))

        def np_fn(h, a, b):
            x = np.maximum(sum(g @ h @ a for g in gs), 0)
            x = np.maximum(sum(g @ x @ b for g in gs), 0)
            return (x * x).sum()

        def ad_fn(h, a, b):
            x = spatial.multigraph_conv_layer(h, gs, a)
            x = spatial.multigraph_conv_layer(x, gs, b)
            return ad.sum_all(x * x)

        num = numeric_grad(np_fn, [h0, w1, w2])
        ana = analytic_grad(ad_fn, [h0, w1, w2])
        for n, g in zip(num, ana):
            assert rel_err(g, n) < 1e-5
