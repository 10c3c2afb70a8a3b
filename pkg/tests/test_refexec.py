import random

import numpy as np
import pytest

from morphnas.graph import DenseParams, PoolParams, TensorShape
from morphnas.refexec import ExecError, forward, random_weights

from conftest import graph_pool


def chain_graph(*specs):
    """input -> ... -> softmax helper for tiny hand graphs."""
    from morphnas.graph import _Builder

    b = _Builder(TensorShape(*specs[0]))
    for kind, params in specs[1:]:
        b.append(kind, params)
    b.append("softmax")
    return b.build().require_valid()


def test_dense_identity():
    g = chain_graph((1, 1, 3), ("dense", DenseParams(3)))
    dense_id = [lid for lid, l in g.layers.items() if l.kind == "dense"][0]
    w = {dense_id: {"matrix": np.eye(3), "bias": np.zeros(3)}}
    x = np.array([[[0.2, -1.0, 3.0]]])
    out = forward(g, w, x)
    # softmax of x itself
    e = np.exp(x.reshape(-1) - x.max())
    assert np.allclose(out, e / e.sum())


def test_softmax_sums_to_one(small_default):
    rng = np.random.default_rng(0)
    w = random_weights(small_default, rng)
    for _ in range(5):
        out = forward(small_default, w, rng.normal(0, 1, (8, 8, 3)))
        assert abs(out.sum() - 1.0) <= 1e-6
        assert np.all(out >= 0)


def test_avg_pool_constant():
    g = chain_graph((4, 4, 2), ("pool", PoolParams(2, 2)), ("globalavgpool", None))
    w = {}
    x = np.full((4, 4, 2), 0.7)
    out = forward(g, w, x)
    # pooling a constant keeps the constant; softmax of equal logits is uniform
    assert np.allclose(out, [0.5, 0.5])


def test_forward_deterministic(small_default):
    rng = np.random.default_rng(3)
    w = random_weights(small_default, rng)
    x = rng.normal(0, 1, (8, 8, 3))
    a = forward(small_default, w, x)
    b = forward(small_default, w, x)
    assert np.array_equal(a, b)


def test_random_weights_deterministic(small_default):
    a = random_weights(small_default, np.random.default_rng(9))
    b = random_weights(small_default, np.random.default_rng(9))
    for lid in a:
        for name in a[lid]:
            assert np.array_equal(a[lid][name], b[lid][name])


def test_forward_finite_on_random_graphs():
    rng = np.random.default_rng(5)
    for i, g in enumerate(graph_pool(41, 100, max_ops=4)):
        w = random_weights(g, np.random.default_rng(i))
        shape = g.nodes[g.input_node]
        out = forward(g, w, rng.normal(0, 1, (shape.height, shape.width, shape.channels)))
        assert np.all(np.isfinite(out))


def test_batchnorm_identity_insert(small_default):
    from morphnas.morph import Deep, morph_weights

    rng = np.random.default_rng(2)
    w = random_weights(small_default, rng)
    x = rng.normal(0, 1, (8, 8, 3))
    y0 = forward(small_default, w, x)
    u = small_default.trunk_path()[2].output  # conv1 output
    g2, w2 = morph_weights(small_default, w, Deep(u, "batchnorm"), noise_scale=0.0)
    assert np.abs(forward(g2, w2, x) - y0).max() <= 1e-6


def test_input_shape_mismatch(small_default):
    w = random_weights(small_default, np.random.default_rng(0))
    with pytest.raises(ExecError, match="input shape"):
        forward(small_default, w, np.zeros((4, 4, 3)))


def test_missing_weights_reports_layer(small_default):
    w = random_weights(small_default, np.random.default_rng(0))
    conv_id = [lid for lid, l in small_default.layers.items() if l.kind == "conv"][0]
    del w[conv_id]
    with pytest.raises(ExecError, match=f"layer {conv_id}"):
        forward(small_default, w, np.zeros((8, 8, 3)))
