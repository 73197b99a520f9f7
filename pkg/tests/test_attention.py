"""Attention scoring tests.

The two-neighbour case is hand-computed: with W_h = I, no topic terms,
query [1, 1] and neighbour hiddens [1, 1] and [0, 0], the scores are
2*tanh(1) and 0, so softmax gives (0.82101, 0.17899). Contract properties
(weights simplex, context in the neighbour hull) are checked generically
and gradients against finite differences.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opiniontpp.attention import (AttentionParams, AttentionRecord, attend,
                                  export_attention)
from opiniontpp.autodiff import Graph, grad_check


def make_neighbors(g, arrays, topics=None):
    topics = topics or [None] * len(arrays)
    return [(g.leaf(h), None if z is None else g.leaf(z))
            for h, z in zip(arrays, topics)]


def test_two_neighbor_hand_values():
    g = Graph()
    p = AttentionParams(w_h=g.leaf(np.eye(2)), w_z=None)
    h_i = g.leaf(np.array([[1.0, 1.0]]))
    out = attend(g, p, h_i, None,
                 make_neighbors(g, [np.array([[1.0, 1.0]]),
                                    np.array([[0.0, 0.0]])]), 2)
    s = 2.0 * math.tanh(1.0)
    expect = np.array([math.exp(s), 1.0]) / (math.exp(s) + 1.0)
    assert out.weights.values[0, 0] == pytest.approx(0.8210, abs=1e-4)
    assert out.weights.values[0, 1] == pytest.approx(0.1790, abs=1e-4)
    np.testing.assert_allclose(out.weights.values[0], expect, rtol=1e-12)
    # context = w1 * [1,1] + w2 * [0,0]
    np.testing.assert_allclose(out.context.values,
                               [[expect[0], expect[0]]], rtol=1e-12)


def test_empty_queue_gives_zero_context_and_no_weights():
    g = Graph()
    p = AttentionParams(w_h=g.leaf(np.eye(3)), w_z=None)
    out = attend(g, p, g.leaf(np.ones((1, 3))), None, [], context_dim=3)
    assert out.weights is None
    np.testing.assert_array_equal(out.context.values, np.zeros((1, 3)))


def test_single_neighbor_gets_weight_one():
    g = Graph()
    p = AttentionParams(w_h=g.leaf(np.eye(2)), w_z=None)
    h = np.array([[0.4, -0.2]])
    out = attend(g, p, g.leaf(np.ones((1, 2))), None, make_neighbors(g, [h]), 2)
    assert out.weights.values[0, 0] == 1.0
    np.testing.assert_array_equal(out.context.values, h)


@given(st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
@settings(deadline=None, max_examples=40)
def test_weights_are_a_simplex(n_neighbors, seed):
    rng = np.random.default_rng(seed)
    g = Graph()
    p = AttentionParams(w_h=g.leaf(rng.normal(size=(3, 4))),
                        w_z=g.leaf(rng.normal(size=(2, 4))))
    h_i = g.leaf(rng.normal(size=(1, 2)))
    z_i = g.leaf(rng.normal(size=(1, 2)))
    nbrs = make_neighbors(g, [rng.normal(size=(1, 3)) for _ in range(n_neighbors)],
                          [rng.normal(size=(1, 2)) for _ in range(n_neighbors)])
    out = attend(g, p, h_i, z_i, nbrs, 3)
    w = out.weights.values
    assert w.shape == (1, n_neighbors)
    assert (w >= 0).all()
    assert abs(w.sum() - 1.0) < 1e-9


def test_raising_a_score_raises_its_weight():
    # scaling one neighbour's hidden along the query direction reorders weights
    g = Graph()
    p = AttentionParams(w_h=g.leaf(np.eye(2) * 0.5), w_z=None)
    h_i = g.leaf(np.array([[1.0, 0.0]]))
    weak = attend(g, p, h_i, None,
                  make_neighbors(g, [np.array([[0.2, 0.0]]),
                                     np.array([[1.0, 0.0]])]), 2)
    assert weak.weights.values[0, 0] < weak.weights.values[0, 1]


def test_topic_channel_shifts_scores():
    rng = np.random.default_rng(5)
    h = rng.normal(size=(1, 2))
    z_a = np.array([[2.0, 0.0]])
    z_b = np.array([[0.0, 2.0]])

    def weights_with(z_second):
        g = Graph()
        p = AttentionParams(w_h=g.leaf(np.eye(2)), w_z=g.leaf(rng_w.copy()))
        out = attend(g, p, g.leaf(np.array([[1.0, 1.0]])), None,
                     make_neighbors(g, [h, h], [z_a, z_second]), 2)
        return out.weights.values.copy()

    rng_w = rng.normal(size=(2, 2))
    same = weights_with(z_a)
    np.testing.assert_allclose(same, [[0.5, 0.5]], atol=1e-12)
    diff = weights_with(z_b)
    assert abs(diff[0, 0] - 0.5) > 1e-6


def test_neighbor_topic_without_wz_rejected():
    g = Graph()
    p = AttentionParams(w_h=g.leaf(np.eye(2)), w_z=None)
    nbrs = make_neighbors(g, [np.zeros((1, 2))], [np.ones((1, 2))])
    with pytest.raises(ValueError, match="W_z"):
        attend(g, p, g.leaf(np.ones((1, 2))), None, nbrs, 2)


def test_attention_gradients_match_finite_differences():
    rng = np.random.default_rng(13)
    h1 = rng.normal(size=(1, 3))
    h2 = rng.normal(size=(1, 3))
    z1 = rng.normal(size=(1, 2))
    z2 = rng.normal(size=(1, 2))

    def build(g, leaves):
        w_h, w_z, h_i, z_i = leaves
        p = AttentionParams(w_h=w_h, w_z=w_z)
        out = attend(g, p, h_i, z_i,
                     make_neighbors(g, [h1, h2], [z1, z2]), 3)
        # squared context keeps the loss scalar and touches every weight
        return g.sum(g.mul_elem(out.context, out.context))

    params = [rng.normal(size=(3, 4)), rng.normal(size=(2, 4)),
              rng.normal(size=(1, 2)), rng.normal(size=(1, 2))]
    assert grad_check(build, params, eps=1e-6) < 1e-5


# ---------------------------------------------------------------------- export

def test_export_requires_a_trace(tmp_path):
    with pytest.raises(ValueError, match="tracing"):
        export_attention(None, str(tmp_path / "att.tsv"))


def test_export_writes_header_and_rows(tmp_path):
    recs = [AttentionRecord("u001", 0, 0, 0.75, np.array([0.1, 0.9]),
                            np.array([0.5, 0.5])),
            AttentionRecord("u001", 0, 1, 0.25, np.array([0.1, 0.9]),
                            np.array([0.25, 0.75]))]
    path = tmp_path / "att.tsv"
    assert export_attention(recs, str(path)) == 2
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == ["user_id", "step", "slot", "weight",
                                    "user_topics", "neighbor_topics"]
    fields = lines[1].split("\t")
    assert fields[:4] == ["u001", "0", "0", "0.75"]
    assert fields[4] == "0.1,0.9"
    assert [float(x) for x in lines[2].split("\t")[5].split(",")] == [0.25, 0.75]


def test_export_empty_trace_writes_header_only(tmp_path):
    path = tmp_path / "att.tsv"
    assert export_attention([], str(path)) == 0
    assert path.read_text().startswith("user_id\t")
