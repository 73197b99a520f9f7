"""Batch graph builder tests: variants, pooling, parity with the unbatched
attention reference, and the train/eval/forecast mode contracts."""

import dataclasses
import math

import numpy as np
import pytest

from opiniontpp.autodiff import Graph
from opiniontpp.config import RunConfig
from opiniontpp.data import EventSequence, Post
from opiniontpp.encoders import TweetEncoderParams, encode_tweets
from opiniontpp.errors import InputError
from opiniontpp.model import (ModelState, attend_reference, build_graph,
                              init_state, param_leaves, pool_posts)

VOCAB = [f"w{i}" for i in range(8)]
USERS = ["a", "b"]


def tiny_cfg(**kw):
    d = dict(embed_dim=5, lstm_hidden=4, vae_hidden=6, gru_hidden=6,
             n_topics=3, user_dim=2, vocab_size=10, max_tweet_len=6,
             queue_len=2, max_seq_len=5, seed=3)
    d.update(kw)
    return RunConfig(**d)


def post(uid, ts, stance=0, ids=(2, 3)):
    return Post(uid, float(ts), stance, token_ids=list(ids))


def make_seq(uid="a", n=3, queues=None):
    posts = [post(uid, i + 1.0, stance=i % 3, ids=[2 + i % 4, 3 + i % 3])
             for i in range(n)]
    s = EventSequence(uid, posts)
    s.queues = queues if queues is not None else [[] for _ in posts]
    return s


def fresh(variant="full", **kw):
    cfg = tiny_cfg(variant=variant, **kw)
    return init_state(cfg, VOCAB, USERS)


def run_loss(state, seqs, mode="train"):
    g = Graph()
    pt = param_leaves(g, state)
    return g, build_graph(g, pt, state, seqs, mode)


# --------------------------------------------------------------------- init

def test_init_is_deterministic():
    a, b = fresh(), fresh()
    assert set(a.params) == set(b.params)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    c = fresh(seed=4)
    assert not np.array_equal(a.params["emb"], c.params["emb"])


def test_variants_share_substreams():
    full, nc = fresh("full"), fresh("no_context")
    for k in nc.params:
        np.testing.assert_array_equal(full.params[k], nc.params[k])


def test_variant_parameter_sets():
    full = fresh("full")
    assert {"cross_w", "att_w_h", "att_w_z", "vae_enc_w", "v_lambda",
            "w_lambda"} <= set(full.params)
    assert "time_w" not in full.params
    nv = fresh("no_vae")
    assert not any(k.startswith("vae_") for k in nv.params)
    assert "att_w_z" not in nv.params
    # query shrinks to the tweet vector alone
    assert nv.params["att_w_h"].shape == (8, 8)
    assert full.params["att_w_h"].shape == (8, 11)
    nc = fresh("no_context")
    assert not any(k.startswith(("cross_", "att_")) for k in nc.params)
    go = fresh("gru_only")
    assert {"time_w", "time_b"} <= set(go.params)
    assert "v_lambda" not in go.params and "vae_enc_w" in go.params


def test_pad_embedding_row_is_zero():
    assert not fresh().params["emb"][0].any()


# ------------------------------------------------------------------- pooling

def test_pool_dedups_shared_posts():
    shared = post("b", 0.5)
    s1 = make_seq("a", 3, queues=[[shared], [shared], []])
    s2 = make_seq("b", 3)
    s2.posts[0] = shared
    pool = pool_posts([s1, s2], "train")
    assert pool.count(shared) == 1
    # train consumes n-1 posts; the final posts stay out of the pool
    assert s1.posts[-1] not in pool and s2.posts[-1] not in pool
    assert len(pool) == 2 + 2 + 1 - 1        # shared appears once


def test_pool_forecast_consumes_all():
    s = make_seq("a", 3)
    assert len(pool_posts([s], "forecast")) == 3
    assert len(pool_posts([s], "eval")) == 2


def test_pool_can_skip_queues():
    s = make_seq("a", 3, queues=[[post("b", 0.1)], [], []])
    assert len(pool_posts([s], "train", include_queues=False)) == 2
    assert len(pool_posts([s], "train")) == 3


def test_pool_rejects_bad_mode():
    with pytest.raises(ValueError, match="mode must be one of"):
        pool_posts([], "predict")


# ----------------------------------------------------------- build contracts

def test_empty_batch_rejected():
    state = fresh()
    g = Graph()
    with pytest.raises(ValueError, match="empty batch"):
        build_graph(g, param_leaves(g, state), state, [])


def test_unknown_user_rejected():
    state = fresh()
    with pytest.raises(InputError, match="not present in the trained model"):
        run_loss(state, [make_seq("zz", 3)])


def test_noise_shape_mismatch_rejected():
    state = fresh()
    g = Graph()
    pt = param_leaves(g, state)
    with pytest.raises(ValueError, match="noise shape"):
        build_graph(g, pt, state, [make_seq()], "train",
                    noise=np.zeros((99, state.config.n_topics)))


def test_train_mode_counts_and_backward():
    state = fresh()
    g = Graph()
    pt = param_leaves(g, state)
    res = build_graph(g, pt, state, [make_seq("a", 4), make_seq("b", 3)], "train")
    assert res.n_sequences == 2 and res.n_steps == 3 + 2
    assert res.predictions == []
    total = float(res.loss.values[0, 0])
    assert math.isfinite(total) and total > 0
    grads = g.backward(res.loss)
    for name in ("stance_w", "gru_cand_w", "emb", "fwd_w"):
        gr = grads.get(pt[name].node_id)
        assert gr is not None and gr.shape == state.params[name].shape
        assert np.all(np.isfinite(gr))
    # every loss component is a (1,1) tensor
    for t in (res.l_x, res.l_time, res.l_stan):
        assert t.values.shape == (1, 1)


def test_eval_mode_predicts_only_the_last_step():
    state = fresh()
    state.time_scale = 2.5
    _, res = run_loss(state, [make_seq("a", 4)], "eval")
    assert res.n_steps == 1 and len(res.predictions) == 1
    f = res.predictions[0]
    assert f.target_dt == pytest.approx(1.0)
    assert f.target_stance == 3 % 3
    assert f.dt_hat == pytest.approx(2.5 * math.expm1(f.tau_hat))
    assert sum(f.stance_probs) == pytest.approx(1.0, abs=1e-9)


def test_forecast_mode_has_no_loss_or_targets():
    state = fresh()
    _, res = run_loss(state, [make_seq("a", 3), make_seq("b", 4)], "forecast")
    assert res.loss is None and res.n_steps == 0
    assert len(res.predictions) == 2
    for f in res.predictions:
        assert f.target_dt is None and f.target_stance is None
        assert math.isfinite(f.tau_hat)
    assert res.predictions[0].t_last == 3.0


def test_gru_only_skips_intensity_machinery():
    state = fresh("gru_only")
    run_loss(state, [make_seq("a", 4)])
    assert state.counters["intensity_evals"] == 0
    full = fresh("full")
    run_loss(full, [make_seq("a", 4)])
    assert full.counters["intensity_evals"] > 0


# ---------------------------------------------------- ablation equivalences

def test_no_context_equals_full_when_queues_are_empty():
    # ablated blocks enter as zero rows, so the two graphs compute the
    # same numbers whenever the signal is absent from the data
    seqs = [make_seq("a", 4), make_seq("b", 3)]
    _, res_full = run_loss(fresh("full"), seqs)
    _, res_nc = run_loss(fresh("no_context"), seqs)
    assert res_full.loss.values[0, 0] == res_nc.loss.values[0, 0]


def test_gamma_scales_the_stance_term_linearly():
    state = fresh()
    seqs = [make_seq("a", 4)]
    losses = {}
    for gamma in (0.0, 0.4, 0.8):
        st = ModelState(config=dataclasses.replace(state.config, gamma=gamma),
                        params=state.params, vocab_words=state.vocab_words,
                        user_ids=state.user_ids)
        _, res = run_loss(st, seqs)
        losses[gamma] = float(res.loss.values[0, 0])
    d1 = losses[0.4] - losses[0.0]
    d2 = losses[0.8] - losses[0.0]
    assert d2 == pytest.approx(2.0 * d1, rel=1e-12)


def test_loss_is_the_weighted_sum_of_components():
    state = fresh()
    _, res = run_loss(state, [make_seq("a", 4)])
    cfg = state.config
    want = (cfg.eta * res.l_x.values[0, 0] + cfg.beta * res.l_time.values[0, 0]
            + cfg.gamma * res.l_stan.values[0, 0])
    assert res.loss.values[0, 0] == pytest.approx(want, rel=1e-12)


# -------------------------------------------------- batched attention parity

def test_batched_attention_matches_unbatched_reference():
    state = fresh("no_vae")
    nb = [post("b", 0.2, ids=[4, 5]), post("b", 0.6, ids=[5, 6, 7]),
          post("b", 0.9, ids=[2])]
    seq = make_seq("a", 4, queues=[[nb[0]], [nb[0], nb[1]], [nb[2]], []])
    trace = []
    g = Graph()
    pt = param_leaves(g, state)
    build_graph(g, pt, state, [seq], "train", trace=trace)
    got = {}
    for r in trace:
        got.setdefault(r.step, []).append((r.slot, r.weight))

    for step, queue in ((0, [nb[0]]), (1, [nb[0], nb[1]]), (2, [nb[2]])):
        g2 = Graph()
        pt2 = param_leaves(g2, state)
        enc = TweetEncoderParams(emb=pt2["emb"], fwd_w=pt2["fwd_w"],
                                 fwd_b=pt2["fwd_b"], bwd_w=pt2["bwd_w"],
                                 bwd_b=pt2["bwd_b"])
        rows = encode_tweets(g2, enc, [seq.posts[step].token_ids]
                             + [q.token_ids for q in queue])
        out = attend_reference(g2, pt2, state, rows[0], None, rows[1:],
                               [None] * len(queue))
        ref = out.weights.values.ravel()
        for slot, w in got[step]:
            assert w == pytest.approx(ref[slot], rel=1e-12)
        assert len(got[step]) == len(queue)


def test_trace_steps_number_consecutively_across_batches():
    state = fresh()
    nb = post("b", 0.2)
    s1 = make_seq("a", 3, queues=[[nb], [nb], []])
    s2 = make_seq("a", 3, queues=[[nb], [], []])
    trace, offsets = [], {}
    for batch in ([s1], [s2]):
        g = Graph()
        pt = param_leaves(g, state)
        build_graph(g, pt, state, batch, "train", trace=trace,
                    step_offsets=offsets)
    assert [r.step for r in trace] == [0, 1, 2]
    assert offsets == {"a": 4}
