"""Optimizer, preparation pipeline, training loop, metrics, checkpoints.

Adam and clipping get closed-form single-step checks; the loop contract
(determinism, early stop, abort, best-restore) runs on a handmade corpus
small enough to reason about.
"""

import dataclasses
import json
import math

import numpy as np
import pytest

from opiniontpp.config import RunConfig, config_hash
from opiniontpp.data import EventSequence, Post
from opiniontpp.errors import EmptyResultError, InputError
from opiniontpp.model import init_state
from opiniontpp.training import (AdamState, _batches, ablate, adam_step,
                                 checkpoint_load, checkpoint_save, clip_global,
                                 constant_mean_baseline, dataset_loss, evaluate,
                                 majority_baseline, prepare, train)

WORDS = ["alpha", "beta", "gamma", "delta", "omega", "kappa"]


@pytest.fixture(scope="module")
def corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "posts.jsonl"
    rows = []
    nbrs = {"ua": ["ub"], "ub": ["uc"], "uc": []}
    for ui, uid in enumerate(("ua", "ub", "uc")):
        for i in range(12):
            text = f"{WORDS[i % 4]} {WORDS[(i + ui) % 6]}"
            if uid == "ua" and i == 11:
                text += " zonly"          # appears only in ua's test region
            rows.append({"user_id": uid, "timestamp": ui * 0.3 + i * 1.0,
                         "text": text, "stance": (i + ui) % 3,
                         "neighbors": nbrs[uid]})
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    return str(path)


def small_cfg(corpus_path, **kw):
    d = dict(dataset_path=corpus_path, embed_dim=4, lstm_hidden=3, vae_hidden=5,
             gru_hidden=5, n_topics=2, user_dim=2, vocab_size=12, queue_len=2,
             max_tweet_len=5, epochs=2, quad_panels=128, seed=9)
    d.update(kw)
    return RunConfig(**d)


# ---------------------------------------------------------------- optimizer

def test_adam_first_step_closed_form():
    params = {"w": np.array([[1.0, -2.0]])}
    grads = {"w": np.array([[0.5, -0.25]])}
    st = AdamState.init(params)
    skipped = adam_step(params, grads, st, lr=0.1)
    assert skipped == 0 and st.t == 1
    # bias correction makes the first step lr * g / (|g| + eps)
    want = np.array([[1.0, -2.0]]) - 0.1 * grads["w"] / (np.abs(grads["w"]) + 1e-8)
    np.testing.assert_allclose(params["w"], want, rtol=1e-9)


def test_adam_skips_nonfinite_gradients():
    params = {"w": np.ones((1, 2)), "b": np.ones((1, 1))}
    grads = {"w": np.array([[np.nan, 1.0]]), "b": np.array([[1.0]])}
    st = AdamState.init(params)
    assert adam_step(params, grads, st, lr=0.1) == 1
    assert st.skipped == 1
    np.testing.assert_array_equal(params["w"], np.ones((1, 2)))
    assert params["b"][0, 0] != 1.0


def test_clip_global_scales_jointly():
    grads = {"a": np.array([[3.0]]), "b": np.array([[4.0]])}
    total = clip_global(grads, max_norm=1.0)
    assert total == pytest.approx(5.0)
    np.testing.assert_allclose(grads["a"], [[0.6]])
    np.testing.assert_allclose(grads["b"], [[0.8]])
    grads = {"a": np.array([[3.0]])}
    clip_global(grads, max_norm=10.0)
    np.testing.assert_array_equal(grads["a"], [[3.0]])   # under the cap


def test_batches_cover_in_order():
    got = [list(b) for b in _batches(7, 3)]
    assert got == [[0, 1, 2], [3, 4, 5], [6]]


# -------------------------------------------------------------------- ablate

def test_ablate_rules():
    cfg = RunConfig(eta=0.2)
    assert ablate(cfg, "no_context").variant == "no_context"
    nv = ablate(cfg, "no_vae")
    assert nv.variant == "no_vae" and nv.eta == 0.0
    assert ablate(cfg, "full").eta == 0.2
    with pytest.raises(InputError, match="unknown variant"):
        ablate(cfg, "tiny")


# ------------------------------------------------------------------- prepare

def test_prepare_pipeline(corpus_path):
    prep = prepare(small_cfg(corpus_path))
    assert prep.user_ids == ["ua", "ub", "uc"]
    # 12 posts -> 10 train (windows 10-7+1=4 per user), 2 test targets
    assert len(prep.train_windows) + len(prep.val_windows) == 12
    assert len(prep.val_windows) == 1
    assert len(prep.eval_sequences) == 6
    # vocabulary comes from the training region only
    assert "zonly" not in prep.vocab_words
    assert "alpha" in prep.vocab_words
    # queues attached everywhere, respecting the declared neighbours
    win = next(w for w in prep.train_windows if w.user_id == "ua")
    assert len(win.queues) == len(win.posts)
    assert all(q.user_id == "ub" for queue in win.queues for q in queue)
    assert all(len(q) <= 2 for q in win.queues)


def test_prepare_accepts_fixed_vocabulary(corpus_path):
    prep = prepare(small_cfg(corpus_path), vocab_words=["alpha", "zeta"])
    assert prep.vocab_words == ["alpha", "zeta"]


def test_prepare_requires_dataset_path(corpus_path):
    with pytest.raises(InputError, match="dataset_path"):
        prepare(small_cfg(corpus_path, dataset_path=""))


def test_prepare_empty_after_filtering(corpus_path):
    with pytest.raises(EmptyResultError, match="at least 40 posts"):
        prepare(small_cfg(corpus_path, min_posts=40))


# --------------------------------------------------------------------- train

def fit(corpus_path, **kw):
    cfg = small_cfg(corpus_path, **kw)
    prep = prepare(cfg)
    state = init_state(cfg, prep.vocab_words, prep.user_ids)
    result = train(state, prep.train_windows, prep.val_windows)
    return state, prep, result


def test_train_is_deterministic(corpus_path):
    s1, _, r1 = fit(corpus_path)
    s2, _, r2 = fit(corpus_path)
    assert r1.epochs_run == r2.epochs_run
    assert [e["total"] for e in r1.history] == [e["total"] for e in r2.history]
    for k in s1.params:
        np.testing.assert_array_equal(s1.params[k], s2.params[k])
    assert s1.time_scale == s2.time_scale
    assert 0.25 <= s1.time_scale <= 4.0


def test_train_writes_log_and_history(corpus_path, tmp_path):
    cfg = small_cfg(corpus_path)
    prep = prepare(cfg)
    state = init_state(cfg, prep.vocab_words, prep.user_ids)
    log = tmp_path / "train.log"
    result = train(state, prep.train_windows, prep.val_windows, log_path=str(log))
    lines = [json.loads(x) for x in log.read_text().splitlines()]
    assert len(lines) == result.epochs_run == 2
    assert lines[0]["epoch"] == 1
    assert lines[1]["lr"] == pytest.approx(cfg.lr * cfg.lr_decay)
    for key in ("val_loss", "total", "l_time", "l_stan", "l_x"):
        assert key in lines[0]
    assert result.history[0]["total"] == lines[0]["total"]


def test_zero_lr_stops_early_and_keeps_init(corpus_path):
    cfg = small_cfg(corpus_path, lr=0.0, epochs=10, patience=2)
    prep = prepare(cfg)
    state = init_state(cfg, prep.vocab_words, prep.user_ids)
    before = {k: a.copy() for k, a in state.params.items()}
    result = train(state, prep.train_windows, prep.val_windows)
    # identical validation losses never improve on epoch one's
    assert result.stopped_early and result.epochs_run == 3
    for k in before:
        np.testing.assert_array_equal(state.params[k], before[k])


def test_nonfinite_loss_aborts_and_restores(corpus_path):
    cfg = small_cfg(corpus_path)
    prep = prepare(cfg)
    state = init_state(cfg, prep.vocab_words, prep.user_ids)
    state.params["stance_w"][:] = np.nan
    result = train(state, prep.train_windows, prep.val_windows)
    assert result.aborted and result.epochs_run == 1
    assert not result.history


def test_train_requires_sequences(corpus_path):
    cfg = small_cfg(corpus_path)
    prep = prepare(cfg)
    state = init_state(cfg, prep.vocab_words, prep.user_ids)
    with pytest.raises(EmptyResultError, match="no training sequences"):
        train(state, [], [])


def test_dataset_loss_is_deterministic(corpus_path):
    cfg = small_cfg(corpus_path)
    prep = prepare(cfg)
    state = init_state(cfg, prep.vocab_words, prep.user_ids)
    a = dataset_loss(state, prep.train_windows)
    b = dataset_loss(state, prep.train_windows)
    assert a == b
    assert a["total"] == pytest.approx(
        cfg.eta * a["l_x"] + cfg.beta * a["l_time"] + cfg.gamma * a["l_stan"],
        rel=1e-9)
    with pytest.raises(EmptyResultError):
        dataset_loss(state, [])


# ---------------------------------------------------------------- evaluation

def test_evaluate_contract(corpus_path):
    state, prep, _ = fit(corpus_path)
    metrics, forecasts = evaluate(state, prep.eval_sequences)
    assert metrics.n_targets == len(forecasts) == 6
    assert sum(sum(row) for row in metrics.confusion) == 6
    trace = sum(metrics.confusion[c][c] for c in range(3))
    assert metrics.accuracy == pytest.approx(trace / 6)
    assert metrics.mse >= 0 and 0 <= metrics.defect_rate <= 1
    assert set(metrics.to_dict()) == {"accuracy", "mse", "confusion",
                                      "defect_rate", "n_targets"}
    with pytest.raises(EmptyResultError):
        evaluate(state, [])


def seq_of(uid, stances, t0=0.0):
    posts = [Post(uid, t0 + i, s, token_ids=[2]) for i, s in enumerate(stances)]
    s = EventSequence(uid, posts)
    s.queues = [[] for _ in posts]
    return s


def test_majority_baseline_hand_case():
    train_bu = {"a": [Post("a", 0.0, 0, token_ids=[2]),
                      Post("a", 1.0, 0, token_ids=[2]),
                      Post("a", 2.0, 1, token_ids=[2])]}
    seqs = [seq_of("a", [2, 0]), seq_of("a", [2, 1])]
    assert majority_baseline(train_bu, seqs) == pytest.approx(0.5)


def test_constant_mean_baseline_hand_case():
    train_bu = {"a": [Post("a", 0.0, 0, token_ids=[2]),
                      Post("a", 1.0, 0, token_ids=[2]),
                      Post("a", 4.0, 0, token_ids=[2])]}
    # mean training gap 2.0; eval gap 4.0 -> squared error 4.0
    seqs = [seq_of("a", [0, 0], t0=10.0)]
    seqs[0].posts[1] = Post("a", 14.0, 0, token_ids=[2])
    assert constant_mean_baseline(train_bu, seqs) == pytest.approx(4.0)


# --------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(corpus_path, tmp_path):
    state, prep, _ = fit(corpus_path)
    path = str(tmp_path / "model.ckpt")
    digest = checkpoint_save(state, path)
    assert digest == checkpoint_save(state, path)      # deterministic bytes
    loaded = checkpoint_load(path)
    assert loaded.config == state.config
    assert loaded.vocab_words == state.vocab_words
    assert loaded.user_ids == state.user_ids
    assert loaded.time_scale == state.time_scale
    for k in state.params:
        np.testing.assert_array_equal(loaded.params[k], state.params[k])
    m1, _ = evaluate(state, prep.eval_sequences)
    m2, _ = evaluate(loaded, prep.eval_sequences)
    assert m1.to_dict() == m2.to_dict()


def test_checkpoint_allows_runtime_overrides(corpus_path, tmp_path):
    state, _, _ = fit(corpus_path)
    path = str(tmp_path / "m.ckpt")
    checkpoint_save(state, path)
    run_cfg = dataclasses.replace(state.config, lr=0.42)
    loaded = checkpoint_load(path, run_cfg)
    assert loaded.config.lr == 0.42


def test_checkpoint_rejects_architecture_mismatch(corpus_path, tmp_path):
    state, _, _ = fit(corpus_path)
    path = str(tmp_path / "m.ckpt")
    checkpoint_save(state, path)
    run_cfg = dataclasses.replace(state.config, gru_hidden=7)
    assert config_hash(run_cfg) != config_hash(state.config)
    with pytest.raises(InputError, match="architecture mismatch") as exc:
        checkpoint_load(path, run_cfg)
    assert "gru_hidden" in str(exc.value)


def corrupt(path, out, fn):
    obj = json.loads(open(path, "rb").read().decode("utf-8"))
    fn(obj)
    with open(out, "w") as fh:
        json.dump(obj, fh)
    return out


def test_checkpoint_corruption_diagnostics(corpus_path, tmp_path):
    state, _, _ = fit(corpus_path)
    path = str(tmp_path / "m.ckpt")
    checkpoint_save(state, path)

    trunc = tmp_path / "t.ckpt"
    trunc.write_bytes(open(path, "rb").read()[:120])
    with pytest.raises(InputError, match="truncated or corrupt"):
        checkpoint_load(str(trunc))

    with pytest.raises(InputError, match="missing 'vocab'"):
        checkpoint_load(corrupt(path, str(tmp_path / "a.ckpt"),
                                lambda o: o.pop("vocab")))
    with pytest.raises(InputError, match="format_version"):
        checkpoint_load(corrupt(path, str(tmp_path / "b.ckpt"),
                                lambda o: o.update(format_version=99)))
    with pytest.raises(InputError, match="payload is corrupt"):
        checkpoint_load(corrupt(
            path, str(tmp_path / "c.ckpt"),
            lambda o: o["params"]["stance_w"].update(data="!!!")))
    with pytest.raises(InputError, match="check n_topics/vocab/dims"):
        checkpoint_load(corrupt(
            path, str(tmp_path / "d.ckpt"),
            lambda o: o["params"]["stance_w"].update(shape=[2, 2])))
    with pytest.raises(InputError, match="parameter set mismatch"):
        checkpoint_load(corrupt(path, str(tmp_path / "e.ckpt"),
                                lambda o: o["params"].pop("stance_w")))
    with pytest.raises(InputError, match="cannot open"):
        checkpoint_load(str(tmp_path / "missing.ckpt"))
