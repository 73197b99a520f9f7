"""Training engine: Adam with per-epoch decay, gradient clipping, early
stopping on a held-out slice, evaluation metrics, checkpoints, baselines.

The parameter trajectory is fully determined by (seed, config, data):
shuffling, VAE noise, and the validation split each draw from their own
named substream of the run seed.
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import ARCH_KEYS, RunConfig, VARIANTS, config_hash, rng_stream
from .data import (EventSequence, Post, attach_neighbor_queues, build_eval_sequences,
                   build_vocab, encode_posts, filter_and_window, filter_users,
                   group_by_user, load_jsonl, neighbor_sets, split_train_test)
from .errors import EmptyResultError, InputError
from .model import BuildResult, Forecast, ModelState, build_graph, param_leaves, pool_posts
from .autodiff import Graph

CHECKPOINT_VERSION = 1


def ablate(cfg: RunConfig, variant: str) -> RunConfig:
    """Derive an ablated run config. no_vae drops the topic loss entirely."""
    if variant not in VARIANTS:
        raise InputError(f"unknown variant {variant!r}; pick from {VARIANTS}")
    out = dataclasses.replace(cfg, variant=variant)
    if variant == "no_vae":
        out = dataclasses.replace(out, eta=0.0)
    return out


# ---------------------------------------------------------------- data prep

@dataclass
class Prepared:
    posts: list[Post]
    by_user: dict[str, list[Post]]          # filtered users, full chronology
    train_by_user: dict[str, list[Post]]
    test_by_user: dict[str, list[Post]]
    vocab_words: list[str]
    user_ids: list[str]
    train_windows: list[EventSequence]
    val_windows: list[EventSequence]
    eval_sequences: list[EventSequence]
    stats: dict


def prepare(cfg: RunConfig, vocab_words: list[str] | None = None) -> Prepared:
    """Load, filter, split, build the vocabulary, window, attach queues.

    The vocabulary is built from training-region posts only so test text
    never leaks into it; pass ``vocab_words`` to reuse a checkpoint's
    vocabulary instead.
    """
    if not cfg.dataset_path:
        raise InputError("config key 'dataset_path' is required")
    posts, stats = load_jsonl(cfg.dataset_path)
    by_user = filter_users(group_by_user(posts), cfg.min_posts)
    if not by_user:
        raise EmptyResultError(
            f"no user has at least {cfg.min_posts} posts in {cfg.dataset_path}")
    train_bu, test_bu = split_train_test(by_user, cfg.train_frac)
    if vocab_words is not None:
        from .encoders import Vocabulary
        vocab = Vocabulary(vocab_words)
    else:
        corpus = [p.tokens for u in sorted(train_bu)
                  for p in train_bu[u] if p.tokens is not None]
        vocab = build_vocab(corpus, cfg.vocab_size)
    encode_posts(posts, vocab, cfg.max_tweet_len)

    windows = filter_and_window(train_bu, cfg.min_posts, cfg.max_seq_len)
    if not windows:
        raise EmptyResultError("no training sequences after filtering and windowing")
    eval_seqs = build_eval_sequences(by_user, test_bu, cfg.max_seq_len)
    nbrs = neighbor_sets(posts)
    attach_neighbor_queues(windows + eval_seqs, posts, nbrs, cfg.queue_len)

    n_val = 0
    if cfg.val_frac > 0 and len(windows) > 1:
        n_val = min(len(windows) - 1, max(1, round(cfg.val_frac * len(windows))))
    order = rng_stream(cfg.seed, "valsplit").permutation(len(windows))
    val = [windows[i] for i in order[:n_val]]
    train = [windows[i] for i in order[n_val:]]
    return Prepared(posts=posts, by_user=by_user, train_by_user=train_bu,
                    test_by_user=test_bu, vocab_words=vocab.id_to_word[2:],
                    user_ids=sorted(by_user), train_windows=train,
                    val_windows=val, eval_sequences=eval_seqs, stats=stats)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    skipped: int = 0

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(a) for k, a in params.items()},
                   v={k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              st: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> int:
    """One bias-corrected update in place; non-finite grads are skipped."""
    st.t += 1
    c1 = 1.0 - beta1 ** st.t
    c2 = 1.0 - beta2 ** st.t
    skipped = 0
    for name, gr in grads.items():
        if not np.all(np.isfinite(gr)):
            skipped += 1
            continue
        st.m[name] = beta1 * st.m[name] + (1.0 - beta1) * gr
        st.v[name] = beta2 * st.v[name] + (1.0 - beta2) * gr * gr
        params[name] -= lr * (st.m[name] / c1) / (np.sqrt(st.v[name] / c2) + eps)
    st.skipped += skipped
    return skipped


def clip_global(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients by a common factor so the global norm is at most
    max_norm; direction is preserved. Returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    epochs_run: int
    best_val: float
    stopped_early: bool
    aborted: bool
    history: list[dict] = field(default_factory=list)


def _batches(n: int, size: int):
    for lo in range(0, n, size):
        yield range(lo, min(lo + size, n))


def _run_batch(state: ModelState, seqs: list[EventSequence],
               noise_rng: np.random.Generator | None) -> tuple[Graph, dict, BuildResult]:
    g = Graph()
    pt = param_leaves(g, state)
    noise = None
    if state.has_vae and noise_rng is not None:
        pool = pool_posts(seqs, "train", include_queues=state.has_context)
        noise = noise_rng.standard_normal((len(pool), state.config.n_topics))
    res = build_graph(g, pt, state, seqs, "train", noise=noise)
    return g, pt, res


def dataset_loss(state: ModelState, seqs: list[EventSequence]) -> dict[str, float]:
    """Deterministic (zero-noise) mean loss over a sequence set."""
    cfg = state.config
    sums = {"l_x": 0.0, "l_time": 0.0, "l_stan": 0.0, "total": 0.0}
    n = 0
    for idx in _batches(len(seqs), cfg.batch_size):
        batch = [seqs[i] for i in idx]
        _, _, res = _run_batch(state, batch, noise_rng=None)
        b = res.n_sequences
        sums["total"] += float(res.loss.values[0, 0]) * b
        sums["l_time"] += float(res.l_time.values[0, 0]) * b
        sums["l_stan"] += float(res.l_stan.values[0, 0]) * b
        if res.l_x is not None:
            sums["l_x"] += float(res.l_x.values[0, 0]) * b
        n += b
    if n == 0:
        raise EmptyResultError("no sequences to score")
    return {k: v / n for k, v in sums.items()}


def train(state: ModelState, train_seqs: list[EventSequence],
          val_seqs: list[EventSequence], log_path: str | None = None,
          progress=None) -> TrainResult:
    """Fit in place. Early-stops when validation loss fails to improve for
    ``patience`` consecutive epochs and restores the best parameters."""
    if not train_seqs:
        raise EmptyResultError("no training sequences")
    cfg = state.config
    shuffle_rng = rng_stream(cfg.seed, "shuffle")
    noise_rng = rng_stream(cfg.seed, "noise")
    opt = AdamState.init(state.params)
    lr = cfg.lr
    best_val = math.inf
    best_params = {k: a.copy() for k, a in state.params.items()}
    bad = 0
    result = TrainResult(epochs_run=0, best_val=math.inf,
                         stopped_early=False, aborted=False)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = shuffle_rng.permutation(len(train_seqs))
            sums = {"l_x": 0.0, "l_time": 0.0, "l_stan": 0.0, "total": 0.0}
            n_seen = 0
            for idx in _batches(len(order), cfg.batch_size):
                batch = [train_seqs[order[i]] for i in idx]
                g, pt, res = _run_batch(state, batch, noise_rng)
                total = float(res.loss.values[0, 0])
                if not math.isfinite(total):
                    state.params = best_params
                    result.aborted = True
                    result.epochs_run = epoch
                    return result
                grads_by_id = g.backward(res.loss)
                grads = {}
                for name, t in pt.items():
                    gr = grads_by_id.get(t.node_id)
                    grads[name] = gr if gr is not None else np.zeros_like(t.values)
                grads["emb"][0, :] = 0.0     # PAD embedding stays fixed
                clip_global(grads, cfg.clip_norm)
                adam_step(state.params, grads, opt, lr,
                          cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
                b = res.n_sequences
                n_seen += b
                sums["total"] += total * b
                sums["l_time"] += float(res.l_time.values[0, 0]) * b
                sums["l_stan"] += float(res.l_stan.values[0, 0]) * b
                if res.l_x is not None:
                    sums["l_x"] += float(res.l_x.values[0, 0]) * b
            epoch_means = {k: v / n_seen for k, v in sums.items()}
            if val_seqs:
                val_loss = dataset_loss(state, val_seqs)["total"]
            else:
                val_loss = epoch_means["total"]
            entry = {"epoch": epoch, "lr": lr, "val_loss": val_loss, **epoch_means}
            result.history.append(entry)
            result.epochs_run = epoch
            if log_fh:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            if progress:
                progress(entry)
            if val_loss < best_val:
                best_val = val_loss
                best_params = {k: a.copy() for k, a in state.params.items()}
                bad = 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    result.stopped_early = True
                    break
            lr *= cfg.lr_decay
    finally:
        if log_fh:
            log_fh.close()
    state.params = best_params
    state.time_scale = _fit_time_scale(state, val_seqs or train_seqs)
    result.best_val = best_val
    return result


def _fit_time_scale(state: ModelState, seqs: list[EventSequence]) -> float:
    """Least-squares slope mapping expm1(tau_hat) onto the observed gaps.

    The point forecast lives on the log1p scale, so its naive inverse sits
    near the geometric mean of the gaps and undershoots the arithmetic mean
    that squared error cares about. One multiplicative correction, fitted on
    held-out windows, absorbs the gap."""
    cfg = state.config
    num, den = 0.0, 0.0
    for idx in _batches(len(seqs), cfg.batch_size):
        batch = [seqs[i] for i in idx]
        g = Graph()
        pt = param_leaves(g, state)
        res = build_graph(g, pt, state, batch, "eval", noise=None)
        for f in res.predictions:
            x = math.expm1(f.tau_hat)
            num += f.target_dt * x
            den += x * x
    if den <= 0.0 or not math.isfinite(num / den):
        return 1.0
    return float(min(max(num / den, 0.25), 4.0))


# ---------------------------------------------------------------- evaluation

@dataclass
class Metrics:
    accuracy: float
    mse: float                      # natural time units squared
    confusion: list[list[int]]      # [true][predicted], 3x3
    defect_rate: float
    n_targets: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate(state: ModelState, eval_seqs: list[EventSequence]
             ) -> tuple[Metrics, list[Forecast]]:
    """Score one-step-ahead predictions on held-out targets."""
    if not eval_seqs:
        raise EmptyResultError("no evaluation sequences (is the test split empty?)")
    cfg = state.config
    forecasts: list[Forecast] = []
    for idx in _batches(len(eval_seqs), cfg.batch_size):
        batch = [eval_seqs[i] for i in idx]
        g = Graph()
        pt = param_leaves(g, state)
        res = build_graph(g, pt, state, batch, "eval", noise=None)
        forecasts.extend(res.predictions)
    conf = [[0] * 3 for _ in range(3)]
    sq_err = 0.0
    defects = 0
    for f in forecasts:
        pred = int(np.argmax(f.stance_probs))
        conf[f.target_stance][pred] += 1
        sq_err += (f.dt_hat - f.target_dt) ** 2
        defects += int(f.defect)
    n = len(forecasts)
    acc = sum(conf[c][c] for c in range(3)) / n
    return (Metrics(accuracy=acc, mse=sq_err / n, confusion=conf,
                    defect_rate=defects / n, n_targets=n), forecasts)


def majority_baseline(train_by_user: dict[str, list[Post]],
                      eval_seqs: list[EventSequence]) -> float:
    """Accuracy of always predicting the most common training stance."""
    counts = [0, 0, 0]
    for ps in train_by_user.values():
        for p in ps:
            counts[p.stance] += 1
    label = int(np.argmax(counts))
    hits = sum(1 for s in eval_seqs if s.posts[-1].stance == label)
    return hits / len(eval_seqs) if eval_seqs else 0.0


def constant_mean_baseline(train_by_user: dict[str, list[Post]],
                           eval_seqs: list[EventSequence]) -> float:
    """MSE of always predicting the mean training interval (natural units)."""
    gaps = []
    for ps in train_by_user.values():
        gaps.extend(ps[i + 1].timestamp - ps[i].timestamp for i in range(len(ps) - 1))
    c = float(np.mean(gaps)) if gaps else 0.0
    errs = [(s.posts[-1].timestamp - s.posts[-2].timestamp - c) ** 2
            for s in eval_seqs]
    return float(np.mean(errs)) if errs else 0.0


# ---------------------------------------------------------------- checkpoints

def checkpoint_save(state: ModelState, path: str) -> str:
    """Write a deterministic JSON checkpoint; returns its sha256 hex digest."""
    obj = {
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(state.config),
        "config_hash": config_hash(state.config),
        "time_scale": state.time_scale,
        "vocab": state.vocab_words,
        "user_ids": state.user_ids,
        "params": {
            name: {"shape": list(arr.shape),
                   "data": base64.b64encode(
                       np.ascontiguousarray(arr, dtype=np.float64).tobytes()
                   ).decode("ascii")}
            for name, arr in state.params.items()
        },
    }
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def _expected_shapes(cfg: RunConfig, n_vocab: int, n_users: int) -> dict[str, tuple]:
    from .model import init_state      # shapes come from a throwaway init
    plain = dataclasses.replace(cfg, embeddings_path="")
    tiny = init_state(plain, ["w%d" % i for i in range(n_vocab)],
                      ["u%d" % i for i in range(n_users)])
    return {k: a.shape for k, a in tiny.params.items()}


def checkpoint_load(path: str, run_cfg: RunConfig | None = None) -> ModelState:
    """Restore a model. A caller-supplied config may change data paths or
    runtime knobs but must agree on every architecture key."""
    try:
        with open(path, "rb") as fh:
            obj = json.loads(fh.read().decode("utf-8"))
    except OSError as e:
        raise InputError(f"cannot open checkpoint {path}: {e}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise InputError(f"checkpoint {path} is truncated or corrupt: {e}") from e
    for key in ("format_version", "config", "config_hash", "vocab", "user_ids", "params"):
        if key not in obj:
            raise InputError(f"checkpoint {path} is truncated or corrupt: missing {key!r}")
    if obj["format_version"] != CHECKPOINT_VERSION:
        raise InputError(f"checkpoint {path} has format_version "
                         f"{obj['format_version']}, expected {CHECKPOINT_VERSION}")
    ckpt_cfg = RunConfig.from_dict(obj["config"])
    if run_cfg is not None:
        h_run, h_ckpt = config_hash(run_cfg), config_hash(ckpt_cfg)
        if h_run != h_ckpt:
            diffs = [f"{k}: checkpoint={getattr(ckpt_cfg, k)!r} run={getattr(run_cfg, k)!r}"
                     for k in ARCH_KEYS if getattr(ckpt_cfg, k) != getattr(run_cfg, k)]
            raise InputError("checkpoint architecture mismatch "
                             f"({h_ckpt} vs {h_run}): " + "; ".join(diffs))
        cfg = run_cfg
    else:
        cfg = ckpt_cfg
    vocab_words = list(obj["vocab"])
    user_ids = list(obj["user_ids"])
    shapes = _expected_shapes(cfg, len(vocab_words), len(user_ids))
    if set(obj["params"]) != set(shapes):
        raise InputError(f"checkpoint {path} parameter set mismatch: "
                         f"missing {sorted(set(shapes) - set(obj['params']))}, "
                         f"extra {sorted(set(obj['params']) - set(shapes))}")
    params = {}
    for name, spec in obj["params"].items():
        shape = tuple(spec["shape"])
        if shape != shapes[name]:
            raise InputError(
                f"checkpoint {path}: parameter {name!r} has shape {shape}, the "
                f"config implies {shapes[name]} (check n_topics/vocab/dims)")
        try:
            raw = base64.b64decode(spec["data"], validate=True)
        except Exception as e:
            raise InputError(f"checkpoint {path}: parameter {name!r} payload "
                             f"is corrupt: {e}") from e
        if len(raw) != 8 * shape[0] * shape[1]:
            raise InputError(f"checkpoint {path}: parameter {name!r} payload "
                             f"length {len(raw)} does not match shape {shape}")
        params[name] = np.frombuffer(raw, dtype=np.float64).reshape(shape).copy()
    return ModelState(config=cfg, params=params, vocab_words=vocab_words,
                      user_ids=user_ids,
                      time_scale=float(obj.get("time_scale", 1.0)))
