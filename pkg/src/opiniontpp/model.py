"""Joint model wiring: tweet encoder, topic VAE, neighbour attention, GRU, heads.

One differentiation graph is built per mini-batch. Every distinct post in
the batch (own posts and queued neighbour posts) is encoded exactly once;
the per-sequence recurrence then gathers rows out of the shared stacks.
Neighbour queues are grouped by length so the cross-post LSTM and the
attention scores run on row-stacked matrices instead of one post at a time.

Variants share one code path: ablated blocks enter the GRU input as zero
rows of the same width, so full and ablated models agree exactly whenever
the ablated signal happens to be absent from the data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, AttentionRecord, attend
from .autodiff import Graph, Tensor
from .config import RunConfig, rng_stream
from .data import EventSequence, Post, transform_intervals
from .encoders import EmbeddingTable, LstmState, TweetEncoderParams, encode_tweets, lstm_step
from .errors import InputError
from .topics import TopicModelParams, bow_vector, infer_topic, kl_rows, recon_rows, sample_z
from .tpp import (GruParams, QuadratureConfig, cross_entropy, expected_time,
                  expected_time_node, gru_step, intensity_base, predict_stance,
                  time_loss_gaussian, time_loss_tpp, total_loss)

MODES = ("train", "eval", "forecast")


@dataclass
class ModelState:
    """Everything a run carries besides the dataset: weights and lookups."""

    config: RunConfig
    params: dict[str, np.ndarray]
    vocab_words: list[str]
    user_ids: list[str]
    user_index: dict[str, int] = field(default_factory=dict)
    counters: dict[str, int] = field(default_factory=dict)
    # multiplicative correction from log-interval point forecasts back to
    # raw intervals, fitted on held-out windows after training
    time_scale: float = 1.0

    def __post_init__(self):
        if not self.user_index:
            self.user_index = {u: i for i, u in enumerate(self.user_ids)}
        self.counters.setdefault("intensity_evals", 0)

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def has_vae(self) -> bool:
        return self.config.variant != "no_vae"

    @property
    def has_context(self) -> bool:
        return self.config.variant != "no_context"

    @property
    def uses_intensity(self) -> bool:
        return self.config.variant != "gru_only"


def _xavier(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_state(cfg: RunConfig, vocab_words: list[str], user_ids: list[str]) -> ModelState:
    """Draw initial weights. Each parameter gets its own named substream so
    variants that share a parameter share its exact initial values.

    ``vocab_words`` excludes the PAD/UNK slots (it is what Vocabulary takes).
    """
    cfg.validate()
    v = len(vocab_words) + 2      # PAD and UNK rows
    e, h, k = cfg.embed_dim, cfg.lstm_hidden, cfg.n_topics
    m, ud, vh = cfg.gru_hidden, cfg.user_dim, cfg.vae_hidden
    h2 = 2 * h
    variant = cfg.variant
    has_vae = variant != "no_vae"
    has_context = variant != "no_context"

    def xa(name, rows, cols):
        return _xavier(rng_stream(cfg.seed, "init:" + name), rows, cols)

    p: dict[str, np.ndarray] = {}
    table = EmbeddingTable.random(v, e, rng_stream(cfg.seed, "init:emb"))
    if cfg.embeddings_path:
        from .encoders import Vocabulary
        table.load_pretrained(cfg.embeddings_path, Vocabulary(vocab_words))
    p["emb"] = table.weights
    p["user_emb"] = rng_stream(cfg.seed, "init:user_emb").uniform(
        -0.1, 0.1, size=(len(user_ids), ud))
    p["fwd_w"] = xa("fwd_w", e + h, 4 * h)
    p["fwd_b"] = np.zeros((1, 4 * h))
    p["bwd_w"] = xa("bwd_w", e + h, 4 * h)
    p["bwd_b"] = np.zeros((1, 4 * h))
    if has_context:
        p["cross_w"] = xa("cross_w", h2 + h2, 4 * h2)
        p["cross_b"] = np.zeros((1, 4 * h2))
        qdim = h2 + (k if has_vae else 0)
        p["att_w_h"] = xa("att_w_h", h2, qdim)
        if has_vae:
            p["att_w_z"] = xa("att_w_z", k, qdim)
    if has_vae:
        p["vae_enc_w"] = xa("vae_enc_w", v, vh)
        p["vae_enc_b"] = np.zeros((1, vh))
        p["vae_mu_w"] = xa("vae_mu_w", vh, k)
        p["vae_mu_b"] = np.zeros((1, k))
        p["vae_lv_w"] = xa("vae_lv_w", vh, k)
        p["vae_lv_b"] = np.zeros((1, k))
        p["vae_dec_w"] = xa("vae_dec_w", k, v)
        p["vae_dec_b"] = np.zeros((1, v))
    x_dim = h2 + h2 + k + 1 + ud     # context, tweet, topic, interval, user
    p["gru_gates_w"] = xa("gru_gates_w", x_dim + m, 2 * m)
    p["gru_gates_b"] = np.zeros((1, 2 * m))
    p["gru_cand_w"] = xa("gru_cand_w", x_dim + m, m)
    p["gru_cand_b"] = np.zeros((1, m))
    if variant == "gru_only":
        p["time_w"] = xa("time_w", m, 1)
        p["time_b"] = np.zeros((1, 1))
    else:
        p["v_lambda"] = xa("v_lambda", m, 1)
        p["b_lambda"] = np.zeros((1, 1))
        p["w_lambda"] = np.full((1, 1), 0.01)
    p["stance_w"] = xa("stance_w", m, 3)
    p["stance_b"] = np.zeros((1, 3))
    return ModelState(config=cfg, params=p, vocab_words=list(vocab_words),
                      user_ids=list(user_ids))


def param_leaves(g: Graph, state: ModelState) -> dict[str, Tensor]:
    """Register every parameter as a graph leaf, in fixed name order."""
    return {name: g.leaf(arr) for name, arr in state.params.items()}


@dataclass
class Forecast:
    """One next-post prediction (and its target when evaluating)."""

    user_id: str
    tau_hat: float            # transformed units
    dt_hat: float             # natural units
    defect: bool
    stance_probs: tuple
    t_last: float
    target_dt: float | None = None
    target_stance: int | None = None


@dataclass
class BuildResult:
    loss: Tensor | None
    l_x: Tensor | None
    l_time: Tensor | None
    l_stan: Tensor | None
    n_sequences: int
    n_steps: int
    predictions: list[Forecast]


def pool_posts(sequences: list[EventSequence], mode: str,
               include_queues: bool = True) -> list[Post]:
    """Distinct posts the batch graph will encode, in first-use order.

    Callers drawing per-post noise use this to size the draw; build_graph
    recomputes the same pool internally.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    seen: dict[int, int] = {}
    pool: list[Post] = []

    def visit(post):
        if id(post) not in seen:
            seen[id(post)] = len(pool)
            pool.append(post)

    for seq in sequences:
        n_consumed = len(seq.posts) if mode == "forecast" else len(seq.posts) - 1
        for i in range(n_consumed):
            visit(seq.posts[i])
            if include_queues:
                for q in seq.queues[i]:
                    visit(q)
    return pool


class _SeqStep:
    __slots__ = ("context", "weights_tensor", "weights_row", "queue")

    def __init__(self):
        self.context = None          # Tensor (1, 2h) or None
        self.weights_tensor = None   # softmax output for this step's group
        self.weights_row = -1
        self.queue = ()


def build_graph(g: Graph, pt: dict[str, Tensor], state: ModelState,
                sequences: list[EventSequence], mode: str = "train",
                noise: np.ndarray | None = None,
                trace: list[AttentionRecord] | None = None,
                step_offsets: dict[str, int] | None = None) -> BuildResult:
    """Record the forward pass for a batch of sequences on graph ``g``.

    mode "train" predicts after every consumed step, "eval" consumes all
    but the last post and predicts only that one, "forecast" consumes every
    post and predicts a hypothetical next one (no targets, no loss).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not sequences:
        raise ValueError("empty batch")
    cfg = state.config
    has_vae, has_context = state.has_vae, state.has_context
    h2 = 2 * cfg.lstm_hidden
    k = cfg.n_topics
    quad = QuadratureConfig(panels=cfg.quad_panels, lambda_cutoff=cfg.quad_cutoff,
                            horizon=cfg.quad_horizon)

    pool = pool_posts(sequences, mode, include_queues=has_context)
    row_of = {id(p): i for i, p in enumerate(pool)}
    n_pool = len(pool)

    # multiplicity of each pooled post as a consumed step (drives L_x weighting)
    counts = np.zeros(n_pool)
    for seq in sequences:
        n_consumed = len(seq.posts) if mode == "forecast" else len(seq.posts) - 1
        for i in range(n_consumed):
            counts[row_of[id(seq.posts[i])]] += 1.0

    enc = TweetEncoderParams(emb=pt["emb"], fwd_w=pt["fwd_w"], fwd_b=pt["fwd_b"],
                             bwd_w=pt["bwd_w"], bwd_b=pt["bwd_b"])
    h_rows = encode_tweets(g, enc, [p.token_ids for p in pool])
    h_stack = h_rows[0] if n_pool == 1 else g.concat_rows(*h_rows)

    mu_values = None
    zt = None
    l_x = None
    if has_vae:
        vocab_size = state.params["vae_enc_w"].shape[0]
        vae = TopicModelParams(enc_w=pt["vae_enc_w"], enc_b=pt["vae_enc_b"],
                               mu_w=pt["vae_mu_w"], mu_b=pt["vae_mu_b"],
                               lv_w=pt["vae_lv_w"], lv_b=pt["vae_lv_b"],
                               dec_w=pt["vae_dec_w"], dec_b=pt["vae_dec_b"])
        xb = g.leaf(np.vstack([bow_vector(p.token_ids, vocab_size) for p in pool]))
        posterior = infer_topic(g, vae, xb)
        if noise is None:
            noise = np.zeros((n_pool, k))
        if noise.shape != (n_pool, k):
            raise ValueError(
                f"noise shape {noise.shape} does not match pool ({n_pool}, {k})")
        zt = sample_z(g, posterior, noise)
        mu_values = posterior.mu.values
        if mode != "forecast":
            per_row = g.add(recon_rows(g, vae, xb, zt, cfg.recon_likelihood),
                            kl_rows(g, posterior))
            l_x = g.matmul(g.leaf(counts.reshape(1, -1)), per_row)

    # ---- batched neighbour attention, grouped by queue length ----
    steps: dict[tuple[int, int], _SeqStep] = {}
    groups: dict[int, list[tuple[int, int]]] = {}
    if has_context:
        for si, seq in enumerate(sequences):
            n_consumed = len(seq.posts) if mode == "forecast" else len(seq.posts) - 1
            for i in range(n_consumed):
                if seq.queues[i]:
                    groups.setdefault(len(seq.queues[i]), []).append((si, i))

    for qlen in sorted(groups):
        entries = groups[qlen]
        own_rows = [row_of[id(sequences[si].posts[i])] for si, i in entries]
        hq = g.gather_rows(h_stack, own_rows)
        q = g.concat_cols(hq, g.gather_rows(zt, own_rows)) if has_vae else hq
        b_l = len(entries)
        st = LstmState(hidden=g.leaf(np.zeros((b_l, h2))),
                       cell=g.leaf(np.zeros((b_l, h2))))
        ones_q = g.leaf(np.ones((q.shape[1], 1)))
        ones_ctx = g.leaf(np.ones((1, h2)))
        score_cols, hidden_steps = [], []
        for pos in range(qlen):
            nb_rows = [row_of[id(sequences[si].queues[i][pos])] for si, i in entries]
            x_p = g.gather_rows(h_stack, nb_rows)
            st = lstm_step(g, pt["cross_w"], pt["cross_b"], x_p, st)
            proj = g.matmul(st.hidden, pt["att_w_h"])
            if has_vae:
                proj = g.add(proj, g.matmul(g.gather_rows(zt, nb_rows), pt["att_w_z"]))
            score_cols.append(g.matmul(g.mul_elem(q, g.tanh(proj)), ones_q))
            hidden_steps.append(st.hidden)
        scores = score_cols[0] if qlen == 1 else g.concat_cols(*score_cols)
        weights = g.softmax_rows(scores)
        ctx = None
        for pos in range(qlen):
            part = g.mul_elem(g.matmul(g.slice_cols(weights, pos, pos + 1), ones_ctx),
                              hidden_steps[pos])
            ctx = part if ctx is None else g.add(ctx, part)
        for j, (si, i) in enumerate(entries):
            rec = _SeqStep()
            rec.context = g.gather_rows(ctx, [j])
            rec.weights_tensor = weights
            rec.weights_row = j
            rec.queue = tuple(sequences[si].queues[i])
            steps[(si, i)] = rec

    # ---- per-sequence recurrence and heads ----
    gru = GruParams(gates_w=pt["gru_gates_w"], gates_b=pt["gru_gates_b"],
                    cand_w=pt["gru_cand_w"], cand_b=pt["gru_cand_b"])
    m = gru.hidden_dim
    zero_ctx = g.leaf(np.zeros((1, h2)))
    zero_z = None if has_vae else g.leaf(np.zeros((1, k)))
    time_terms: list[Tensor] = []
    stance_terms: list[Tensor] = []
    predictions: list[Forecast] = []

    for si, seq in enumerate(sequences):
        uidx = state.user_index.get(seq.user_id)
        if uidx is None:
            raise InputError(f"user {seq.user_id!r} not present in the trained model")
        taus = transform_intervals([p.timestamp for p in seq.posts])
        u_row = g.gather_rows(pt["user_emb"], [uidx])
        gs = g.leaf(np.zeros((1, m)))
        n_consumed = len(seq.posts) if mode == "forecast" else len(seq.posts) - 1
        for i in range(n_consumed):
            post = seq.posts[i]
            row = row_of[id(post)]
            h_i = g.gather_rows(h_stack, [row])
            z_i = g.gather_rows(zt, [row]) if has_vae else zero_z
            rec = steps.get((si, i))
            c_i = rec.context if rec is not None else zero_ctx
            x = g.concat_cols(c_i, h_i, z_i, g.scalar(float(taus[i])), u_row)
            gs = gru_step(g, gru, gs, x)

            last = i == n_consumed - 1
            if mode == "train" or last:
                if mode == "forecast":
                    predictions.append(_forecast_from(state, gs, pt, seq, quad))
                    continue
                tau_next = float(taus[i + 1])
                nxt = seq.posts[i + 1]
                tau_hat_t, defect = None, False
                if state.uses_intensity:
                    a_t = intensity_base(g, gs, pt["v_lambda"], pt["b_lambda"])
                    if cfg.time_loss_mode == "gaussian_nll":
                        tau_hat_t, defect = expected_time_node(
                            g, a_t, pt["w_lambda"], quad, state.counters)
                        time_terms.append(time_loss_gaussian(g, tau_next, tau_hat_t,
                                                             cfg.sigma))
                    else:
                        time_terms.append(time_loss_tpp(g, a_t, pt["w_lambda"],
                                                        tau_next, state.counters))
                else:
                    tau_hat_t = g.add(g.matmul(gs, pt["time_w"]), pt["time_b"])
                    diff = g.sub(g.scalar(tau_next), tau_hat_t)
                    time_terms.append(g.mul_elem(diff, diff))
                probs = predict_stance(g, gs, pt["stance_w"], pt["stance_b"])
                stance_terms.append(cross_entropy(g, probs, nxt.stance))
                if mode == "eval" and last:
                    if tau_hat_t is not None:
                        tau_hat = float(tau_hat_t.values[0, 0])
                    else:
                        et = expected_time(float(a_t.values[0, 0]),
                                           float(pt["w_lambda"].values[0, 0]), quad)
                        tau_hat, defect = et.value, et.defect
                    predictions.append(Forecast(
                        user_id=seq.user_id, tau_hat=tau_hat,
                        dt_hat=state.time_scale * float(math.expm1(tau_hat)),
                        defect=defect,
                        stance_probs=tuple(float(v) for v in probs.values[0]),
                        t_last=post.timestamp,
                        target_dt=nxt.timestamp - post.timestamp,
                        target_stance=nxt.stance))

    if trace is not None:
        _append_trace(trace, state, sequences, steps, pool, row_of, mu_values,
                      mode, step_offsets)

    if mode == "forecast":
        return BuildResult(loss=None, l_x=None, l_time=None, l_stan=None,
                           n_sequences=len(sequences), n_steps=0,
                           predictions=predictions)

    inv_b = 1.0 / len(sequences)
    l_time = g.scale(_sum_terms(g, time_terms), inv_b)
    l_stan = g.scale(_sum_terms(g, stance_terms), inv_b)
    l_x_mean = g.scale(l_x, inv_b) if l_x is not None else None
    loss = total_loss(g, l_x_mean, l_time, l_stan, cfg.eta, cfg.beta, cfg.gamma)
    return BuildResult(loss=loss, l_x=l_x_mean, l_time=l_time, l_stan=l_stan,
                       n_sequences=len(sequences), n_steps=len(time_terms),
                       predictions=predictions)


def _sum_terms(g: Graph, terms: list[Tensor]) -> Tensor:
    if not terms:
        return g.scalar(0.0)
    if len(terms) == 1:
        return terms[0]
    return g.sum(g.concat_rows(*terms))


def _forecast_from(state: ModelState, gs: Tensor, pt: dict[str, Tensor],
                   seq: EventSequence, quad: QuadratureConfig) -> Forecast:
    """Read a next-post forecast straight off the current values."""
    g_val = gs.values
    defect = False
    if state.uses_intensity:
        a = float((g_val @ pt["v_lambda"].values + pt["b_lambda"].values)[0, 0])
        w = float(pt["w_lambda"].values[0, 0])
        et = expected_time(a, w, quad)
        tau_hat, defect = et.value, et.defect
    else:
        tau_hat = float((g_val @ pt["time_w"].values + pt["time_b"].values)[0, 0])
    logits = g_val @ pt["stance_w"].values + pt["stance_b"].values
    e = np.exp(logits - logits.max())
    probs = (e / e.sum()).ravel()
    return Forecast(user_id=seq.user_id, tau_hat=tau_hat,
                    dt_hat=state.time_scale * float(math.expm1(tau_hat)),
                    defect=defect,
                    stance_probs=tuple(float(v) for v in probs),
                    t_last=seq.posts[-1].timestamp)


def _append_trace(trace, state, sequences, steps, pool, row_of, mu_values,
                  mode, step_offsets):
    """Turn the recorded attention groups into export rows, in event order.

    Steps number each user's consumed posts consecutively; ``step_offsets``
    carries the running count across batches.
    """
    from .topics import topic_distribution
    offsets = step_offsets if step_offsets is not None else {}
    for si, seq in enumerate(sequences):
        n_consumed = len(seq.posts) if mode == "forecast" else len(seq.posts) - 1
        for i in range(n_consumed):
            step_no = offsets.get(seq.user_id, 0)
            offsets[seq.user_id] = step_no + 1
            rec = steps.get((si, i))
            if rec is None:
                continue
            own = topic_distribution(mu_values[row_of[id(seq.posts[i])]]) \
                if mu_values is not None else np.zeros(0)
            w_row = rec.weights_tensor.values[rec.weights_row]
            for slot, nb in enumerate(rec.queue):
                nb_topics = topic_distribution(mu_values[row_of[id(nb)]]) \
                    if mu_values is not None else np.zeros(0)
                trace.append(AttentionRecord(
                    user_id=seq.user_id, step=step_no, slot=slot,
                    weight=float(w_row[slot]), user_topics=own,
                    neighbor_topics=nb_topics))


def attend_reference(g: Graph, pt: dict[str, Tensor], state: ModelState,
                     h_i: Tensor, z_i: Tensor | None,
                     queue_h: list[Tensor], queue_z: list[Tensor | None]):
    """Unbatched attention over one step, for cross-checking the builder."""
    p = AttentionParams(w_h=pt["att_w_h"],
                        w_z=pt.get("att_w_z") if state.has_vae else None)
    from .encoders import encode_neighbor_queue
    enc = TweetEncoderParams(emb=pt["emb"], fwd_w=pt["fwd_w"], fwd_b=pt["fwd_b"],
                             bwd_w=pt["bwd_w"], bwd_b=pt["bwd_b"])
    hiddens = encode_neighbor_queue(g, enc, pt["cross_w"], pt["cross_b"], queue_h)
    neighbors = list(zip(hiddens, queue_z))
    return attend(g, p, h_i, z_i, neighbors, context_dim=2 * state.config.lstm_hidden)
