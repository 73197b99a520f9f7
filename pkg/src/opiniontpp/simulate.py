"""Synthetic marked multivariate Hawkes generator.

Events arrive by Ogata thinning from the intensity
``lam_u(t) = mu_u + sum_{v->u} sum_{t_j < t} alpha_uv * omega * exp(-omega (t - t_j))``.
Each accepted event is attributed to its background rate or to one past
event (sampled by kernel contribution); an attributed event may adopt
the trigger's topic. Stances spread by reading with a lag: when a user
posts, they snapshot the last ``influence_len`` in-neighbour posts that
match their home topic; at their *next* post they repeat a stance from
that snapshot with probability ``stance_copy_prob``, else fall back to
their own persistent lean. Opinions picked up while reading surface one
post later, so the influence source is exactly the neighbour history
available before the post being predicted. Leans are balanced inside
every home-topic community, which keeps neighbourhoods heterogeneous
forever: the copied component stays unpredictable from a user's own
history alone. Tweets are token bags drawn from the poster's topic word
set, a stance marker set, and background words, so both topics and
stances are recoverable from text.

Edges between users with the same home topic carry a boosted excitation
weight (topical homophily): a user's bursts are triggered mostly by
topically similar neighbours, the analogue of the attention pattern the
trained model is expected to rediscover. An optional session kernel lets
a user's own posts re-excite them, which produces bursty per-user timing
without changing who influences whose stances.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


@dataclass
class SimConfig:
    n_users: int = 200
    horizon: float = 48.0            # hours
    omega: float = 0.2               # kernel decay rate, 1/hour
    alpha: float = 0.05              # kernel mass per plain edge
    self_alpha: float = 0.0          # kernel mass of a user's own posts (sessions)
    topic_match_boost: float = 3.0   # multiplier on same-home-topic edges
    mu_min: float = 0.06             # slowest user's base rate, events/hour
    mu_max: float = 0.30
    in_degree_same: int = 2          # in-edges from same-home-topic users
    in_degree_other: int = 2
    n_topics: int = 8
    words_per_topic: int = 12
    n_background_words: int = 30
    stance_words_per_class: int = 6
    tweet_len: int = 20
    topic_word_frac: float = 0.70
    stance_word_frac: float = 0.15
    topic_adopt_prob: float = 0.30
    stance_copy_prob: float = 0.45
    stance_sharpness: float = 0.60   # P(own lean) absent copying
    influence_len: int = 3           # recent same-topic neighbour posts a user reads
    edges_path: str = ""             # optional: read "src dst" lines instead of sampling
    edges: list | None = None        # programmatic override: [(src, dst), ...]

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in known:
                raise InputError(f"unknown simulation config key: {k!r}")
        cfg = cls(**d)
        cfg.validate_static()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "SimConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                d = json.load(fh)
        except OSError as e:
            raise InputError(f"cannot open simulation config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise InputError(f"{path}: invalid JSON ({e.msg})") from e
        if not isinstance(d, dict):
            raise InputError(f"{path}: simulation config must be a JSON object")
        return cls.from_dict(d)

    def validate_static(self) -> None:
        checks = [
            ("n_users", self.n_users >= 1),
            ("horizon", self.horizon >= 0.0),
            ("omega", self.omega > 0.0),
            ("alpha", self.alpha >= 0.0),
            ("self_alpha", self.self_alpha >= 0.0),
            ("topic_match_boost", self.topic_match_boost >= 1.0),
            ("mu_min", 0.0 < self.mu_min <= self.mu_max),
            ("n_topics", self.n_topics >= 1),
            ("words_per_topic", self.words_per_topic >= 1),
            ("tweet_len", self.tweet_len >= 1),
            ("topic_word_frac", 0.0 <= self.topic_word_frac <= 1.0),
            ("stance_word_frac",
             0.0 <= self.stance_word_frac <= 1.0 - self.topic_word_frac),
            ("topic_adopt_prob", 0.0 <= self.topic_adopt_prob <= 1.0),
            ("stance_copy_prob", 0.0 <= self.stance_copy_prob <= 1.0),
            ("stance_sharpness", 0.0 <= self.stance_sharpness <= 1.0),
            ("influence_len", self.influence_len >= 1),
            ("in_degree_same", self.in_degree_same >= 0),
            ("in_degree_other", self.in_degree_other >= 0),
        ]
        for key, ok in checks:
            if not ok:
                raise InputError(f"invalid simulation config value for key {key!r}")


@dataclass
class SimEvent:
    user: int
    timestamp: float
    topic: int
    stance: int
    tokens: list[str]
    source: int | None   # index of the triggering event, None for background


@dataclass
class SimResult:
    config: SimConfig
    events: list[SimEvent]
    edges: list[tuple[int, int]]          # (src influences dst)
    home_topic: np.ndarray                # (n_users,)
    lean: np.ndarray                      # (n_users,) fallback stance class
    mu: np.ndarray                        # (n_users,)
    topic_words: list[list[str]]
    stance_words: list[list[str]]
    background_words: list[str]

    def user_name(self, u: int) -> str:
        return f"u{u:03d}"


def _word_banks(cfg: SimConfig):
    topic_words = [[f"t{k}w{j}" for j in range(cfg.words_per_topic)]
                   for k in range(cfg.n_topics)]
    stance_words = [[f"s{s}m{j}" for j in range(cfg.stance_words_per_class)]
                    for s in range(3)]
    background = [f"bg{j}" for j in range(cfg.n_background_words)]
    return topic_words, stance_words, background


def _build_graph(cfg: SimConfig, home: np.ndarray,
                 rng: np.random.Generator) -> list[tuple[int, int]]:
    if cfg.edges is not None:
        return [(int(s), int(d)) for s, d in cfg.edges]
    if cfg.edges_path:
        return load_edges(cfg.edges_path, cfg.n_users)
    edges = set()
    for u in range(cfg.n_users):
        same = [v for v in range(cfg.n_users) if v != u and home[v] == home[u]]
        other = [v for v in range(cfg.n_users) if v != u and home[v] != home[u]]
        for pool, deg in ((same, cfg.in_degree_same), (other, cfg.in_degree_other)):
            if pool and deg:
                picks = rng.choice(len(pool), size=min(deg, len(pool)), replace=False)
                for i in picks:
                    edges.add((pool[int(i)], u))
    return sorted(edges)


def load_edges(path: str, n_users: int) -> list[tuple[int, int]]:
    edges = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot open edge list {path}: {e}") from e
    with fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise InputError(f"{path} line {lineno}: expected 'src dst'")
            s, d = (_user_index(tok, path, lineno) for tok in parts)
            if not (0 <= s < n_users and 0 <= d < n_users):
                raise InputError(f"{path} line {lineno}: user index out of range")
            edges.append((s, d))
    return edges


def _user_index(tok: str, path: str, lineno: int) -> int:
    raw = tok[1:] if tok.startswith("u") else tok
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"{path} line {lineno}: bad user id {tok!r}") from None


def branching_matrix(cfg: SimConfig, edges, home: np.ndarray) -> np.ndarray:
    """Entry [u, v] is the expected number of direct u-events triggered by
    one v-event (the kernel integrates to alpha per edge); the diagonal
    carries the session kernel."""
    b = np.zeros((cfg.n_users, cfg.n_users))
    for src, dst in edges:
        a = cfg.alpha
        if home[src] == home[dst]:
            a *= cfg.topic_match_boost
        b[dst, src] += a
    b[np.diag_indices(cfg.n_users)] += cfg.self_alpha
    return b


def simulate(cfg: SimConfig, seed: int) -> SimResult:
    """Ogata thinning over the full multivariate intensity.

    Deterministic given (cfg, seed). Rejects configurations whose
    branching matrix has spectral radius >= 1 (non-stationary cascade).
    """
    cfg.validate_static()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5eed]))
    n = cfg.n_users
    home = np.arange(n) % cfg.n_topics
    # communities differ in base activity: log-spaced per home topic
    rates = np.exp(np.linspace(math.log(cfg.mu_min), math.log(cfg.mu_max),
                               cfg.n_topics))
    mu = rates[home]
    # cycle leans inside each community so no neighbourhood can settle on
    # one stance, whatever n_topics is
    lean = np.zeros(n, dtype=int)
    for k in range(cfg.n_topics):
        members = np.flatnonzero(home == k)
        lean[members] = np.arange(len(members)) % 3
    edges = _build_graph(cfg, home, rng)

    bmat = branching_matrix(cfg, edges, home)
    radius = float(np.max(np.abs(np.linalg.eigvals(bmat)))) if len(edges) else 0.0
    if radius >= 1.0:
        raise InputError(
            f"non-stationary simulation config: branching spectral radius "
            f"{radius:.3f} >= 1 (lower key 'alpha' or 'topic_match_boost')")

    topic_words, stance_words, background = _word_banks(cfg)
    out_edges: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for src, dst in edges:
        a = cfg.alpha * (cfg.topic_match_boost if home[src] == home[dst] else 1.0)
        out_edges[src].append((dst, a))
    if cfg.self_alpha > 0.0:
        # session kernel: own posts re-excite the poster, but never enter
        # their reading queue
        for u in range(n):
            out_edges[u].append((u, cfg.self_alpha))

    # sources[u]: (event_idx, t_j, alpha) kernels currently exciting u
    sources: list[list[tuple[int, float, float]]] = [[] for _ in range(n)]
    excite = np.zeros(n)   # running sum of kernel contributions per user
    # heard[u]: stances of the last influence_len in-neighbour posts whose
    # topic matches u's home topic, oldest first; snap[u] freezes heard[u]
    # at u's previous post, the pool their next stance is copied from
    heard: list[list[int]] = [[] for _ in range(n)]
    snap: list[list[int]] = [[] for _ in range(n)]
    events: list[SimEvent] = []
    t = 0.0
    mu_sum = float(mu.sum())

    def sample_tokens(topic: int, stance: int) -> list[str]:
        words = []
        for _ in range(cfg.tweet_len):
            r = rng.random()
            if r < cfg.topic_word_frac:
                bank = topic_words[topic]
            elif r < cfg.topic_word_frac + cfg.stance_word_frac:
                bank = stance_words[stance]
            else:
                bank = background
            words.append(bank[int(rng.integers(len(bank)))])
        return words

    while True:
        lam_bar = mu_sum + float(excite.sum())
        t_cand = t + rng.exponential(1.0 / lam_bar)
        if t_cand >= cfg.horizon:
            break
        decay = math.exp(-cfg.omega * (t_cand - t))
        excite *= decay
        t = t_cand
        lam = mu + excite
        total = float(lam.sum())
        # thinning audit: the decayed intensity can never exceed the bound
        assert total <= lam_bar * (1.0 + 1e-9), (total, lam_bar)
        if rng.random() * lam_bar > total:
            continue

        u = int(rng.choice(n, p=lam / total))
        # attribute to background or to one specific exciting event
        contribs = [(idx, a * cfg.omega * math.exp(-cfg.omega * (t - tj)))
                    for idx, tj, a in sources[u]]
        kernel_sum = sum(c for _, c in contribs)
        assert abs(kernel_sum - excite[u]) <= 1e-9 * (1.0 + kernel_sum), \
            (kernel_sum, excite[u])
        source = None
        r = rng.random() * (mu[u] + kernel_sum)
        if r >= mu[u]:
            r -= mu[u]
            for idx, c in contribs:
                if r < c:
                    source = idx
                    break
                r -= c
            if source is None and contribs:
                source = contribs[-1][0]

        topic = int(home[u])
        if source is not None and rng.random() < cfg.topic_adopt_prob:
            topic = events[source].topic
        stance = None
        if snap[u] and rng.random() < cfg.stance_copy_prob:
            stance = snap[u][int(rng.integers(len(snap[u])))]
        if stance is None:
            if rng.random() < cfg.stance_sharpness:
                stance = int(lean[u])
            else:
                stance = (int(lean[u]) + 1 + int(rng.integers(2))) % 3

        idx = len(events)
        events.append(SimEvent(user=u, timestamp=t, topic=topic, stance=stance,
                               tokens=sample_tokens(topic, stance), source=source))
        snap[u] = list(heard[u])
        for dst, a in out_edges[u]:
            excite[dst] += a * cfg.omega
            sources[dst].append((idx, t, a))
            if len(sources[dst]) > 64:
                sources[dst] = [s for s in sources[dst]
                                if cfg.omega * (t - s[1]) < 46.0]
            if dst != u and topic == home[dst]:
                heard[dst].append(stance)
                if len(heard[dst]) > cfg.influence_len:
                    heard[dst].pop(0)

    return SimResult(config=cfg, events=events, edges=edges, home_topic=home,
                     lean=lean, mu=mu, topic_words=topic_words,
                     stance_words=stance_words, background_words=background)


def write_dataset(result: SimResult, out_dir: str) -> dict[str, str]:
    """Write dataset.jsonl, edges.txt, and the ground-truth sidecar.

    Output bytes are a pure function of the SimResult, so a fixed seed
    reproduces identical files.
    """
    os.makedirs(out_dir, exist_ok=True)
    cfg = result.config
    in_neighbors: dict[int, list[str]] = {u: [] for u in range(cfg.n_users)}
    for src, dst in result.edges:
        in_neighbors[dst].append(result.user_name(src))
    for u in in_neighbors:
        in_neighbors[u] = sorted(set(in_neighbors[u]))

    paths = {
        "dataset": os.path.join(out_dir, "dataset.jsonl"),
        "edges": os.path.join(out_dir, "edges.txt"),
        "sidecar": os.path.join(out_dir, "sidecar.json"),
    }
    with open(paths["dataset"], "w", encoding="utf-8") as fh:
        for ev in result.events:
            row = {
                "user_id": result.user_name(ev.user),
                "timestamp": ev.timestamp,
                "text": " ".join(ev.tokens),
                "stance": ev.stance,
                "neighbors": in_neighbors[ev.user],
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(paths["edges"], "w", encoding="utf-8") as fh:
        for src, dst in result.edges:
            fh.write(f"{result.user_name(src)} {result.user_name(dst)}\n")

    sidecar = {
        "config": dataclasses.asdict(cfg),
        "topic_words": {str(k): w for k, w in enumerate(result.topic_words)},
        "stance_words": {str(s): w for s, w in enumerate(result.stance_words)},
        "background_words": result.background_words,
        "user_home_topic": {result.user_name(u): int(result.home_topic[u])
                            for u in range(cfg.n_users)},
        "user_lean": {result.user_name(u): int(result.lean[u])
                      for u in range(cfg.n_users)},
        "user_mu": {result.user_name(u): float(result.mu[u])
                    for u in range(cfg.n_users)},
        "events": [
            {
                "user_id": result.user_name(ev.user),
                "timestamp": ev.timestamp,
                "topic": ev.topic,
                "stance": ev.stance,
                "source_user": (None if ev.source is None
                                else result.user_name(result.events[ev.source].user)),
                "source_timestamp": (None if ev.source is None
                                     else result.events[ev.source].timestamp),
            }
            for ev in result.events
        ],
    }
    with open(paths["sidecar"], "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True)
    return paths
