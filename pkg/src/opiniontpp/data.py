"""Dataset ingestion and preprocessing for user event sequences.

A dataset is JSON lines, one post per line:
``{"user_id": str, "timestamp": number, "text": str | "token_ids": [int],
"stance": 0|1|2, "neighbors": [str]}``. Timestamps are in the dataset's
natural units (hours or minutes); per-user order must be strictly
increasing after loading (ties are nudged by +1e-6). Preprocessing
follows the protocol: drop users with fewer than 3 posts, reserve the
last ~10% of each user's posts as test targets, cut the rest into
overlapping windows of at most 7 posts at stride 1, and attach to every
post the queue of the L most recent strictly-earlier neighbour posts.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .encoders import Vocabulary
from .errors import InputError

STANCE_CLASSES = (0, 1, 2)


@dataclass
class Post:
    user_id: str
    timestamp: float
    stance: int
    tokens: list[str] | None = None
    token_ids: list[int] | None = None
    neighbors: tuple[str, ...] = ()


@dataclass
class EventSequence:
    """One user's chronological window; queues[i] lists the neighbour
    posts visible just before posts[i], oldest first."""

    user_id: str
    posts: list[Post]
    queues: list[list[Post]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.posts)


def load_jsonl(path: str) -> tuple[list[Post], dict]:
    """Parse, validate, and sort a dataset file.

    Returns the posts sorted by (user_id, timestamp) plus a stats dict;
    duplicate per-user timestamps are shifted forward by 1e-6 and counted
    under stats["shifted"].
    """
    posts = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot open dataset {path}: {e}") from e
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise InputError(f"{path} line {lineno}: invalid JSON ({e.msg})") from e
            posts.append(_parse_post(obj, path, lineno))

    posts.sort(key=lambda p: (p.user_id, p.timestamp))
    shifted = 0
    prev_user, prev_ts = None, None
    for p in posts:
        if p.user_id == prev_user and p.timestamp <= prev_ts:
            p.timestamp = prev_ts + 1e-6
            shifted += 1
        prev_user, prev_ts = p.user_id, p.timestamp
    return posts, {"n_posts": len(posts), "shifted": shifted}


def _parse_post(obj, path, lineno) -> Post:
    if not isinstance(obj, dict):
        raise InputError(f"{path} line {lineno}: expected a JSON object")

    def need(key):
        if key not in obj:
            raise InputError(f"{path} line {lineno}: missing key {key!r}")
        return obj[key]

    user_id = need("user_id")
    if not isinstance(user_id, str) or not user_id:
        raise InputError(f"{path} line {lineno}: user_id must be a non-empty string")
    ts = need("timestamp")
    if not isinstance(ts, (int, float)) or isinstance(ts, bool) or not math.isfinite(ts):
        raise InputError(f"{path} line {lineno}: timestamp must be a finite number")
    stance = need("stance")
    if stance not in STANCE_CLASSES:
        raise InputError(
            f"{path} line {lineno}: stance {stance!r} not in {sorted(STANCE_CLASSES)}")

    tokens, token_ids = None, None
    if "text" in obj:
        if not isinstance(obj["text"], str):
            raise InputError(f"{path} line {lineno}: text must be a string")
        tokens = obj["text"].split()
    elif "token_ids" in obj:
        ids = obj["token_ids"]
        if (not isinstance(ids, list) or not ids
                or any(not isinstance(t, int) or t < 0 for t in ids)):
            raise InputError(
                f"{path} line {lineno}: token_ids must be a non-empty list of ints >= 0")
        token_ids = list(ids)
    else:
        raise InputError(f"{path} line {lineno}: need either 'text' or 'token_ids'")
    if tokens is not None and not tokens:
        raise InputError(f"{path} line {lineno}: text has no tokens")

    nbrs = obj.get("neighbors", [])
    if not isinstance(nbrs, list) or any(not isinstance(v, str) for v in nbrs):
        raise InputError(f"{path} line {lineno}: neighbors must be a list of user ids")
    return Post(user_id=user_id, timestamp=float(ts), stance=int(stance),
                tokens=tokens, token_ids=token_ids, neighbors=tuple(nbrs))


def build_vocab(corpus: list[list[str]], max_size: int = 3000) -> Vocabulary:
    if not corpus:
        raise InputError("cannot build a vocabulary from an empty corpus")
    return Vocabulary.build(corpus, max_size=max_size)


def encode_posts(posts: list[Post], vocab: Vocabulary, max_tweet_len: int = 30) -> None:
    """Fill token_ids in place: vocabulary lookup (UNK for unseen words)
    and truncation to max_tweet_len. Posts that already carry token_ids
    are only truncated."""
    for p in posts:
        if p.tokens is not None:
            p.token_ids = vocab.encode(p.tokens)[:max_tweet_len]
        elif p.token_ids is not None:
            p.token_ids = p.token_ids[:max_tweet_len]
        else:
            raise InputError(f"post by {p.user_id} has neither tokens nor token_ids")


def group_by_user(posts: list[Post]) -> dict[str, list[Post]]:
    out: dict[str, list[Post]] = {}
    for p in posts:
        out.setdefault(p.user_id, []).append(p)
    return out


def filter_users(posts_by_user: dict[str, list[Post]],
                 min_posts: int = 3) -> dict[str, list[Post]]:
    return {u: ps for u, ps in posts_by_user.items() if len(ps) >= min_posts}


def split_train_test(posts_by_user: dict[str, list[Post]], train_frac: float = 0.9,
                     ) -> tuple[dict[str, list[Post]], dict[str, list[Post]]]:
    """Reserve the last ceil((1 - train_frac) * n) posts per user as test targets."""
    if not 0.0 < train_frac <= 1.0:
        raise InputError(f"train_frac must be in (0, 1], got {train_frac}")
    train, test = {}, {}
    for u, ps in posts_by_user.items():
        # ceil of the exact fraction; the tiny slack absorbs float noise
        # so e.g. n=30 gives 3 test posts, not 4.
        n_test = max(0, math.ceil(len(ps) * (1.0 - train_frac) - 1e-9))
        cut = len(ps) - n_test
        train[u] = ps[:cut]
        test[u] = ps[cut:]
    return train, test


def filter_and_window(posts_by_user: dict[str, list[Post]], min_posts: int = 3,
                      max_len: int = 7, stride: int = 1) -> list[EventSequence]:
    """Window each user's posts: one sequence if n <= max_len, else
    n - max_len + 1 overlapping windows at the given stride."""
    if stride < 1 or max_len < min_posts:
        raise InputError(f"bad windowing: max_len={max_len}, stride={stride}, "
                         f"min_posts={min_posts}")
    sequences = []
    for u in sorted(posts_by_user):
        ps = posts_by_user[u]
        if len(ps) < min_posts:
            continue
        if len(ps) <= max_len:
            sequences.append(EventSequence(user_id=u, posts=list(ps)))
        else:
            for start in range(0, len(ps) - max_len + 1, stride):
                sequences.append(EventSequence(user_id=u, posts=ps[start:start + max_len]))
    return sequences


def build_eval_sequences(posts_by_user: dict[str, list[Post]],
                         test_by_user: dict[str, list[Post]],
                         max_len: int = 7) -> list[EventSequence]:
    """One sequence per test target: up to max_len - 1 preceding posts
    (from the user's full chronology) plus the target as the final post."""
    sequences = []
    for u in sorted(test_by_user):
        ps = posts_by_user[u]
        for target in test_by_user[u]:
            j = next(i for i, p in enumerate(ps) if p is target)
            ctx = ps[max(0, j - (max_len - 1)):j]
            if len(ctx) < 2:
                continue
            sequences.append(EventSequence(user_id=u, posts=ctx + [target]))
    return sequences


def export_windows(posts_by_user: dict[str, list[Post]], min_posts: int = 3,
                   max_len: int = 7) -> list[EventSequence]:
    """Non-overlapping chunks covering each user's full history, for
    trace exports (stride-1 windows would visit each post up to 7 times)."""
    sequences = []
    for u in sorted(posts_by_user):
        ps = posts_by_user[u]
        if len(ps) < min_posts:
            continue
        for start in range(0, len(ps), max_len):
            sequences.append(EventSequence(user_id=u, posts=ps[start:start + max_len]))
    return sequences


def neighbor_sets(posts: list[Post]) -> dict[str, set[str]]:
    """Per user, the union of neighbour ids over their posts, minus self."""
    out: dict[str, set[str]] = {}
    for p in posts:
        s = out.setdefault(p.user_id, set())
        s.update(v for v in p.neighbors if v != p.user_id)
    return out


def attach_neighbor_queues(sequences: list[EventSequence], all_posts: list[Post],
                           neighbors: dict[str, set[str]], queue_len: int = 3) -> None:
    """Fill queues in place: for each step, the queue_len most recent
    neighbour posts strictly before that step's timestamp, oldest first."""
    by_user = group_by_user(all_posts)
    merged_cache: dict[str, tuple[list[float], list[Post]]] = {}

    def merged(user: str) -> tuple[list[float], list[Post]]:
        if user not in merged_cache:
            pool = []
            for v in sorted(neighbors.get(user, ())):
                pool.extend(by_user.get(v, ()))
            pool.sort(key=lambda p: (p.timestamp, p.user_id))
            merged_cache[user] = ([p.timestamp for p in pool], pool)
        return merged_cache[user]

    for seq in sequences:
        times, pool = merged(seq.user_id)
        seq.queues = []
        for post in seq.posts:
            hi = bisect.bisect_left(times, post.timestamp)
            seq.queues.append(pool[max(0, hi - queue_len):hi])


def transform_intervals(timestamps: list[float]) -> np.ndarray:
    """Per-post training-space intervals: log(1 + (t_i - t_{i-1})), first = 0."""
    ts = np.asarray(timestamps, dtype=np.float64)
    if ts.size == 0:
        return ts
    diffs = np.diff(ts)
    if np.any(diffs <= 0):
        raise InputError("timestamps are not strictly increasing")
    return np.concatenate([[0.0], np.log1p(diffs)])


def inverse_transform(x) -> np.ndarray | float:
    """Back to natural units: exp(x) - 1."""
    return np.expm1(x)
