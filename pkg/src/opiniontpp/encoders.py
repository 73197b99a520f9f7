"""Token vocabulary, embeddings, and the LSTM encoders.

A tweet is encoded by a Bi-LSTM over its token embeddings; the fixed-size
representation is the concatenation of the final forward and final
backward hidden states. A neighbour queue is encoded by running the same
Bi-LSTM over each post and then a second, unidirectional LSTM across the
per-post vectors in ascending time order.

PAD tokens (id 0) are stripped before encoding, so padding never
influences any encoder output. Embedding row 0 stays all-zero and is
excluded from gradient updates by the optimizer mask.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .autodiff import Graph, Tensor

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class Vocabulary:
    """Dense word <-> id mapping with reserved PAD=0 and UNK=1 slots."""

    def __init__(self, words: Iterable[str]):
        self.id_to_word: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self.id_to_word.extend(words)
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}
        if len(self.word_to_id) != len(self.id_to_word):
            raise ValueError("vocabulary words must be unique")

    @classmethod
    def build(cls, corpus: Iterable[list[str]], max_size: int = 3000) -> "Vocabulary":
        """Keep the max_size - 2 most frequent tokens; ties break lexicographically."""
        counts = Counter()
        for tokens in corpus:
            counts.update(tokens)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls(w for w, _ in ranked[: max(0, max_size - 2)])

    def __len__(self) -> int:
        return len(self.id_to_word)

    @property
    def size(self) -> int:
        return len(self.id_to_word)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.word_to_id.get(t, UNK_ID) for t in tokens]

    def word(self, idx: int) -> str:
        return self.id_to_word[idx]


@dataclass
class EmbeddingTable:
    """Word embedding matrix; row 0 (PAD) is pinned to zero."""

    weights: np.ndarray
    trainable: bool = True

    @classmethod
    def random(cls, vocab_size: int, dim: int, rng: np.random.Generator) -> "EmbeddingTable":
        w = rng.uniform(-0.1, 0.1, size=(vocab_size, dim))
        w[PAD_ID, :] = 0.0
        return cls(weights=w)

    def load_pretrained(self, path: str, vocab: Vocabulary) -> int:
        """Replace rows for vocabulary words found in a text embedding file.

        Format: one token per line, the token followed by exactly
        ``dim`` space-separated floats. Returns the number of rows replaced.
        """
        dim = self.weights.shape[1]
        replaced = 0
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split(" ")
                if len(parts) <= 1 and not parts[0]:
                    continue
                if len(parts) != dim + 1:
                    raise ValueError(
                        f"{path}:{lineno}: expected token + {dim} floats, "
                        f"got {len(parts)} fields")
                word = parts[0]
                idx = vocab.word_to_id.get(word)
                if idx is None or idx == PAD_ID:
                    continue
                self.weights[idx, :] = [float(x) for x in parts[1:]]
                replaced += 1
        return replaced


class LstmState(NamedTuple):
    hidden: Tensor
    cell: Tensor


def embed(g: Graph, table: Tensor, token_ids: list[int]) -> Tensor:
    """Look up one embedding row per token id; PAD rows come back zero."""
    vocab_size = table.values.shape[0]
    for t in token_ids:
        if not 0 <= t < vocab_size:
            raise ValueError(f"token id {t} out of range for vocab of {vocab_size}")
    return g.gather_rows(table, token_ids)


def lstm_step(g: Graph, w: Tensor, b: Tensor, x: Tensor, state: LstmState) -> LstmState:
    """One LSTM step on row vectors (or row-stacked batches).

    ``w`` has shape (input_dim + hidden_dim, 4 * hidden_dim) with gate
    column blocks ordered [input | forget | candidate | output]; ``b`` is
    the matching (1, 4 * hidden_dim) bias row.
    """
    d = state.hidden.shape[1]
    z = g.add(g.matmul(g.concat_cols(x, state.hidden), w), b)
    i = g.sigmoid(g.slice_cols(z, 0, d))
    f = g.sigmoid(g.slice_cols(z, d, 2 * d))
    cand = g.tanh(g.slice_cols(z, 2 * d, 3 * d))
    o = g.sigmoid(g.slice_cols(z, 3 * d, 4 * d))
    cell = g.add(g.mul_elem(f, state.cell), g.mul_elem(i, cand))
    hidden = g.mul_elem(o, g.tanh(cell))
    return LstmState(hidden, cell)


def _zero_state(g: Graph, rows: int, dim: int) -> LstmState:
    z = g.leaf(np.zeros((rows, dim)))
    c = g.leaf(np.zeros((rows, dim)))
    return LstmState(z, c)


def _run_lstm(g, w, b, xs: list[Tensor], dim: int) -> Tensor:
    rows = xs[0].shape[0]
    state = _zero_state(g, rows, dim)
    for x in xs:
        state = lstm_step(g, w, b, x, state)
    return state.hidden


@dataclass
class TweetEncoderParams:
    """Graph-registered weights of the shared Bi-LSTM tweet encoder."""

    emb: Tensor
    fwd_w: Tensor
    fwd_b: Tensor
    bwd_w: Tensor
    bwd_b: Tensor

    @property
    def hidden_dim(self) -> int:
        return self.fwd_b.shape[1] // 4


def encode_tweet(g: Graph, p: TweetEncoderParams, token_ids: list[int]) -> Tensor:
    """Bi-LSTM representation of one tweet: concat of final fwd/bwd hiddens."""
    return encode_tweets(g, p, [token_ids])[0]


def encode_tweets(g: Graph, p: TweetEncoderParams,
                  token_lists: list[list[int]]) -> list[Tensor]:
    """Encode many tweets, stacking same-length tweets into one LSTM run.

    Tweets of equal (PAD-stripped) length share each per-position step as
    rows of a single matrix, which keeps the tape short without changing
    any per-tweet value.
    """
    d = p.hidden_dim
    stripped = []
    for ids in token_lists:
        ids = [t for t in ids if t != PAD_ID]
        if not ids:
            raise ValueError("tweet is empty after PAD removal")
        stripped.append(ids)

    groups: dict[int, list[int]] = {}
    for i, ids in enumerate(stripped):
        groups.setdefault(len(ids), []).append(i)

    out: list[Tensor | None] = [None] * len(stripped)
    for length in sorted(groups):
        members = groups[length]
        xs = [embed(g, p.emb, [stripped[i][t] for i in members])
              for t in range(length)]
        h_fwd = _run_lstm(g, p.fwd_w, p.fwd_b, xs, d)
        h_bwd = _run_lstm(g, p.bwd_w, p.bwd_b, xs[::-1], d)
        h = g.concat_cols(h_fwd, h_bwd)
        if len(members) == 1:
            out[members[0]] = h
        else:
            for row, i in enumerate(members):
                out[i] = g.gather_rows(h, [row])
    return out  # type: ignore[return-value]


def encode_neighbor_queue(g: Graph, p: TweetEncoderParams,
                          cross_w: Tensor, cross_b: Tensor,
                          post_encodings: list[Tensor]) -> list[Tensor]:
    """Run the cross-post LSTM over already-encoded neighbour posts.

    Input encodings must be in ascending time order; output l is the
    cross-post hidden state after consuming post l. Empty queue gives [].
    """
    if not post_encodings:
        return []
    dim = cross_b.shape[1] // 4
    state = _zero_state(g, post_encodings[0].shape[0], dim)
    outputs = []
    for h in post_encodings:
        state = lstm_step(g, cross_w, cross_b, h, state)
        outputs.append(state.hidden)
    return outputs
