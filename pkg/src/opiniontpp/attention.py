"""Topic-queried attention over neighbour post representations.

Each neighbour contributes a score: the user's query (own tweet
representation concatenated with the topic vector) dotted with
tanh(W_h h_neighbour + W_z z_neighbour). Scores pass through a softmax
(with max subtraction) and the context vector is the weighted sum of the
neighbour hidden states. An empty queue yields a zero context, which is
also how the no-context ablation and cold starts behave.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor


@dataclass
class AttentionParams:
    """W_h maps neighbour hiddens and W_z neighbour topics into query space."""

    w_h: Tensor          # (hidden_dim, query_dim)
    w_z: Tensor | None   # (topic_dim, query_dim); None when topics are ablated


@dataclass
class AttentionOutput:
    context: Tensor
    weights: Tensor | None   # (1, L') softmax row; None for an empty queue


def attend(g: Graph, p: AttentionParams, h_i: Tensor, z_i: Tensor | None,
           neighbors: list[tuple[Tensor, Tensor | None]],
           context_dim: int) -> AttentionOutput:
    """Score each (hidden, topic) neighbour pair against the user's query.

    Neighbours must share the hidden dim; the query is [h_i, z_i] or just
    h_i when z_i is None. Returns zero context and no weights for an
    empty queue.
    """
    if not neighbors:
        return AttentionOutput(context=g.leaf(np.zeros((1, context_dim))), weights=None)

    query = h_i if z_i is None else g.concat_cols(h_i, z_i)
    scores = []
    for hc, zc in neighbors:
        proj = g.matmul(hc, p.w_h)
        if zc is not None:
            if p.w_z is None:
                raise ValueError("neighbour topic given but W_z is not configured")
            proj = g.add(proj, g.matmul(zc, p.w_z))
        scores.append(g.sum(g.mul_elem(query, g.tanh(proj))))
    row = scores[0] if len(scores) == 1 else g.concat_cols(*scores)
    weights = g.softmax_rows(row)
    stacked = neighbors[0][0] if len(neighbors) == 1 else g.concat_rows(
        *[hc for hc, _ in neighbors])
    context = g.matmul(weights, stacked)
    return AttentionOutput(context=context, weights=weights)


@dataclass
class AttentionRecord:
    """One exported row: a neighbour slot's weight at one user step."""

    user_id: str
    step: int
    slot: int
    weight: float
    user_topics: np.ndarray
    neighbor_topics: np.ndarray


def export_attention(records: list[AttentionRecord] | None, path: str) -> int:
    """Write the attention trace TSV; returns the number of rows written.

    Rejects a missing trace (model was run without tracing enabled).
    """
    if records is None:
        raise ValueError("attention tracing was not enabled; no records to export")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id\tstep\tslot\tweight\tuser_topics\tneighbor_topics\n")
        for r in records:
            ut = ",".join(f"{x:.6g}" for x in np.asarray(r.user_topics).ravel())
            nt = ",".join(f"{x:.6g}" for x in np.asarray(r.neighbor_topics).ravel())
            fh.write(f"{r.user_id}\t{r.step}\t{r.slot}\t{r.weight:.9g}\t{ut}\t{nt}\n")
    return len(records)
