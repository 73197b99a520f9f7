"""Bag-of-words topic VAE.

Two inference heads over a shared tanh layer produce the mean and
log-variance of a diagonal Gaussian posterior; the latent topic vector is
sampled with the reparameterization trick and decoded back to the
bag-of-words by a linear map whose weight matrix doubles as the
topic-word matrix. The loss is the negative ELBO under a standard-normal
prior, so it adds to the other minimization terms directly.

The observation model is Gaussian with unit variance by default;
``likelihood="multinomial"`` switches the reconstruction term to a
softmax cross-entropy over the decoded logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import Graph, Tensor
from .encoders import Vocabulary

LOGVAR_MIN = -8.0
LOGVAR_MAX = 8.0


class TopicPosterior(NamedTuple):
    mu: Tensor
    logvar: Tensor


@dataclass
class TopicModelParams:
    """Graph-registered VAE weights (shared encoder layer, two heads, decoder)."""

    enc_w: Tensor
    enc_b: Tensor
    mu_w: Tensor
    mu_b: Tensor
    lv_w: Tensor
    lv_b: Tensor
    dec_w: Tensor   # (n_topics, vocab_size); row k is topic k's word profile
    dec_b: Tensor


def bow_vector(token_ids: list[int], vocab_size: int) -> np.ndarray:
    """Term-frequency bag-of-words row; PAD (id 0) is never counted."""
    bow = np.zeros((1, vocab_size))
    for t in token_ids:
        if t != 0:
            bow[0, t] += 1.0
    return bow


def infer_topic(g: Graph, p: TopicModelParams, xb: Tensor) -> TopicPosterior:
    """Posterior parameters for one bag-of-words row (or a stacked batch)."""
    h = g.tanh(g.add(g.matmul(xb, p.enc_w), p.enc_b))
    mu = g.add(g.matmul(h, p.mu_w), p.mu_b)
    logvar = g.clip(g.add(g.matmul(h, p.lv_w), p.lv_b), LOGVAR_MIN, LOGVAR_MAX)
    return TopicPosterior(mu, logvar)


def sample_z(g: Graph, post: TopicPosterior, noise: np.ndarray) -> Tensor:
    """Reparameterized sample z = mu + exp(logvar / 2) * noise.

    ``noise`` is drawn externally (standard normal) so runs are
    reproducible; pass zeros to get the posterior mean.
    """
    std = g.exp(g.scale(post.logvar, 0.5))
    return g.add(post.mu, g.mul_elem(std, g.leaf(noise)))


def reconstruct(g: Graph, p: TopicModelParams, z: Tensor) -> Tensor:
    """Decoded bag-of-words mean: linear map through the topic-word matrix."""
    return g.add(g.matmul(z, p.dec_w), p.dec_b)


def kl_rows(g: Graph, post: TopicPosterior) -> Tensor:
    """Per-row KL(N(mu, diag exp(logvar)) || N(0, I)) as a column vector."""
    rows, k = post.mu.shape
    ones_col = g.leaf(np.ones((k, 1)))
    sq = g.mul_elem(post.mu, post.mu)
    inner = g.sub(g.add(g.exp(post.logvar), sq), post.logvar)
    total = g.matmul(inner, ones_col)
    return g.scale(g.sub(total, g.leaf(np.full((rows, 1), float(k)))), 0.5)


def recon_rows(g: Graph, p: TopicModelParams, xb: Tensor, z: Tensor,
               likelihood: str = "gaussian") -> Tensor:
    """Per-row reconstruction loss as a column vector."""
    decoded = reconstruct(g, p, z)
    v = xb.shape[1]
    ones_col = g.leaf(np.ones((v, 1)))
    if likelihood == "gaussian":
        diff = g.sub(xb, decoded)
        return g.scale(g.matmul(g.mul_elem(diff, diff), ones_col), 0.5)
    if likelihood == "multinomial":
        logp = g.log(g.softmax_rows(decoded))
        return g.scale(g.matmul(g.mul_elem(xb, logp), ones_col), -1.0)
    raise ValueError(f"unknown reconstruction likelihood: {likelihood!r}")


def vae_loss(g: Graph, p: TopicModelParams, xb: Tensor, post: TopicPosterior,
             z: Tensor, likelihood: str = "gaussian") -> Tensor:
    """Negative ELBO for one row: reconstruction loss plus KL to N(0, I)."""
    return g.sum(g.add(recon_rows(g, p, xb, z, likelihood), kl_rows(g, post)))


def top_words(dec_w: np.ndarray, vocab: Vocabulary, topic_k: int, n: int = 10) -> list[str]:
    """The n words weighted highest for a topic; ties break by ascending id."""
    if not 0 <= topic_k < dec_w.shape[0]:
        raise ValueError(f"topic {topic_k} out of range for {dec_w.shape[0]} topics")
    n = min(n, dec_w.shape[1])
    order = np.argsort(-dec_w[topic_k], kind="stable")
    return [vocab.word(int(i)) for i in order[:n]]


def export_topics(dec_w: np.ndarray, vocab: Vocabulary, path: str, n: int = 10) -> None:
    """Write the topic-word matrix as TSV: topic_id then top-n word:weight pairs."""
    with open(path, "w", encoding="utf-8") as fh:
        for k in range(dec_w.shape[0]):
            order = np.argsort(-dec_w[k], kind="stable")[: min(n, dec_w.shape[1])]
            pairs = [f"{vocab.word(int(i))}:{dec_w[k, int(i)]:.6g}" for i in order]
            fh.write("\t".join([str(k), *pairs]) + "\n")


def topic_distribution(mu: np.ndarray) -> np.ndarray:
    """Displayable distribution over topics: softmax of the posterior mean."""
    shifted = mu - mu.max()
    e = np.exp(shifted)
    return e / e.sum()
