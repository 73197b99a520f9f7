"""Run configuration: one flat key-value file drives every command.

Defaults follow the reference protocol: vocabulary 3000, 50 topics,
queue length 3, window length 7, loss weights 0.2/0.4/0.4, Adam at
0.0005 with 0.9 per-epoch decay, mini-batch 16. All randomness flows
from a single seed through named substreams so runs are reproducible
bit for bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError

VARIANTS = ("full", "no_vae", "no_context", "gru_only")
TIME_LOSS_MODES = ("gaussian_nll", "tpp_nll")
RECON_LIKELIHOODS = ("gaussian", "multinomial")


@dataclass(frozen=True)
class RunConfig:
    # data
    dataset_path: str = ""
    time_unit: str = "hours"        # label for reported MSE units
    embeddings_path: str = ""       # optional pretrained word vectors
    # model dims
    embed_dim: int = 50
    lstm_hidden: int = 32
    vae_hidden: int = 64
    gru_hidden: int = 64
    n_topics: int = 50
    queue_len: int = 3
    max_seq_len: int = 7
    max_tweet_len: int = 30
    user_dim: int = 16
    vocab_size: int = 3000
    # loss
    eta: float = 0.2
    beta: float = 0.4
    gamma: float = 0.4
    sigma: float = 1.0
    time_loss_mode: str = "gaussian_nll"
    recon_likelihood: str = "gaussian"
    # optimizer
    lr: float = 0.0005
    lr_decay: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    batch_size: int = 16
    epochs: int = 30
    patience: int = 3
    val_frac: float = 0.1
    # protocol
    seed: int = 0
    variant: str = "full"
    min_posts: int = 3
    train_frac: float = 0.9
    # quadrature for the expected next time
    quad_panels: int = 2048
    quad_cutoff: float = 30.0
    quad_horizon: float = 200.0

    def validate(self) -> None:
        dims = ("embed_dim", "lstm_hidden", "vae_hidden", "gru_hidden", "n_topics",
                "queue_len", "max_seq_len", "max_tweet_len", "user_dim", "vocab_size",
                "batch_size", "epochs", "quad_panels")
        for k in dims:
            if getattr(self, k) < 1:
                raise InputError(f"config key {k!r} must be >= 1")
        for k in ("eta", "beta", "gamma"):
            if getattr(self, k) < 0:
                raise InputError(f"loss coefficient {k!r} must be >= 0")
        if self.sigma <= 0:
            raise InputError("config key 'sigma' must be > 0")
        if self.variant not in VARIANTS:
            raise InputError(f"unknown variant {self.variant!r}; pick from {VARIANTS}")
        if self.time_loss_mode not in TIME_LOSS_MODES:
            raise InputError(f"unknown time_loss_mode {self.time_loss_mode!r}")
        if self.recon_likelihood not in RECON_LIKELIHOODS:
            raise InputError(f"unknown recon_likelihood {self.recon_likelihood!r}")
        if self.time_unit not in ("hours", "minutes"):
            raise InputError("config key 'time_unit' must be 'hours' or 'minutes'")
        if not 0.0 < self.train_frac <= 1.0:
            raise InputError("config key 'train_frac' must be in (0, 1]")
        if not 0.0 <= self.val_frac < 1.0:
            raise InputError("config key 'val_frac' must be in [0, 1)")
        if self.quad_panels % 2:
            raise InputError("config key 'quad_panels' must be even")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        clean = {}
        for k, v in d.items():
            if k not in known:
                raise InputError(f"unknown config key: {k!r}")
            clean[k] = v
        cfg = cls(**clean)
        cfg.validate()
        return cfg


def load_run_config(path: str, overrides: list[str] | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
    except OSError as e:
        raise InputError(f"cannot open config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON ({e.msg})") from e
    if not isinstance(d, dict):
        raise InputError(f"{path}: config must be a JSON object")
    return RunConfig.from_dict(apply_overrides(d, overrides or []))


def apply_overrides(d: dict, overrides: list[str], defaults=None) -> dict:
    """Apply repeatable --set key=value flags, casting to the default's type.

    ``defaults`` is any dataclass instance whose fields define the legal
    keys (a RunConfig unless the caller says otherwise).
    """
    if defaults is None:
        defaults = RunConfig()
    out = dict(d)
    for item in overrides:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        key = key.strip()
        if not hasattr(defaults, key):
            raise InputError(f"unknown config key in --set: {key!r}")
        out[key] = _cast_like(getattr(defaults, key), raw.strip(), key)
    return out


def _cast_like(default, raw: str, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise InputError(f"cannot parse value {raw!r} for config key {key!r}") from None


# keys that pin the parameter layout; a checkpoint refuses configs that
# disagree on any of them
ARCH_KEYS = ("embed_dim", "lstm_hidden", "vae_hidden", "gru_hidden", "n_topics",
             "queue_len", "max_seq_len", "max_tweet_len", "user_dim", "vocab_size",
             "variant", "time_loss_mode", "recon_likelihood")


def config_hash(cfg: RunConfig) -> str:
    subset = {k: getattr(cfg, k) for k in ARCH_KEYS}
    blob = json.dumps(subset, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Named, independent substream of the run seed."""
    tag = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


# one-line help per config key, surfaced through each subcommand's --help
KEY_HELP = {
    "dataset_path": "JSONL dataset file (one post per line)",
    "time_unit": "natural time unit of timestamps: hours or minutes",
    "embeddings_path": "optional pretrained embedding text file ('' = random init)",
    "embed_dim": "word embedding dimension",
    "lstm_hidden": "per-direction LSTM hidden size (tweet vector is twice this)",
    "vae_hidden": "hidden layer width of the topic VAE encoder",
    "gru_hidden": "GRU state dimension",
    "n_topics": "latent topic count K",
    "queue_len": "neighbour posts attended per step (L)",
    "max_seq_len": "window length over each user's posts",
    "max_tweet_len": "tokens kept per tweet",
    "user_dim": "user embedding dimension",
    "vocab_size": "vocabulary cap including PAD/UNK",
    "eta": "weight of the topic reconstruction loss",
    "beta": "weight of the time loss",
    "gamma": "weight of the stance loss",
    "sigma": "Gaussian time-penalty scale (transformed units)",
    "time_loss_mode": "gaussian_nll (default) or tpp_nll",
    "recon_likelihood": "VAE observation model: gaussian or multinomial",
    "lr": "Adam learning rate",
    "lr_decay": "learning-rate multiplier applied after each epoch",
    "adam_beta1": "Adam first-moment decay",
    "adam_beta2": "Adam second-moment decay",
    "adam_eps": "Adam denominator epsilon",
    "clip_norm": "global gradient-norm clip",
    "batch_size": "sequences per optimizer step",
    "epochs": "maximum training epochs",
    "patience": "early stop after this many non-improving validation epochs",
    "val_frac": "fraction of training sequences held out for validation",
    "seed": "master seed for all randomness",
    "variant": "full, no_vae, no_context, or gru_only",
    "min_posts": "drop users with fewer posts than this",
    "train_frac": "per-user fraction of posts used for training",
    "quad_panels": "Simpson panels for the expected-time integral",
    "quad_cutoff": "integrate until the cumulative intensity reaches this",
    "quad_horizon": "hard cap on the integration endpoint (transformed units)",
}
