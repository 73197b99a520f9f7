"""Command-line entry point: simulate, train, evaluate, predict, export.

Every command reads one flat JSON config (--config) with --set key=value
overrides, and is deterministic given (config, seed). Exit codes: 0 ok,
1 internal error, 2 bad input, 3 empty result.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .autodiff import Graph
from .config import KEY_HELP, RunConfig, VARIANTS, apply_overrides, load_run_config
from .data import EventSequence, attach_neighbor_queues, export_windows, neighbor_sets
from .encoders import Vocabulary
from .errors import EmptyResultError, InputError
from .model import build_graph, init_state, param_leaves
from .simulate import SimConfig, simulate, write_dataset
from .topics import export_topics
from .attention import export_attention
from .training import (ablate, checkpoint_load, checkpoint_save, evaluate, prepare,
                       train, _batches)

SIM_KEY_HELP = {
    "n_users": "number of simulated users",
    "horizon": "simulation length in hours",
    "omega": "excitation kernel decay rate (1/hour)",
    "alpha": "kernel mass per follow edge",
    "topic_match_boost": "alpha multiplier on edges joining same-home-topic users",
    "mu_min": "slowest user's base rate (events/hour)",
    "mu_max": "fastest user's base rate",
    "in_degree_same": "sampled in-edges from same-home-topic users",
    "in_degree_other": "sampled in-edges from the rest",
    "n_topics": "planted topics",
    "words_per_topic": "vocabulary size of each planted topic",
    "n_background_words": "shared background vocabulary size",
    "stance_words_per_class": "marker words per stance class",
    "tweet_len": "tokens per simulated tweet",
    "topic_word_frac": "fraction of tokens drawn from the post's topic",
    "stance_word_frac": "fraction of tokens drawn from the post's stance markers",
    "topic_adopt_prob": "chance a triggered post adopts the trigger's topic",
    "stance_copy_prob": "chance a post repeats a recent same-topic neighbour stance",
    "stance_sharpness": "P(modal stance | topic) when not copying",
    "influence_len": "how many recent same-topic neighbour posts a user reads",
    "edges_path": "optional 'src dst' edge list file instead of sampling",
    "edges": "programmatic edge override (not settable from the CLI)",
}


def _epilog(defaults, help_map) -> str:
    lines = ["config keys (JSON file via --config, overridable via --set KEY=VALUE):"]
    for f in dataclasses.fields(defaults):
        lines.append(f"  {f.name} (default {getattr(defaults, f.name)!r}): "
                     f"{help_map.get(f.name, '')}")
    return "\n".join(lines)


def _add_common(sp, with_variant=True):
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config key (repeatable)")
    sp.add_argument("--seed", type=int, help="override the config seed")
    if with_variant:
        sp.add_argument("--variant", choices=VARIANTS,
                        help="override the model variant")
    sp.add_argument("--out", help="output path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="opiniontpp",
        description="Joint next-post time and stance prediction over a "
                    "social graph, with a marked Hawkes data simulator.")
    sub = ap.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    sp = sub.add_parser("simulate", formatter_class=fmt,
                        help="generate a synthetic dataset",
                        epilog=_epilog(SimConfig(), SIM_KEY_HELP))
    _add_common(sp, with_variant=False)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", formatter_class=fmt,
                        help="fit a model and write a checkpoint",
                        epilog=_epilog(RunConfig(), KEY_HELP))
    _add_common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", formatter_class=fmt,
                        help="score a checkpoint on the held-out targets",
                        epilog=_epilog(RunConfig(), KEY_HELP))
    sp.add_argument("--checkpoint", required=True)
    _add_common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("predict", formatter_class=fmt,
                        help="forecast each user's next post",
                        epilog=_epilog(RunConfig(), KEY_HELP))
    sp.add_argument("--checkpoint", required=True)
    _add_common(sp)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("export", formatter_class=fmt,
                        help="write the attention trace or topic-word table",
                        epilog=_epilog(RunConfig(), KEY_HELP))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--what", choices=("attention", "topics"), required=True)
    _add_common(sp)
    sp.set_defaults(func=cmd_export)
    return ap


def _resolve_run_config(args, base: dict | None = None) -> RunConfig:
    if args.config:
        cfg = load_run_config(args.config, args.set)
    else:
        d = apply_overrides(base if base is not None else {}, args.set)
        cfg = RunConfig.from_dict(d)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "variant", None):
        cfg = ablate(cfg, args.variant)
    cfg.validate()
    return cfg


def cmd_simulate(args) -> int:
    if args.config:
        d = dataclasses.asdict(SimConfig.from_file(args.config))
    else:
        d = {}
    cfg = SimConfig.from_dict(apply_overrides(d, args.set, defaults=SimConfig()))
    seed = args.seed if args.seed is not None else 0
    result = simulate(cfg, seed)
    paths = write_dataset(result, args.out or "data")
    if not result.events:
        print("warning: simulation produced no events "
              "(horizon or rates too small)", file=sys.stderr)
    print(f"simulated {len(result.events)} posts by {cfg.n_users} users "
          f"over {cfg.horizon} hours")
    for k, v in paths.items():
        print(f"  {k}: {v}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_run_config(args)
    cfg = ablate(cfg, cfg.variant)
    prep = prepare(cfg)
    state = init_state(cfg, prep.vocab_words, prep.user_ids)
    out = args.out or "model.ckpt"
    print(f"training variant={cfg.variant} on {cfg.dataset_path}: "
          f"{len(prep.train_windows)} train / {len(prep.val_windows)} val windows, "
          f"{len(prep.user_ids)} users, vocab {len(prep.vocab_words) + 2}")
    res = train(state, prep.train_windows, prep.val_windows,
                log_path=out + ".log.jsonl",
                progress=lambda e: print(
                    f"epoch {e['epoch']:3d}  lr {e['lr']:.6f}  "
                    f"loss {e['total']:.4f}  val {e['val_loss']:.4f}"))
    if res.aborted:
        print("warning: stopped on a non-finite loss; "
              "best parameters restored", file=sys.stderr)
    digest = checkpoint_save(state, out)
    print(f"best validation loss {res.best_val:.6f} "
          f"after {res.epochs_run} epochs"
          + (" (early stop)" if res.stopped_early else ""))
    print(f"checkpoint {out} sha256 {digest}")
    return 0


def _load_state(args):
    state = checkpoint_load(args.checkpoint)
    base = dataclasses.asdict(state.config)
    cfg = _resolve_run_config(args, base)
    if dataclasses.asdict(cfg) != base:
        state = checkpoint_load(args.checkpoint, cfg)
    return state, cfg


def cmd_evaluate(args) -> int:
    state, cfg = _load_state(args)
    prep = prepare(cfg, vocab_words=state.vocab_words)
    metrics, _ = evaluate(state, prep.eval_sequences)
    doc = {**metrics.to_dict(), "time_unit": cfg.time_unit}
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    out = args.out or "metrics.json"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    print(f"wrote {out}", file=sys.stderr)
    return 0


def cmd_predict(args) -> int:
    state, cfg = _load_state(args)
    prep = prepare(cfg, vocab_words=state.vocab_words)
    seqs = [EventSequence(user_id=u, posts=prep.by_user[u][-cfg.max_seq_len:])
            for u in sorted(prep.by_user)]
    attach_neighbor_queues(seqs, prep.posts, neighbor_sets(prep.posts),
                           cfg.queue_len)
    forecasts = []
    for idx in _batches(len(seqs), cfg.batch_size):
        g = Graph()
        pt = param_leaves(g, state)
        res = build_graph(g, pt, state, [seqs[i] for i in idx], "forecast")
        forecasts.extend(res.predictions)
    if not forecasts:
        raise EmptyResultError("no users eligible for prediction")
    out = args.out or "predictions.jsonl"
    with open(out, "w", encoding="utf-8") as fh:
        for f in forecasts:
            fh.write(json.dumps({
                "user_id": f.user_id,
                "last_time": f.t_last,
                "dt_hat": f.dt_hat,
                "next_time": f.t_last + f.dt_hat,
                "defect": f.defect,
                "stance_pred": int(max(range(3), key=lambda c: f.stance_probs[c])),
                "stance_probs": list(f.stance_probs),
            }, sort_keys=True) + "\n")
    print(f"wrote {len(forecasts)} forecasts to {out}")
    return 0


def cmd_export(args) -> int:
    state, cfg = _load_state(args)
    if args.what == "topics":
        if not state.has_vae:
            raise InputError("variant 'no_vae' has no topic model to export")
        out = args.out or "topics.tsv"
        export_topics(state.params["vae_dec_w"], Vocabulary(state.vocab_words), out)
        print(f"wrote {state.config.n_topics} topics to {out}")
        return 0
    if not state.has_context:
        raise InputError("variant 'no_context' records no attention weights")
    prep = prepare(cfg, vocab_words=state.vocab_words)
    windows = export_windows(prep.by_user, cfg.min_posts, cfg.max_seq_len)
    attach_neighbor_queues(windows, prep.posts, neighbor_sets(prep.posts),
                           cfg.queue_len)
    trace, offsets = [], {}
    for idx in _batches(len(windows), cfg.batch_size):
        g = Graph()
        pt = param_leaves(g, state)
        build_graph(g, pt, state, [windows[i] for i in idx], "forecast",
                    trace=trace, step_offsets=offsets)
    if not trace:
        raise EmptyResultError("no attention records (are all neighbour queues empty?)")
    out = args.out or "attention.tsv"
    n = export_attention(trace, out)
    print(f"wrote {n} attention rows to {out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except EmptyResultError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except Exception as e:          # noqa: BLE001 - the CLI boundary
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
