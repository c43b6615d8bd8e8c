"""Command-line entry point: `uban {stats,gen,train,eval}`.

Every command writes a run manifest next to its outputs (config snapshot,
seed, input digests, produced files) so a run is reproducible from the
manifest alone.  Exit codes: 0 success, 2 usage error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cooccur import (DataError, build_external_matrix, build_internal_matrix,
                      corpus_from_rows, read_annotations, read_edge_dump,
                      read_vocabulary, write_matrix_csv)
from .data import (SyntheticSpec, generate_synthetic, read_feature_csv,
                   window_samples, write_annotation_csv, write_feature_csv,
                   write_vocab_csv)
from .evaluation import (class_partition_report, metric_report, noise_sweep,
                         rejection_curve, sample_partition_report,
                         uncertainty_histogram, weight_norm_report)
from .model import load_checkpoint, mc_dropout_forward, save_checkpoint
from .train import NumericalFailure, TrainConfig, evaluate_model, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, command, config, seed, inputs, outputs):
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": sorted(str(p) for p in outputs),
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _read_config_file(path):
    """Documented key=value config format; '#' starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


def _load_inputs(args):
    vocab = read_vocabulary(args.verbs, args.nouns)
    rows = read_annotations(args.annotations)
    corpus = corpus_from_rows(rows, vocab)
    return vocab, corpus


# ---------------------------------------------------------------------------
# subcommands

def cmd_stats(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab, corpus = _load_inputs(args)
    internal = build_internal_matrix(corpus, vocab)
    outputs = [out / "internal.csv"]
    write_matrix_csv(internal, out / "internal.csv")

    merged = internal.values.astype(np.int64)
    inputs = [args.annotations, args.verbs, args.nouns]
    if args.edges:
        edges = read_edge_dump(args.edges)
        verb_m, noun_m, act_m = build_external_matrix(edges, vocab)
        for name, m in (("external_verb", verb_m), ("external_noun", noun_m),
                        ("external_activity", act_m)):
            write_matrix_csv(m, out / f"{name}.csv")
            outputs.append(out / f"{name}.csv")
        merged = merged + act_m.values
        inputs.append(args.edges)

    top = []
    C = merged.shape[0]
    for i in range(C):
        for j in range(i + 1, C):
            if merged[i, j] > 0:
                top.append((int(merged[i, j]), i, j))
    top.sort(key=lambda t: (-t[0], t[1], t[2]))
    summary = {
        "classes": C,
        "nonzero_pairs": len(top),
        "top_uncertain_pairs": [
            {"classes": [i, j], "score": s} for s, i, j in top[:20]],
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    outputs.append(out / "summary.json")

    _write_manifest(out, "stats", {"edges": bool(args.edges)}, None, inputs, outputs)
    return EXIT_OK


def cmd_gen(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SyntheticSpec(
        num_classes=args.classes, branching=args.branching,
        successor_entropy=args.entropy, dim=args.dim,
        feature_noise=args.feature_noise, videos=args.videos,
        segments_per_video=args.segments, seed=args.seed)
    result = generate_synthetic(spec)

    write_annotation_csv(result.corpus, result.vocab, out / "annotations.csv")
    write_feature_csv(result.store, out / "features.csv")
    write_vocab_csv(result.vocab, out / "verbs.csv", out / "nouns.csv")
    with open(out / "successors.json", "w", encoding="utf-8") as fh:
        json.dump({str(c): {str(s): p for s, p in sorted(d.items())}
                   for c, d in sorted(result.successor_table.items())},
                  fh, sort_keys=True, indent=2)
        fh.write("\n")
    outputs = [out / n for n in ("annotations.csv", "features.csv", "verbs.csv",
                                 "nouns.csv", "successors.json")]
    _write_manifest(out, "gen", vars(spec), args.seed, [], outputs)
    return EXIT_OK


def _train_config(args):
    overrides = {}
    if args.config:
        raw = _read_config_file(args.config)
        casts = {"alpha": float, "beta": float, "gamma": float,
                 "learning_rate": float, "momentum": float, "weight_decay": float,
                 "batch_size": int, "epochs": int, "hidden_dim": int,
                 "tau_o": float, "tau_a": float, "delta": float,
                 "pooling": str, "families_per_step": int}
        for key, value in raw.items():
            if key not in casts:
                raise DataError(f"unknown config key {key!r}")
            overrides[key] = casts[key](value)
    for key in ("alpha", "beta", "gamma", "epochs", "batch_size", "learning_rate"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    overrides["seed"] = args.seed
    if args.profile == "desk":
        return TrainConfig.desk_profile(**overrides)
    return TrainConfig(**overrides)


def cmd_train(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab, corpus = _load_inputs(args)
    store = read_feature_csv(args.features)
    config = _train_config(args)

    model, log_rows = train(config, corpus, store, vocab,
                            log_path=out / "train_log.jsonl")
    save_checkpoint(out / "model.ckpt", model, meta={"seed": config.seed})
    outputs = [out / "train_log.jsonl", out / "model.ckpt"]
    inputs = [args.annotations, args.features, args.verbs, args.nouns]
    if args.config:
        inputs.append(args.config)
    _write_manifest(out, "train", vars(config) | {"tau_a_grid": list(config.tau_a_grid)},
                    args.seed, inputs, outputs)
    return EXIT_OK


def _eval_forward(model, corpus, store, window, tau_a):
    probs, uncs, truths = evaluate_model(model, corpus, store, window)
    taus = window.anticipation_taus()
    if tau_a is None:
        step = len(taus) - 1
    else:
        matches = [i for i, t in enumerate(taus) if abs(t - tau_a) < 1e-9]
        if not matches:
            raise DataError(f"tau_a {tau_a} not in anticipation grid {taus}")
        step = matches[0]
    return probs[:, step, :], uncs[:, step], truths


def cmd_eval(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, meta = load_checkpoint(args.checkpoint)
    vocab, corpus = _load_inputs(args)
    store = read_feature_csv(args.features)
    if store.dim != model.feature_dim:
        raise DataError(f"feature dim {store.dim} does not match checkpoint "
                        f"dim {model.feature_dim}")
    window = TrainConfig(seed=args.seed).window()
    probs, uncs, truths = _eval_forward(model, corpus, store, window, args.tau_a)
    outputs = []

    if args.mode == "metrics":
        report = metric_report(probs, truths)
        with open(out / "metrics.json", "w", encoding="utf-8") as fh:
            json.dump({
                "top1": report.top1, "top5": report.top5,
                "mean_top5_recall": report.mean_top5_recall,
                "per_class_recall": {str(k): v for k, v in
                                     sorted(report.per_class_recall.items())},
                "sample_count": report.sample_count,
            }, fh, sort_keys=True, indent=2)
            fh.write("\n")
        outputs.append(out / "metrics.json")

    elif args.mode == "reject":
        curve = rejection_curve(probs, truths, uncs, args.fractions)
        with open(out / "rejection.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["R", "accuracy"])
            for r, acc in zip(curve.fractions, curve.accuracies):
                writer.writerow([repr(r), repr(acc)])
        outputs.append(out / "rejection.csv")

    elif args.mode == "noise":
        def evaluate(noisy_store):
            p, u, t = _eval_forward(model, corpus, noisy_store, window, args.tau_a)
            return metric_report(p, t).top5, float(u.mean())

        rows = noise_sweep(evaluate, store, args.etas, seed=args.seed)
        with open(out / "noise.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["eta", "top5", "mean_u"])
            for row in rows:
                writer.writerow([repr(v) for v in row])
        outputs.append(out / "noise.csv")

    elif args.mode == "histogram":
        edges, counts, degenerate = uncertainty_histogram(uncs, args.bins)
        with open(out / "histogram.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                writer.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        if degenerate:
            print("warning: constant uncertainties, histogram is degenerate",
                  file=sys.stderr)
        outputs.append(out / "histogram.csv")

    elif args.mode == "norms":
        counts = np.bincount(truths, minlength=model.num_classes)
        rows, head_mean, tail_mean = weight_norm_report(
            model.head_params["head.Wc"].data.T, counts)
        with open(out / "weight_norms.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class_id", "instances", "l2_norm"])
            for c, n, norm in rows:
                writer.writerow([c, n, repr(norm)])
            writer.writerow(["head_mean", "", repr(head_mean)])
            writer.writerow(["tail_mean", "", repr(tail_mean)])
        outputs.append(out / "weight_norms.csv")

    elif args.mode == "partitions":
        internal = build_internal_matrix(corpus, vocab)
        class_report = class_partition_report(internal.values, probs, truths)
        sample_report = sample_partition_report(probs, truths, uncs)
        with open(out / "partitions.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["partitioning", "label", "samples", "top5"])
            for report, name in ((class_report, "class_pairs"),
                                 (sample_report, "sample_uncertainty")):
                for label, acc, size in zip(report.labels, report.accuracies,
                                            report.sizes):
                    writer.writerow([name, label, size,
                                     "undefined" if acc is None else repr(acc)])
        outputs.append(out / "partitions.csv")

    elif args.mode == "mcdropout":
        samples, _ = window_samples(corpus, store, window)
        observed = np.stack([s.observed for s in samples])
        result = mc_dropout_forward(model, observed, window.n_a,
                                    passes=args.passes, drop_rate=args.drop_rate,
                                    seed=args.seed)
        with open(out / "mcdropout.json", "w", encoding="utf-8") as fh:
            json.dump({
                "passes": args.passes,
                "drop_rate": args.drop_rate,
                "model_uncertainty": result["model_uncertainty"],
                "data_uncertainty": float(uncs.mean()),
            }, fh, sort_keys=True, indent=2)
            fh.write("\n")
        outputs.append(out / "mcdropout.json")

    inputs = [args.checkpoint, args.annotations, args.features, args.verbs, args.nouns]
    _write_manifest(out, f"eval:{args.mode}", {"mode": args.mode, "tau_a": args.tau_a},
                    args.seed, inputs, outputs)
    return EXIT_OK


# ---------------------------------------------------------------------------

def _add_corpus_args(p):
    p.add_argument("--annotations", required=True)
    p.add_argument("--verbs", required=True)
    p.add_argument("--nouns", required=True)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="uban",
        description="Uncertainty-boosted activity anticipation toolkit")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument("--out", default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="build co-occurrence matrices")
    _add_corpus_args(p)
    p.add_argument("--edges", default=None, help="knowledge edge dump TSV")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--branching", type=int, default=4)
    p.add_argument("--entropy", type=float, default=1.0)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--feature-noise", type=float, default=0.5)
    p.add_argument("--videos", type=int, default=50)
    p.add_argument("--segments", type=int, default=20)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the anticipation model")
    _add_corpus_args(p)
    p.add_argument("--features", required=True)
    p.add_argument("--profile", choices=["paper", "desk"], default="desk")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write reports")
    _add_corpus_args(p)
    p.add_argument("--features", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", required=True,
                   choices=["metrics", "reject", "noise", "histogram", "norms",
                            "partitions", "mcdropout"])
    p.add_argument("--tau-a", dest="tau_a", type=float, default=1.0)
    p.add_argument("--fractions", type=float, nargs="+",
                   default=[0.0, 0.1, 0.2, 0.3])
    p.add_argument("--etas", type=float, nargs="+", default=[0.0, 1.0, 5.0, 10.0])
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--passes", type=int, default=50)
    p.add_argument("--drop-rate", dest="drop_rate", type=float, default=0.2)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0,) else 0
    try:
        return args.func(args)
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
