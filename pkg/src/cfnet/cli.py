"""Command-line interface.

Subcommands: train, eval, params, grad-check, extract, probe, retrieve,
rank-maps, lc-weights, make-synth.  Every run resolves its configuration
(defaults < config file < flags), writes the snapshot to
``<out>/manifest.cfg``, and keeps all artifacts inside the output
directory.  Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    DEFAULTS,
    build_graph,
    build_train_config,
    load_data_spec,
    parse_config_file,
    parse_data_spec,
    resolve_config,
    typed_config,
    write_manifest,
)
from .data import make_synthetic, save_dataset
from .engine import forward_features
from .figures import (
    save_feature_map_montage,
    save_lc_weight_bars,
    save_training_curves,
)
from .fusion import FUSION_KINDS, fusion_param_count, prediction_strategy_audit
from .gradcheck import format_report_table
from .graph import (
    build_cfn_cifar,
    build_generic_cfn,
    build_plain_cifar_cnn,
    param_breakdown,
)
from .opchecks import check_all_ops, check_full_graph
from .train import DivergenceError, evaluate, train, write_log_csv
from .transfer import (
    average_precision,
    extract_fused_features,
    dump_lc_weights,
    knn_retrieve,
    linear_probe,
    load_features,
    mean_ap,
    ns_score,
    rank_feature_maps,
    read_features_csv,
    save_features,
    write_features_csv,
    write_lc_weight_csv,
    write_ranked_maps,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_common(sub):
    sub.add_argument("--config", help="flat key = value config file")
    sub.add_argument("--out", help="output directory (default runs/<command>)")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--model", choices=("cifar-cnn", "cifar-cfn", "generic"))
    sub.add_argument("--fusion", choices=FUSION_KINDS)
    sub.add_argument("--data")
    sub.add_argument("--eval-data", dest="eval_data")
    sub.add_argument("--full-schedule", action="store_true",
                     help="full CIFAR protocol: lr 0.1, x0.1 drop at 100k, stop at 120k")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override any config key")


def build_parser():
    parser = _Parser(prog="cfnet", description=__doc__)
    commands = parser.add_subparsers(dest="command")

    sub = commands.add_parser("train", parents=[], help="train a model")
    _add_common(sub)
    sub.set_defaults(handler=cmd_train)

    sub = commands.add_parser("eval", help="evaluate a checkpoint")
    _add_common(sub)
    sub.add_argument("--ckpt", required=True)
    sub.add_argument("--split", choices=("train", "test"), default="test")
    sub.set_defaults(handler=cmd_eval)

    sub = commands.add_parser("params", help="parameter audit tables")
    _add_common(sub)
    sub.add_argument("--csv", action="store_true", help="also write params.csv")
    sub.set_defaults(handler=cmd_params)

    sub = commands.add_parser("grad-check", help="finite-difference oracle suite")
    _add_common(sub)
    sub.add_argument("--all", action="store_true", help="check every op (default)")
    sub.add_argument("--op", help="check a single op by name")
    sub.add_argument("--seeds", type=int, default=20)
    sub.set_defaults(handler=cmd_grad_check)

    sub = commands.add_parser("extract", help="extract fused features")
    _add_common(sub)
    sub.add_argument("--ckpt", required=True)
    sub.add_argument("--split", choices=("train", "test"), default="test")
    sub.add_argument("--normalize", action="store_true",
                     help="L2-normalize feature rows")
    sub.set_defaults(handler=cmd_extract)

    sub = commands.add_parser("probe", help="linear probe on frozen features")
    _add_common(sub)
    sub.add_argument("--train-features", required=True)
    sub.add_argument("--test-features", required=True)
    sub.add_argument("--epochs", type=int, default=40)
    sub.add_argument("--lr", type=float, default=0.1)
    sub.set_defaults(handler=cmd_probe)

    sub = commands.add_parser("retrieve", help="KNN retrieval metrics")
    _add_common(sub)
    sub.add_argument("--db-features", required=True)
    sub.add_argument("--query-features", required=True)
    sub.add_argument("--distance", choices=("euclidean", "cosine"), default="cosine")
    sub.add_argument("--metric", choices=("map", "ns"), default="map")
    sub.add_argument("--self-singleton", action="store_true",
                     help="mAP with each query relevant only to itself")
    sub.set_defaults(handler=cmd_retrieve)

    sub = commands.add_parser("rank-maps", help="rank and render feature maps")
    _add_common(sub)
    sub.add_argument("--ckpt", required=True)
    sub.add_argument("--split", choices=("train", "test"), default="test")
    sub.add_argument("--index", type=int, default=0, help="image index")
    sub.add_argument("--node", help="activation node (default: main 1x1 head)")
    sub.add_argument("--top-m", dest="top_m", type=int, default=4)
    sub.set_defaults(handler=cmd_rank_maps)

    sub = commands.add_parser("lc-weights", help="dump fusion weight table")
    _add_common(sub)
    sub.add_argument("--ckpt", required=True)
    sub.set_defaults(handler=cmd_lc_weights)

    sub = commands.add_parser("make-synth", help="generate a synthetic dataset")
    _add_common(sub)
    sub.add_argument("--classes", type=int, default=3)
    sub.add_argument("--count", type=int, default=2000)
    sub.add_argument("--size", type=int, default=16)
    sub.add_argument("--gen-seed", dest="gen_seed", type=int, default=1)
    sub.add_argument("--name", default="synth.ds")
    sub.set_defaults(handler=cmd_make_synth)

    return parser


def _collect_overrides(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    for key in ("model", "fusion", "data", "eval_data"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "full_schedule", False):
        overrides["full_schedule"] = "1"
    for pair in getattr(args, "set", []):
        if "=" not in pair:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, value = pair.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def _prepare(args, command):
    file_values = parse_config_file(args.config) if args.config else {}
    resolved = resolve_config(file_values, _collect_overrides(args))
    out_dir = args.out or os.path.join("runs", command)
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(os.path.join(out_dir, "manifest.cfg"), resolved)
    return typed_config(resolved), out_dir


def _load_params(path):
    return dict(load_checkpoint(path))


def _load_feature_file(path):
    if path.endswith(".csv"):
        return read_features_csv(path)
    return load_features(path)


def _head_relu(graph):
    """The relu feeding the main-branch gap (the 1x1 head activations)."""
    if graph.fuse_node is not None:
        main_gap = graph.find("stack")[0].inputs[-1]
    else:
        main_gap = graph.find("gap")[0].name
    return graph.node(main_gap).inputs[0]


def cmd_train(args):
    t, out_dir = _prepare(args, "train")
    graph = build_graph(t)
    data = load_data_spec(t.data, "train", t.gcn)
    eval_data = load_data_spec(t.eval_data, "test", t.gcn) if t.eval_data else None
    cfg = build_train_config(t)
    try:
        result = train(graph, data, cfg, eval_data=eval_data)
    except DivergenceError as err:
        if err.last_good is not None:
            save_checkpoint(os.path.join(out_dir, "last_good.ckpt"),
                            list(err.last_good.items()))
            print(f"saved last good parameters to {out_dir}/last_good.ckpt",
                  file=sys.stderr)
        raise
    write_log_csv(result.log, os.path.join(out_dir, "log.csv"))
    save_checkpoint(os.path.join(out_dir, "model.ckpt"),
                    list(result.params.items()))
    save_training_curves(result.log, os.path.join(out_dir, "loss_curve.png"))
    last = result.log[-1]
    top5 = "" if last.top5 is None else f" top5 {last.top5:.4f}"
    print(f"trained {last.iteration} iters: loss {last.loss:.6f} "
          f"top1 {last.top1:.4f}{top5}")
    print(f"artifacts in {out_dir}")
    return 0


def cmd_eval(args):
    t, out_dir = _prepare(args, "eval")
    graph = build_graph(t)
    params = _load_params(args.ckpt)
    data = load_data_spec(t.data, args.split, t.gcn)
    res = evaluate(graph, params, data)
    top5 = "" if res.top5_error is None else f" top5 {res.top5_error:.4f}"
    print(f"top1 {res.top1_error:.4f}{top5}")
    with open(os.path.join(out_dir, "eval.csv"), "w") as fh:
        fh.write("top1,top5\n")
        fh.write(f"{res.top1_error},"
                 f"{'' if res.top5_error is None else res.top5_error}\n")
    return 0


def _params_rows(t):
    if t.model == "generic":
        fused = build_graph(t)
        plain = build_generic_cfn(t.widths, t.pools, (), fusion=t.fusion,
                                  fuse_channels=t.fuse_channels,
                                  num_classes=t.num_classes)
    else:
        plain = build_plain_cifar_cnn(t.num_classes)
        fused = build_cfn_cifar(t.num_classes, t.fusion)
    plain_bd = param_breakdown(plain)
    fused_bd = param_breakdown(fused)
    s = fused.branch_count
    rows = [
        ("basic", plain_bd.total),
        ("side branches", fused_bd.side_branches),
        (f"fusion ({t.fusion})", fused_bd.fusion),
        ("total", fused_bd.total),
    ]
    per_kind = [(kind, fusion_param_count(kind, t.fuse_channels, s))
                for kind in FUSION_KINDS]
    audit = prediction_strategy_audit(t.fuse_channels, t.num_classes, s, t.fusion)
    return rows, per_kind, audit, s


def cmd_params(args):
    t, out_dir = _prepare(args, "params")
    rows, per_kind, audit, s = _params_rows(t)
    width = max(len(name) for name, _ in rows)
    print(f"parameter audit (C={t.num_classes}, K={t.fuse_channels}, S={s})")
    for name, count in rows:
        print(f"  {name:<{width}}  {count:>9,}")
    print("fusion parameters by kind: "
          + "  ".join(f"{kind}={count}" for kind, count in per_kind))
    print(f"prediction strategies (fusion {t.fusion}):")
    print(f"  {'strategy':<10}{'direct':>9}{'formula':>9}")
    print(f"  {'EFLP':<10}{audit.eflp_direct:>9}{audit.eflp_formula:>9}")
    print(f"  {'EPLF':<10}{audit.eplf_direct:>9}{audit.eplf_formula:>9}")
    if args.csv:
        path = os.path.join(out_dir, "params.csv")
        with open(path, "w") as fh:
            fh.write("section,count\n")
            for name, count in rows:
                fh.write(f"{name},{count}\n")
            for kind, count in per_kind:
                fh.write(f"fusion_{kind},{count}\n")
            fh.write(f"eflp_direct,{audit.eflp_direct}\n")
            fh.write(f"eplf_direct,{audit.eplf_direct}\n")
            fh.write(f"eflp_formula,{audit.eflp_formula}\n")
            fh.write(f"eplf_formula,{audit.eplf_formula}\n")
        print(f"wrote {path}")
    return 0


def cmd_grad_check(args):
    t, out_dir = _prepare(args, "grad-check")
    seeds = range(args.seeds)
    if args.op:
        from .opchecks import check_op
        named = [(args.op, check_op(args.op, seeds))]
    else:
        named = check_all_ops(seeds)
        named.append(("full_graph", check_full_graph(seed=t.seed, threshold=1e-5)))
    table = format_report_table(named)
    print(table)
    with open(os.path.join(out_dir, "grad_check.txt"), "w") as fh:
        fh.write(table + "\n")
    if all(report.passed for _, report in named):
        return 0
    raise RuntimeError("gradient checks failed")


def cmd_extract(args):
    t, out_dir = _prepare(args, "extract")
    graph = build_graph(t)
    params = _load_params(args.ckpt)
    data = load_data_spec(t.data, args.split, t.gcn)
    fm = extract_fused_features(graph, params, data, l2_normalize=args.normalize)
    write_features_csv(fm, os.path.join(out_dir, "features.csv"))
    save_features(os.path.join(out_dir, "features.fm"), fm)
    print(f"extracted {fm.rows.shape[0]} x {fm.rows.shape[1]} features to {out_dir}")
    return 0


def cmd_probe(args):
    t, out_dir = _prepare(args, "probe")
    train_fm = _load_feature_file(args.train_features)
    test_fm = _load_feature_file(args.test_features)
    result = linear_probe(train_fm, test_fm, epochs=args.epochs, lr=args.lr,
                          seed=t.seed)
    print(f"probe accuracy {result.accuracy:.4f}")
    if result.missing_classes:
        print(f"classes only in test set: {list(result.missing_classes)}")
    with open(os.path.join(out_dir, "probe.csv"), "w") as fh:
        fh.write("accuracy,missing_classes\n")
        missing = ";".join(str(c) for c in result.missing_classes)
        fh.write(f"{result.accuracy},{missing}\n")
    return 0


def cmd_retrieve(args):
    t, out_dir = _prepare(args, "retrieve")
    db = _load_feature_file(args.db_features)
    queries = _load_feature_file(args.query_features)
    result = knn_retrieve(db, queries, distance=args.distance)
    per_query = []
    if args.metric == "ns":
        score = ns_score(result, db.labels, queries.labels)
        top4 = result.rankings[:, :4]
        per_query = (db.labels[top4] == queries.labels[:, None]).sum(axis=1).tolist()
        print(f"ns_score {score:.4f}")
        summary = ("ns_score", score)
    else:
        if args.self_singleton:
            if db.rows.shape[0] != queries.rows.shape[0]:
                raise ConfigError("--self-singleton needs query set == database")
            relevance = [{i} for i in range(db.rows.shape[0])]
        else:
            relevance = [set(np.flatnonzero(db.labels == lab).tolist())
                         for lab in queries.labels]
        score = mean_ap(result, relevance)
        per_query = [average_precision(result.rankings[q], relevance[q])
                     for q in range(len(relevance))]
        print(f"mAP {score:.4f}")
        summary = ("mAP", score)
    with open(os.path.join(out_dir, "retrieval.csv"), "w") as fh:
        fh.write(f"query,{summary[0]}\n")
        for q, value in enumerate(per_query):
            fh.write(f"{q},{value}\n")
        fh.write(f"mean,{summary[1]}\n")
    return 0


def cmd_rank_maps(args):
    t, out_dir = _prepare(args, "rank-maps")
    graph = build_graph(t)
    params = _load_params(args.ckpt)
    data = load_data_spec(t.data, args.split, t.gcn)
    if not 0 <= args.index < len(data):
        raise ConfigError(f"image index {args.index} out of range 0..{len(data) - 1}")
    node = args.node or _head_relu(graph)
    acts = forward_features(graph, params, data.images[args.index:args.index + 1],
                            node)[0]
    ranked = rank_feature_maps(acts, top_m=args.top_m)
    paths = write_ranked_maps(ranked, out_dir)
    with open(os.path.join(out_dir, "ranking.csv"), "w") as fh:
        fh.write("rank,channel,mean_activation\n")
        for rank, channel in enumerate(ranked.order):
            fh.write(f"{rank},{int(channel)},{float(ranked.means[channel])}\n")
    save_feature_map_montage(ranked, os.path.join(out_dir, "feature_maps.png"))
    print(f"wrote {len(paths)} maps from node {node} to {out_dir}")
    return 0


def cmd_lc_weights(args):
    t, out_dir = _prepare(args, "lc-weights")
    params = _load_params(args.ckpt)
    means = dump_lc_weights(params)
    weight = params["fuse.weight"]
    write_lc_weight_csv(weight,
                        os.path.join(out_dir, "lc_weights.csv"),
                        os.path.join(out_dir, "lc_weights_matrix.csv"))
    save_lc_weight_bars(means, os.path.join(out_dir, "lc_weights.png"))
    print("per-branch mean weights: "
          + "  ".join(f"branch{s + 1}={m:.4f}" for s, m in enumerate(means)))
    return 0


def cmd_make_synth(args):
    if getattr(args, "data", None) is None:
        args.data = f"synth:{args.classes},{args.count},{args.size},{args.gen_seed}"
    t, out_dir = _prepare(args, "make-synth")
    kind, detail = parse_data_spec(t.data)
    if kind != "synth":
        raise ConfigError("make-synth needs a synth:C,N,H,seed data spec")
    parts = [int(p) for p in detail.split(",")]
    ds = make_synthetic(*parts)
    path = os.path.join(out_dir, args.name)
    save_dataset(path, ds)
    print(f"wrote {len(ds)} samples ({ds.num_classes} classes) to {path}")
    return 0


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    if not getattr(args, "handler", None):
        print(parser.format_usage(), file=sys.stderr)
        return 1
    try:
        return args.handler(args) or 0
    except (UsageError, ConfigError, ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())
