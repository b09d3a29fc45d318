"""``croma`` command line: data generation, pretraining, embedding export and evaluation."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evalkit
from .model import ConfigError, ModelConfig
from .posbias import GridSpec, build_2d_alibi, build_x_alibi, format_grid
from .synthdata import SyntheticWorld, generate, load_dataset, save_dataset
from .train import RunConfig, embed, gradcheck, load_checkpoint, merge_overrides, pretrain, seed_from_env


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, default=_jsonable)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _eval_images(args) -> tuple[np.ndarray, dict, ModelConfig, dict]:
    params, cfg, manifest = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    stats = manifest.get("data_stats") or ds.stats
    optical, _ = ds.normalized(stats)
    return optical[: args.n], params, cfg, stats


# -- subcommands ---------------------------------------------------------------

def cmd_gen(args) -> int:
    world = SyntheticWorld(seed=seed_from_env(args.seed), size=args.size)
    ds = generate(world, args.n, start=args.start)
    save_dataset(ds, args.out)
    counts = np.bincount(ds.labels, minlength=world.n_classes)
    _emit({"out": args.out, "n": len(ds), "size": ds.size, "class_counts": counts}, None)
    return 0


def cmd_pretrain(args) -> int:
    flags = {
        "steps": args.steps,
        "batch_size": args.batch_size,
        "base_lr": args.base_lr,
        "warmup_frac": args.warmup_frac,
        "seed": args.seed,
        "dataset": args.dataset,
        "out_dir": args.out,
        "checkpoint_every": args.checkpoint_every,
        "augment": False if args.no_augment else None,
        "model.pos_encoding": args.pos_encoding,
        "model.mask_ratio": args.mask_ratio,
        "model.mask_policy": args.mask_policy,
        "model.mae_target": args.mae_target,
        "model.patch_size": args.patch_size,
        "model.image_size": args.image_size,
    }
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = RunConfig.from_dict(merge_overrides(base, flags))
    cfg.seed = seed_from_env(cfg.seed)
    if not cfg.out_dir:
        raise ConfigError("--out is required")
    resolved = cfg.to_dict()
    resolved["effective_lr"] = cfg.effective_lr
    print(json.dumps(resolved, indent=2, sort_keys=True))
    result = pretrain(cfg, log_every=args.log_every)
    last = result.metrics[-1] if result.metrics else {}
    _emit({"checkpoint": str(result.checkpoint), "steps": cfg.steps, "final": last}, None)
    return 0


def cmd_embed(args) -> int:
    table = embed(args.checkpoint, args.dataset, source=args.source, out=args.out, split=args.split)
    _emit({"out": args.out, "rows": len(table), "dim": table.dim, "source": table.source}, None)
    return 0


def _probe_kw(args) -> dict:
    return {
        "lr_grid": evalkit.FULL_LR_GRID if args.full_grid else evalkit.LR_GRID,
        "epochs": args.epochs,
        "seed": args.seed,
    }


def cmd_probe(args) -> int:
    train = evalkit.EmbeddingTable.load(args.train)
    val = evalkit.EmbeddingTable.load(args.val)
    fit = evalkit.fit_mlp_probe if args.kind == "mlp" else evalkit.fit_linear_probe
    probe = fit(train, val, **_probe_kw(args))
    metric = "mAP" if probe.multilabel else "accuracy"
    report = {
        "kind": probe.kind,
        "metric": metric,
        "value": probe.val_metric,
        "val_loss": probe.val_loss,
        "lr": probe.lr,
        "grid": {repr(lr): {metric: m, "loss": l} for lr, (m, l) in probe.grid.items()},
    }
    _emit(report, args.out)
    return 0


def cmd_knn(args) -> int:
    train = evalkit.EmbeddingTable.load(args.train)
    val = evalkit.EmbeddingTable.load(args.val)
    pred = evalkit.knn_classify(train, val, k=args.k)
    _emit({"k": args.k, "accuracy": evalkit.accuracy(pred, val.labels)}, args.out)
    return 0


def cmd_kmeans(args) -> int:
    train = evalkit.EmbeddingTable.load(args.train)
    val = evalkit.EmbeddingTable.load(args.val)
    K = args.K or int(np.unique(train.labels).size)
    result = evalkit.kmeans_cluster(train, K, restarts=args.restarts, seed=args.seed)
    acc, mapping = evalkit.clustering_accuracy(result.assign(val.matrix), val.labels)
    _emit({"K": K, "inertia": result.inertia, "accuracy": acc, "cluster_to_class": mapping}, args.out)
    return 0


def cmd_sparse_probe(args) -> int:
    train = evalkit.EmbeddingTable.load(args.train)
    val = evalkit.EmbeddingTable.load(args.val)
    rep = evalkit.sparse_probe(train, val, args.target_class, ks=args.ks, **_probe_kw(args))
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "f1"])
            for row in rep.rows():
                w.writerow([row["k"], repr(row["f1"])])
    report = {
        "class": rep.target_class,
        "prevalence": rep.prevalence,
        "ranking": rep.ranking[: max(rep.ks)],
        "f1": rep.rows(),
    }
    _emit(report, args.out)
    return 0


def cmd_extrapolate(args) -> int:
    params, cfg, manifest = load_checkpoint(args.checkpoint)
    world = SyntheticWorld(**manifest["world"]) if "world" in manifest else SyntheticWorld(size=cfg.image_size)
    rep = evalkit.extrapolation_eval(
        params, cfg, args.sizes, world=world, stats=manifest.get("data_stats"), interp=args.interp, seed=args.seed
    )
    report = {
        "train_size": rep.train_size,
        "accuracy": {str(k): v for k, v in rep.accuracy.items()},
        "relative_drop": {str(k): rep.relative_drop(k) for k in rep.accuracy},
        "finite": {str(k): v for k, v in rep.finite.items()},
        "interp": rep.interp,
        "pos_encoding": cfg.pos_encoding,
    }
    _emit(report, args.out)
    return 0


def cmd_diagnose(args) -> int:
    optical, params, cfg, _ = _eval_images(args)
    inv = evalkit.invariance_diagnostic(params, cfg, optical)
    col = evalkit.collapse_diagnostic(params, cfg, optical, seed=args.seed)
    report = {
        "pos_encoding": cfg.pos_encoding,
        "invariance": inv,
        "mean_rotation_cosine": float(np.mean([inv[t] for t in ("rot90", "rot180", "rot270")])),
        "patch_cosine": col.mean_cosine,
        "position_probe_ce": col.position_ce,
        "chance_ce": col.chance_ce,
    }
    _emit(report, args.out)
    return 0


def cmd_bias(args) -> int:
    spec = GridSpec(args.rows, args.cols)
    stack = (build_x_alibi if args.kind == "cross" else build_2d_alibi)(spec, args.heads)
    print(f"slopes: {' '.join(repr(float(s)) for s in stack.slopes)}")
    print(f"distances ({spec.rows}x{spec.cols} grid, bias / slope):")
    print(format_grid(stack.distances()))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = ModelConfig.toy(patch_size=args.patch_size, lambda_mae=args.lambda_mae, lambda_con=args.lambda_con)
    rep = gradcheck(cfg, batch_size=args.batch_size, seed=seed_from_env(args.seed), tol=args.tol)
    name, err = rep.worst
    _emit({"passed": rep.passed, "tol": rep.tol, "worst": {"param": name, "rel_err": err}, "groups": rep.by_group()}, args.out)
    return 0 if rep.passed else 1


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="croma", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--size", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start", type=int, default=0, help="first sample index")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="run pretraining and write a checkpoint + metrics CSV")
    p.add_argument("--config", help="JSON run config; flags override its keys")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--base-lr", type=float)
    p.add_argument("--warmup-frac", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--pos-encoding", choices=("2d-alibi+x-alibi", "2d-alibi-only", "2d-sinusoidal"))
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--mask-policy", choices=("independent", "shared"))
    p.add_argument("--mae-target", choices=("both", "optical-only", "radar-only"))
    p.add_argument("--patch-size", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("embed", help="export frozen representations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--source", choices=("R", "O", "RO", "concat"), default="O")
    p.add_argument("--split", choices=("train", "val"), default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    def table_args(p):
        p.add_argument("--train", required=True, help="training embedding table dir")
        p.add_argument("--val", required=True, help="validation embedding table dir")
        p.add_argument("--out", help="write the JSON report here too")
        p.add_argument("--seed", type=int, default=0)

    def probe_args(p):
        p.add_argument("--epochs", type=int, default=30)
        p.add_argument("--full-grid", action="store_true", help="sweep 27 learning rates instead of 3")

    p = sub.add_parser("probe", help="linear or MLP probe on frozen embeddings")
    table_args(p)
    probe_args(p)
    p.add_argument("--kind", choices=("linear", "mlp"), default="linear")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("knn", help="cosine kNN classification")
    table_args(p)
    p.add_argument("--k", type=int, default=20)
    p.set_defaults(func=cmd_knn)

    p = sub.add_parser("kmeans", help="k-means++ clustering scored by Hungarian matching")
    table_args(p)
    p.add_argument("--K", type=int, help="defaults to the number of training classes")
    p.add_argument("--restarts", type=int, default=10)
    p.set_defaults(func=cmd_kmeans)

    p = sub.add_parser("sparse-probe", help="F1 of binary probes on the top-k mean-difference dimensions")
    table_args(p)
    probe_args(p)
    p.add_argument("--class", dest="target_class", type=int, required=True)
    p.add_argument("--ks", type=int, nargs="+", default=list((1, 2, 4, 8, 16, 32, 64)))
    p.add_argument("--csv", help="F1-vs-k curve output")
    p.set_defaults(func=cmd_sparse_probe)

    p = sub.add_parser("extrapolate", help="patch probing at larger image sizes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sizes", type=int, nargs="+", required=True, help="image sides in pixels")
    p.add_argument("--interp", action="store_true", help="resize sinusoidal positions to each grid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_extrapolate)

    p = sub.add_parser("diagnose", help="rotation/flip invariance and patch-collapse diagnostics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--n", type=int, default=256, help="number of images used")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("bias", help="print the 2D distance bias for a patch grid")
    p.add_argument("--rows", type=int, default=3)
    p.add_argument("--cols", type=int, default=3)
    p.add_argument("--heads", type=int, default=16)
    p.add_argument("--kind", choices=("self", "cross"), default="self")
    p.set_defaults(func=cmd_bias)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss on a toy model")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--lambda-mae", type=float, default=1.0)
    p.add_argument("--lambda-con", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"croma {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
