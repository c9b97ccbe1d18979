"""Command-line entry point: ``probex <command> [flags]``.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dense import DenseExpertParams, dense_forward, prop1_construct, prop2_tucker_expand
from .errors import NumericError, ProbexError
from .evaluation import (
    eval_knn,
    eval_multilabel,
    eval_occ,
    eval_zeroshot,
    representations,
    retrieve,
)
from .linalg import make_rng
from .model import ProbeXDims, dense_param_count, forward, init_params
from .router import assignment_accuracy, fit_router
from .tensorio import to_f32
from .trainer import METANET_KINDS, EmbeddingTable, TrainConfig, TrainedMetanet, select_layer, train
from .zoo import DEFAULT_LAYER, TaskSpec, build_zoo, load_zoo, resolve_threads, save_zoo

log = logging.getLogger("probex")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(ProbexError):
    pass


# ---------------------------------------------------------------------------
# run bookkeeping


def git_blob_hash(data: bytes) -> str:
    """Object id git would assign to a blob with this content."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def inputs_hash(inputs: dict[str, bytes]) -> tuple[dict[str, str], str]:
    blobs = {name: git_blob_hash(data) for name, data in sorted(inputs.items())}
    listing = "".join(f"{h} {name}\n" for name, h in blobs.items()).encode()
    return blobs, git_blob_hash(listing)


def zoo_inputs(path) -> dict[str, bytes]:
    path = Path(path)
    out = {"zoo/manifest.json": (path / "manifest.json").read_bytes()}
    for f in sorted((path / "tensors").glob("*.wzt")):
        out[f"zoo/tensors/{f.name}"] = f.read_bytes()
    return out


def prepare_out(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise UsageError(f"output {path} exists and is not empty; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run(out: Path, command: str, config: dict, inputs: dict[str, bytes], results: dict | None = None) -> None:
    blobs, digest = inputs_hash(inputs)
    payload = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": blobs,
        "input_hash": digest,
    }
    if results is not None:
        payload["results"] = results
    (out / "run.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return list(v)
    return v


def _config_echo(args, skip=("func", "config_file")) -> dict:
    return {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in skip}


def _load_json(path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{what} {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path} is not valid JSON: {exc}") from None


def _load_zoo(path):
    if path is None:
        raise UsageError("--zoo is required")
    if not (Path(path) / "manifest.json").exists():
        raise UsageError(f"no zoo at {path} (manifest.json missing)")
    return load_zoo(path)


def _load_table(path):
    if path is None:
        return None
    if not Path(path).exists():
        raise UsageError(f"embedding table {path} not found")
    return EmbeddingTable.load(path)


def _ints(text: str, name: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{name} expects comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_generate_zoo(args) -> int:
    if args.n is None or args.n < 1:
        raise UsageError(f"--n must be a positive integer, got {args.n}")
    out = prepare_out(args.out, args.force)
    zoo, emb = build_zoo(args.mode, args.n, args.seed, TaskSpec(), threads=resolve_threads(args.threads))
    save_zoo(zoo, out)
    inputs = {}
    if emb is not None:
        EmbeddingTable.from_dict(emb).save(out / "embeddings.json")
    write_run(out, "generate-zoo", _config_echo(args, skip=("func", "config_file", "threads")), inputs,
              {"models": len(zoo), "trees": zoo.trees})
    print(f"wrote {len(zoo)} models in {len(zoo.trees)} tree(s) to {out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    fields = {}
    for key in ("lr", "weight_decay", "epochs", "batch_size", "temperature", "depth"):
        if getattr(args, key) is not None:
            fields[key] = getattr(args, key)
    if args.ranks is not None:
        r = _ints(args.ranks, "--ranks")
        fields["ranks"] = tuple(r * 3 if len(r) == 1 else r)
    fields["seed"] = args.seed
    fields["loss"] = "contrastive_align" if args.task == "align" else "multilabel_bce"
    return TrainConfig(**fields)


def _apply_config(args, parser) -> None:
    """Fill unset flags from ``--config``; explicit flags win."""
    if not getattr(args, "config_file", None):
        return
    cfg = _load_json(args.config_file, "config file")
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    known = vars(args)
    for key, value in cfg.items():
        attr = key.replace("-", "_")
        if attr not in known or attr in ("func", "config_file"):
            raise UsageError(f"config key {key!r} is not an option of this command")
        if known[attr] is None or known[attr] == parser.get_default(attr):
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            setattr(args, attr, value)


def cmd_train(args) -> int:
    if args.model not in METANET_KINDS:
        raise UsageError(f"--model must be one of {METANET_KINDS}")
    zoo = _load_zoo(args.zoo)
    if args.task == "align" and args.embeddings is None:
        raise UsageError("--task align needs --embeddings")
    table = _load_table(args.embeddings)
    cfg = _train_config(args)
    layers = (args.layer or zoo.meta.get("input_layer", DEFAULT_LAYER)).split(",")
    out = prepare_out(args.out, args.force)
    results = {}
    try:
        if args.select_layer and len(layers) > 1:
            best, model, scores = select_layer(args.model, zoo, layers, cfg, table, history_csv=None)
            results["layer_scores"] = {name: score for name, score in scores}
            model, history = train(args.model, zoo, [best], cfg, table, history_csv=out / "history.csv")
            results["layer"] = best
        else:
            model, history = train(args.model, zoo, layers, cfg, table, history_csv=out / "history.csv")
            results["layer"] = ",".join(layers)
    except NumericError as exc:
        write_run(out, "train", _config_echo(args), zoo_inputs(args.zoo), {"error": str(exc)})
        raise
    model.params = {k: to_f32(v) for k, v in model.params.items()}
    model.save(out / "model")
    if history:
        best = max(range(len(history)), key=lambda i: (history[i]["val_metric"], -i))
        results.update(best_epoch=history[best]["epoch"], best_val_metric=history[best]["val_metric"])
    results["param_count"] = int(sum(a.size for a in model.params.values()))
    inputs = zoo_inputs(args.zoo)
    if args.embeddings:
        inputs["embeddings.json"] = Path(args.embeddings).read_bytes()
    write_run(out, "train", {**_config_echo(args), "train_config": cfg.to_dict()}, inputs, results)
    print(json.dumps(results, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    zoo = _load_zoo(args.zoo)
    model_dir = Path(args.model_dir)
    if not (model_dir / "model.json").exists() and (model_dir / "model" / "model.json").exists():
        model_dir = model_dir / "model"
    model = TrainedMetanet.load(model_dir)
    out = prepare_out(args.out, args.force)
    inputs = zoo_inputs(args.zoo)
    if model.task == "classify":
        report = eval_multilabel(model, zoo, args.split)
    else:
        if args.embeddings is None:
            raise UsageError("aligned models need --embeddings")
        table = _load_table(args.embeddings)
        inputs["embeddings.json"] = Path(args.embeddings).read_bytes()
        held = set(zoo.holdout_classes)
        recs = zoo.split(args.split)
        if args.restrict == "holdout":
            recs = [r for r in recs if r.embedding_key in held]
            classes = [n for n in table.names if n in held]
        elif args.restrict == "train":
            recs = [r for r in recs if r.embedding_key not in held]
            classes = [n for n in table.names if n not in held and n in {r.embedding_key for r in zoo.records}]
        else:
            classes = [n for n in table.names if n in {r.embedding_key for r in zoo.records}]
        if args.knn is not None or args.occ:
            ref = zoo.split("train")
            if args.restrict == "holdout":
                ref = [r for r in ref if r.embedding_key in held]
            mdl = None if args.rep == "raw" else model
            layer = model.layers[0]
            ref_reps = representations(mdl, ref, args.rep, layer)
            test_reps = representations(mdl, recs, args.rep, layer)
            k = None if args.knn in (None, 0) else args.knn
            ref_lab = [r.embedding_key for r in ref]
            test_lab = [r.embedding_key for r in recs]
            if args.occ:
                report = eval_occ(ref_reps, ref_lab, test_reps, test_lab, classes, k)
            else:
                report = eval_knn(ref_reps, ref_lab, test_reps, test_lab, k, classes)
        else:
            report = eval_zeroshot(model, None, recs, table, classes)
    report.config.update(split=args.split, model_dir=str(args.model_dir))
    report.seed = args.seed
    report.save_json(out / "report.json")
    report.save_csv(out / "per_class.csv")
    write_run(out, "eval", _config_echo(args), inputs, {"aggregate": report.aggregate, "task": report.task})
    print(json.dumps({"task": report.task, report.metric: report.aggregate}))
    return EXIT_OK


def cmd_route(args) -> int:
    zoo = _load_zoo(args.zoo)
    layer = args.layer or zoo.meta.get("input_layer", DEFAULT_LAYER)
    out = prepare_out(args.out, args.force)
    router = fit_router(zoo, layer, "train", args.k)
    router.save(out / "router")
    results = {"k": router.k, "layer": layer, "trees": len(zoo.trees)}
    test = zoo.split("test")
    if test:
        results["test_assignment_accuracy"] = assignment_accuracy(router, test, zoo)
    write_run(out, "route", _config_echo(args), zoo_inputs(args.zoo), results)
    print(json.dumps(results, sort_keys=True))
    return EXIT_OK


def cmd_retrieve(args) -> int:
    zoo = _load_zoo(args.zoo)
    model = TrainedMetanet.load(Path(args.model_dir) / "model" if (Path(args.model_dir) / "model").is_dir() else args.model_dir)
    pool = zoo.split(args.pool)
    query = zoo.get(args.query) if args.query in {r.model_id for r in zoo.records} else None
    if query is None:
        raise UsageError(f"unknown model id {args.query!r}")
    mdl = None if args.rep == "raw" else model
    reps = representations(mdl, pool, args.rep, model.layers[0])
    q = representations(mdl, [query], args.rep, model.layers[0])
    ranked = retrieve([r.model_id for r in pool], reps, q, args.n, exclude=query.model_id)
    for mid, dist in ranked:
        print(f"{mid}\t{dist:.6f}")
    return EXIT_OK


def check_equivalence(dims, trials: int, seed: int) -> dict:
    """Largest deviation of both constructive equivalences over random instances."""
    d_W, d_H, d_Y, r_U, r_V, r_T = dims
    rng = make_rng(seed, 0xE9)
    dev1 = dev2 = 0.0
    for _ in range(trials):
        W = rng.standard_normal((d_W, d_H, d_Y))
        net = prop1_construct(W)
        X = rng.standard_normal((d_W, d_H))
        dev1 = max(dev1, float(np.max(np.abs(net.forward(X) - dense_forward(W, X)))))
        p = init_params(ProbeXDims(d_W, d_H, d_Y, r_U, r_V, r_T), rng, "identity")
        dense = prop2_tucker_expand(p)
        X = rng.standard_normal((d_W, d_H))
        dev2 = max(dev2, float(np.max(np.abs(forward(p, X)[1] - dense_forward(dense, X)))))
    return {"construction_max_dev": dev1, "tucker_max_dev": dev2, "max_dev": max(dev1, dev2)}


def cmd_check_equivalence(args) -> int:
    dims = _ints(args.dims, "--dims")
    if len(dims) != 6 or min(dims) < 1:
        raise UsageError("--dims needs six positive integers d_W,d_H,d_Y,r_U,r_V,r_T")
    if args.trials < 1 or args.tol < 0:
        raise UsageError("--trials must be positive and --tol non-negative")
    res = check_equivalence(dims, args.trials, args.seed)
    ok = res["max_dev"] <= args.tol
    print(json.dumps({**res, "tol": args.tol, "pass": ok}, sort_keys=True))
    return EXIT_OK if ok else EXIT_CHECK


def params_table(d_W: int, d_H: int, d_Y: int, ranks, depth: int = 1) -> dict:
    probex = ProbeXDims(d_W, d_H, d_Y, *ranks, depth=depth).param_count()
    dense = dense_param_count(d_W, d_H, d_Y)
    return {"probex": probex, "dense": dense, "ratio": dense / probex}


def cmd_params(args) -> int:
    ranks = _ints(args.ranks, "--ranks")
    ranks = ranks * 3 if len(ranks) == 1 else ranks
    if len(ranks) != 3 or min(ranks + [args.d_w, args.d_h, args.d_y, args.depth]) < 1:
        raise UsageError("dimensions and ranks must be positive; --ranks takes one or three values")
    t = params_table(args.d_w, args.d_h, args.d_y, ranks, args.depth)
    print(f"dims     d_W={args.d_w} d_H={args.d_h} d_Y={args.d_y} r={','.join(map(str, ranks))} depth={args.depth}")
    print(f"probex   {t['probex']:,}")
    print(f"dense    {t['dense']:,}")
    print(f"ratio    {t['ratio']:.2f}x")
    return EXIT_OK


def cmd_tree_vs_forest(args) -> int:
    """Paired Tree/Forest zoos, same metanetwork config; one CSV row per population."""
    if args.n < 2:
        raise UsageError("--n must be at least 2")
    out = prepare_out(args.out, args.force)
    ranks = _ints(args.ranks, "--ranks")
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, ranks=tuple(ranks * 3 if len(ranks) == 1 else ranks))
    threads = resolve_threads(args.threads)
    rows = []
    for mode in ("tree", "forest"):
        zoo, _ = build_zoo(mode, args.n, args.seed, TaskSpec(), threads=threads)
        model, history = train("probex-linear", zoo, [args.layer], cfg)
        rep = eval_multilabel(model, zoo, "test")
        best_val = max((h["val_metric"] for h in history), default=float("nan"))
        rows.append([mode, len(zoo.split("train")), repr(rep.aggregate), repr(best_val)])
    with open(out / "tree_vs_forest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["population", "n_train", "test_accuracy", "val_accuracy"])
        w.writerows(rows)
    write_run(out, "tree-vs-forest", _config_echo(args, skip=("func", "config_file", "threads")), {},
              {r[0]: float(r[2]) for r in rows})
    for r in rows:
        print(f"{r[0]:7s} test accuracy {float(r[2]):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="worker processes (default: PROBEX_THREADS or all cores)")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("--config", dest="config_file", default=None, help="JSON file of option values")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="probex", description="Weight-space learning with probing experts.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-zoo", parents=[common], help="generate a synthetic model zoo")
    g.add_argument("--mode", default="tree", help="tree | forest | multitree:K | align")
    g.add_argument("--n", type=int, default=None, help="number of models")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_zoo)

    t = sub.add_parser("train", parents=[common], help="train a metanetwork")
    t.add_argument("--zoo")
    t.add_argument("--model", default="probex", choices=METANET_KINDS)
    t.add_argument("--task", default="classify", choices=("classify", "align"))
    t.add_argument("--layer", default=None, help="layer name(s), comma separated")
    t.add_argument("--select-layer", action="store_true", help="train each listed layer and keep the best on validation")
    t.add_argument("--embeddings", default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--weight-decay", type=float, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--temperature", type=float, default=None)
    t.add_argument("--ranks", default=None, help="r or r_U,r_V,r_T")
    t.add_argument("--depth", type=int, default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a trained metanetwork")
    e.add_argument("--zoo")
    e.add_argument("--model-dir", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--embeddings", default=None)
    e.add_argument("--restrict", default="all", choices=("all", "train", "holdout"),
                   help="aligned models: candidate classes and models to score")
    e.add_argument("--knn", type=int, default=None, help="kNN classification with this k (0 = all)")
    e.add_argument("--occ", action="store_true", help="one-class AUC per class instead of classification")
    e.add_argument("--rep", default="aligned", choices=("aligned", "raw"))
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("route", parents=[common], help="cluster a zoo into Model Trees")
    r.add_argument("--zoo")
    r.add_argument("--layer", default=None)
    r.add_argument("--k", type=int, default=None, help="override the number of trees")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_route)

    q = sub.add_parser("retrieve", parents=[common], help="nearest models to a query model")
    q.add_argument("--zoo")
    q.add_argument("--model-dir", required=True)
    q.add_argument("--query", required=True)
    q.add_argument("--n", type=int, default=5)
    q.add_argument("--pool", default="train")
    q.add_argument("--rep", default="aligned", choices=("aligned", "raw"))
    q.set_defaults(func=cmd_retrieve)

    c = sub.add_parser("check-equivalence", parents=[common], help="dense/probing equivalence oracles")
    c.add_argument("--dims", default="6,5,4,6,5,4", help="d_W,d_H,d_Y,r_U,r_V,r_T")
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--tol", type=float, default=1e-9)
    c.set_defaults(func=cmd_check_equivalence)

    m = sub.add_parser("params", parents=[common], help="parameter counts of ProbeX vs the dense expert")
    m.add_argument("--d-w", type=int, default=768)
    m.add_argument("--d-h", type=int, default=768)
    m.add_argument("--d-y", type=int, default=100)
    m.add_argument("--ranks", default="128")
    m.add_argument("--depth", type=int, default=1)
    m.set_defaults(func=cmd_params)

    f = sub.add_parser("tree-vs-forest", parents=[common], help="paired Tree/Forest experiment")
    f.add_argument("--n", type=int, default=440)
    f.add_argument("--epochs", type=int, default=200)
    f.add_argument("--ranks", default="32")
    f.add_argument("--layer", default=DEFAULT_LAYER)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_tree_vs_forest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        _apply_config(args, sub)
        return args.func(args)
    except NumericError as exc:
        print(f"probex: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ProbexError, KeyError) as exc:
        print(f"probex {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
