"""Command-line entry point: synth | train | evaluate | gradcheck | export-embeddings."""
import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time

import numpy as np

from . import numerics as nx
from . import synthgen
from .data import build_batch, load_dataset
from .evaluation import evaluate
from .model import (CheckpointError, ModelConfig, ModelMode, as_leaves, init_params,
                    load_checkpoint, save_checkpoint)
from .model import score_items
from .objectives import (ContrastConfig, autoregressive_ce_loss, item_contrastive_loss,
                         user_contrastive_loss)
from .training import TrainConfig, compute_losses, train

logger = logging.getLogger("tssr")

MODE_CHOICES = ["tssr", "id", "content", "hybrid"]


class UsageError(Exception):
    pass


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json_atomic(path, obj):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def manifest_beside(path):
    """Manifest path for a single-file output: ``report.json`` -> ``report.manifest.json``."""
    stem, _ = os.path.splitext(os.path.abspath(path))
    return stem + ".manifest.json"


def write_manifest(target, command, args, inputs, outputs, started, **extra):
    manifest = {
        "command": command,
        "config_path": getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "inputs": {p: sha256(p) for p in inputs if p},
        "outputs": {p: sha256(p) for p in outputs},
        "wall_time_s": round(time.time() - started, 3),
    }
    manifest.update(extra)
    if os.path.isdir(target):
        target = os.path.join(target, "manifest.json")
    write_json_atomic(target, manifest)
    return manifest


def read_config(path):
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# synth -----------------------------------------------------------------------------

def cmd_synth(args):
    started = time.time()
    raw = read_config(args.config)
    content_format = raw.pop("content_format", "tsv")
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        config = synthgen.SynthConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad synth config: {exc}") from None
    os.makedirs(args.out, exist_ok=True)
    data = synthgen.generate(config)
    paths = synthgen.write(data, args.out, content_format=content_format)
    cfg_path = os.path.join(args.out, "synth_config.json")
    write_json_atomic(cfg_path, config.to_dict())
    outputs = [paths["interactions"], paths["content"], paths["clusters"], cfg_path]
    write_manifest(args.out, "synth", args, [args.config], outputs, started,
                   oracle_ndcg10=synthgen.oracle_ndcg_bound(config, data.cluster))
    print(f"wrote {len(data.sequences)} users x {config.n_items} items to {args.out}")
    return 0


# train ---------------------------------------------------------------------------------

def _data_options(args, raw):
    data = dict(raw.pop("data", {}) or {})
    for key in ("interactions", "content"):
        value = getattr(args, key, None)
        if value:
            data[key] = value
    if not data.get("interactions"):
        raise UsageError("no interactions file given (--interactions or config data.interactions)")
    return data


def _load(data, need_content):
    content = data.get("content") if need_content else None
    return load_dataset(data["interactions"], content, fmt=data.get("format", "csv"),
                        header=data.get("header", False), min_user=data.get("min_user", 5),
                        min_item=data.get("min_item", 5))


def cmd_train(args):
    started = time.time()
    raw = read_config(args.config)
    data = _data_options(args, raw)
    for flag, key in (("mode", "mode"), ("seed", "seed"), ("train_fraction", "train_fraction")):
        value = getattr(args, flag, None)
        if value is not None:
            raw[key] = value
    try:
        config = TrainConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad train config: {exc}") from None
    mode = ModelMode.parse(config.mode)
    if mode.uses_content and not data.get("content"):
        raise UsageError(f"mode {mode.value} needs a content file (--content)")

    split, vocab, table = _load(data, mode.uses_content)
    os.makedirs(args.out, exist_ok=True)
    hist_path = os.path.join(args.out, "history.jsonl")
    wall_ms = []
    with open(hist_path, "w", encoding="utf-8") as fh:
        def log_epoch(record):
            # timings go to the manifest so the history file is reproducible byte for byte
            record = dict(record)
            wall_ms.append(record.pop("wall_ms"))
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
        result = train(config, split, table, callback=log_epoch)

    ckpt = os.path.join(args.out, "checkpoint.tssr")
    echo = {"model": result.model_config.to_dict(), "train": config.to_dict(),
            "item_ids": list(vocab), "best_epoch": result.best_epoch, "diverged": result.diverged}
    save_checkpoint(ckpt, result.params, echo)
    write_manifest(args.out, "train", args, [args.config, data["interactions"], data.get("content")],
                   [ckpt, hist_path], started, train_fraction=config.train_fraction,
                   subsample_seed=config.seed, best_epoch=result.best_epoch, epoch_wall_ms=wall_ms)
    print(f"best epoch {result.best_epoch}: val NDCG@10 = {result.best_val_ndcg10:.4f}")
    return 1 if result.diverged else 0


# evaluate ----------------------------------------------------------------------------

def cmd_evaluate(args):
    started = time.time()
    raw = read_config(args.config)
    data = _data_options(args, raw)
    try:
        params, echo = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise UsageError(str(exc)) from None
    cfg = ModelConfig(**echo["model"])
    split, vocab, _ = _load(data, need_content=False)
    if list(vocab) != echo.get("item_ids"):
        raise UsageError("vocabulary of the data does not match the checkpoint")
    if split.n_items != cfg.n_items or params["M_id"].shape[1] != cfg.d:
        raise UsageError("checkpoint dimensions do not match the data")
    report = evaluate((params, cfg), split, diagnostics=args.diagnostics, part=args.part,
                      exclude_history=args.exclude_history, config=echo.get("train", {}))
    out = args.out
    if not out.endswith(".json"):
        os.makedirs(out, exist_ok=True)
        out = os.path.join(out, "report.json")
    write_json_atomic(out, report.to_dict())
    write_manifest(manifest_beside(out), "evaluate", args,
                   [args.checkpoint, data["interactions"]], [out], started)
    print(json.dumps({"recall": report.to_dict()["recall"], "ndcg": report.to_dict()["ndcg"]}))
    return 0


# gradcheck -------------------------------------------------------------------------------

GRADCHECK_DEFAULTS = dict(n_items=20, d=8, max_len=5, batch=4, n_heads=2, n_uni_layers=1,
                          n_multi_layers=1, dim_raw=6, tau=0.5, lambda1=1.0, lambda2=1.0,
                          lambda3=1.0, eps=1e-5, n_samples=64, tolerance=1e-4, init_std=0.5,
                          seed=0, mode="tssr")


def run_gradcheck(options=None):
    """Finite-difference check of every active loss and their weighted sum.

    Returns ``(passed, report)`` where ``report[loss][param]`` is the max
    relative error.
    """
    o = dict(GRADCHECK_DEFAULTS, **(options or {}))
    rng = np.random.default_rng(o["seed"])
    cfg = ModelConfig(n_items=o["n_items"], d=o["d"], max_len=o["max_len"], n_heads=o["n_heads"],
                      n_uni_layers=o["n_uni_layers"], n_multi_layers=o["n_multi_layers"], dropout=0.0,
                      dim_raw=o["dim_raw"], mode=o["mode"], init_std=o["init_std"])
    content = np.vstack([rng.normal(size=(o["n_items"], o["dim_raw"])), np.zeros((1, o["dim_raw"]))])
    params = init_params(cfg, content, seed=o["seed"] + 1, dtype=np.float64)
    # mixed lengths so the batch carries left padding
    lengths = [o["max_len"] + 1 - (r % 3) for r in range(o["batch"])]
    seqs = [list(rng.integers(0, o["n_items"], size=n)) for n in lengths]
    batch = build_batch(seqs, o["max_len"], cfg.pad)
    contrast = ContrastConfig(o["tau"], o["lambda1"], o["lambda2"], o["lambda3"])
    if cfg.mode is not ModelMode.TSSR:
        contrast = ContrastConfig(o["tau"], 0.0, 0.0, o["lambda3"])

    def losses(P):
        _, total, trace = compute_losses(batch, P, cfg, contrast)
        return _loss_tensors(batch, P, cfg, contrast, trace, total)

    report = nx.grad_check(losses, as_leaves(params), eps=o["eps"], n_samples=o["n_samples"],
                           seed=o["seed"])
    passed = all(err < o["tolerance"] for per in report.values() for err in per.values())
    return passed, report


def _loss_tensors(batch, P, cfg, contrast, trace, total):
    out = {}
    if contrast.lambda1 > 0:
        out["L_u"] = user_contrastive_loss(trace.F_id, trace.F_con, batch.mask, contrast.tau)
    if contrast.lambda2 > 0:
        out["L_i"] = item_contrastive_loss(trace.F_id, trace.F_con, trace.E_id_raw, trace.E_con_raw,
                                           batch.mask, contrast.tau)
    if contrast.lambda3 > 0:
        out["L_ce"] = autoregressive_ce_loss(score_items(trace.F, P, cfg.n_items), batch.target, batch.mask)
    out["total"] = total
    return out


def cmd_gradcheck(args):
    started = time.time()
    options = read_config(args.config)
    if args.seed is not None:
        options["seed"] = args.seed
    if args.mode is not None:
        options["mode"] = args.mode
    passed, report = run_gradcheck(options)
    tol = options.get("tolerance", GRADCHECK_DEFAULTS["tolerance"])
    for loss, per in report.items():
        worst = max(per, key=per.get)
        status = "PASS" if per[worst] < tol else "FAIL"
        print(f"{status} {loss}: max rel err {per[worst]:.3e} ({worst}) over {len(per)} tensors")
    print(f"{'PASS' if passed else 'FAIL'} gradcheck in {time.time() - started:.1f}s")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "gradcheck.json")
        write_json_atomic(path, {"passed": passed, "report": report})
    return 0 if passed else 1


# export ------------------------------------------------------------------------------------

def cmd_export_embeddings(args):
    started = time.time()
    try:
        params, echo = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise UsageError(str(exc)) from None
    cfg = ModelConfig(**echo["model"])
    item_ids = echo.get("item_ids") or [str(i) for i in range(cfg.n_items)]
    rows = {"id": params["M_id"][: cfg.n_items]}
    if "content_rows" in params:
        rows["con"] = params["content_rows"][: cfg.n_items] @ params["W_proj"]
    out = args.out
    if os.path.isdir(out):
        out = os.path.join(out, "embeddings.tsv")
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for i, item in enumerate(item_ids):
            for tag, table in rows.items():
                vec = table[i].astype(np.float32)
                fh.write(f"{item}\t{tag}\t" + " ".join(repr(float(v)) for v in vec) + "\n")
    write_manifest(manifest_beside(out), "export-embeddings", args, [args.checkpoint], [out], started)
    print(f"wrote {len(item_ids) * len(rows)} rows to {out}")
    return 0


# entry -------------------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="tssr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON config file; flags override its values")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--interactions")
    p.add_argument("--content")
    p.add_argument("--mode", choices=MODE_CHOICES)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="all-ranking evaluation of a checkpoint")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--interactions")
    p.add_argument("--content", help="accepted for symmetry; content rows live in the checkpoint")
    p.add_argument("--part", choices=["test", "validation"], default="test")
    p.add_argument("--diagnostics", action="store_true")
    p.add_argument("--exclude-history", dest="exclude_history", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on a tiny model")
    common(p)
    p.add_argument("--mode", choices=MODE_CHOICES)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-embeddings", help="write item embeddings per modality as TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tssr {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
