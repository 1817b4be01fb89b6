"""Command-line entry point.

Every command writes ``<out>/<timestamp>-<command>/`` holding ``config.json``,
``manifest.csv`` and an ``artifacts/`` directory.  Exit codes: 0 success,
1 usage error, 2 data or checkpoint error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data as D
from . import models as M
from .gradattr import gradient_x_input, integrated_gradients
from .infill import (
    FlipInfiller, KnockoffInfiller, KnockoffImage, SWEEP_HEADER, VaeInfiller, exchangeability_check,
    export_knockoffs, generate_knockoffs, knockoff_quality_sweep, write_pgm,
)
from .maskopt import OBJECTIVES, SDR, SSR, OptConfig, RejectedInputError, optimize_mask, oriented, to_saliency
from .metrics import (
    aggregate, baselines, ground_truth_box, saliency_box, score_boxes, write_metric_csv, write_report,
)
from .rng import Rng, default_seed
from .tensor import NumericError

log = logging.getLogger("knockoff_saliency")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COUNTERFACTUAL_THRESHOLDS = ("0.4", "0.5", "0.6")
GRADIENT_THRESHOLDS = ("mean", "0.0", "0.2")
EXPLAIN_HEADER = ["sample_id", "label", "method", "objective", "infill", "pgm", "json"]
TRAIN_LOG_HEADER = ["epoch", "loss", "metric"]
KO_STREAM = 0x4B0F
SWEEP_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(10))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# run directory and shared helpers


def make_run_dir(out: Path, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = Path(out) / f"{stamp}-{command}"
    k = 1
    while run.exists():
        run = Path(out) / f"{stamp}-{command}-{k}"
        k += 1
    (run / "artifacts").mkdir(parents=True)
    return run


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_config(run: Path, args, extra: dict | None = None) -> dict:
    cfg = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k != "func"}
    cfg.update(extra or {})
    (run / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return cfg


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def ckpt_path(args, kind: str, latent: int | None = None, dataset: str | None = None) -> Path:
    dataset = dataset or args.dataset
    name = {"classifier": f"classifier-{dataset}.ksc",
            "vae-infill": f"vae-infill-{dataset}.ksc",
            "vae-knockoff": f"vae-knockoff{latent}-{dataset}.ksc"}[kind]
    path = Path(args.ckpt_dir) / name
    if kind != "classifier" and not path.exists():
        # generators trained on full MNIST serve every subset
        full = Path(args.ckpt_dir) / name.replace(f"-{dataset}.ksc", "-full.ksc")
        if full.exists():
            return full
    return path


def require(paths) -> None:
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise FileNotFoundError("missing checkpoint(s): " + ", ".join(missing))


def explain_set(classifier, ds: D.Dataset, limit: int | None):
    """First ``limit`` correctly classified samples, with the number scanned."""
    pred = classifier.predict(ds.images)
    ok = np.flatnonzero(pred == ds.labels)
    chosen = ok if limit is None else ok[:limit]
    scanned = len(ds) if limit is None or len(chosen) < limit else int(chosen[-1]) + 1
    return chosen, scanned


def knockoffs_for(vae: M.Vae, images: np.ndarray, ids, seed: int, reencode_every: int = 1,
                  batch: int = 500) -> np.ndarray:
    """Knockoffs with one stream per sample id, independent of batching."""
    out = []
    ids = list(ids)
    for i in range(0, len(images), batch):
        rngs = [Rng(seed, KO_STREAM, int(s)) for s in ids[i:i + batch]]
        out.append(generate_knockoffs(vae, images[i:i + batch], rngs, reencode_every=reencode_every))
    return np.concatenate(out) if out else np.zeros((0, *images.shape[1:]), np.float32)


def saliency_to_u8(values: np.ndarray, gradient: bool) -> np.ndarray:
    scaled = 127.5 * (values + 1.0) if gradient else 255.0 * (values + 0.5)
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> Path:
    tr = D.load_variant(args.data_dir, args.dataset, "train")
    te = D.load_variant(args.data_dir, args.dataset, "test")
    run = make_run_dir(args.out, "train")
    kw = {k: v for k, v in (("lr", args.lr), ("batch", args.batch), ("epochs", args.epochs)) if v is not None}
    rows = []
    if args.kind == "classifier":
        model, rep = M.train_classifier(tr, te, seed=args.seed, classes=D.SUBSETS[args.dataset],
                                        on_epoch=lambda r: rows.append([r["epoch"], r["loss"], r["test_accuracy"]]),
                                        **kw)
        path = ckpt_path(args, "classifier")
        log.info("test accuracy %.4f", rep.test_accuracy)
    elif args.kind == "vae-infill":
        model, rep = M.train_vae_infiller(tr, latent=args.latent or 16, seed=args.seed,
                                          on_epoch=lambda r: rows.append([r["epoch"], r["neg_elbo"], ""]), **kw)
        path = ckpt_path(args, "vae-infill")
    else:
        latent = args.latent or 5
        model, rep = M.train_vae_knockoff(tr, latent=latent, seed=args.seed,
                                          on_epoch=lambda r: rows.append([r["epoch"], r["neg_elbo"], ""]), **kw)
        path = ckpt_path(args, "vae-knockoff", latent)
    M.save_checkpoint(model, path, rep.as_dict())
    _write_csv(run / "artifacts" / "train_log.csv", TRAIN_LOG_HEADER, rows)
    _write_csv(run / "manifest.csv", ["kind", "checkpoint", "test_accuracy"],
               [[args.kind, str(path), "" if rep.test_accuracy is None else rep.test_accuracy]])
    write_config(run, args, {"checkpoint": str(path)})
    print(path)
    return run


# ---------------------------------------------------------------------------
# explain

_WORKER: dict = {}


def _init_worker(state: dict) -> None:
    _WORKER.clear()
    _WORKER.update(state)
    _WORKER["classifier"] = M.load_checkpoint(state["classifier_path"], "classifier")
    if state.get("vae_path"):
        _WORKER["vae"] = M.load_checkpoint(state["vae_path"], "vae")


def _explain_one(task) -> dict:
    sid, x, label, knockoff = task
    w = _WORKER
    clf = w["classifier"]
    if w["method"] == "ig":
        gmap = integrated_gradients(clf, x, label, steps=w["ig_steps"], sample_id=sid)
        return {"sample_id": sid, "values": gmap.values, "raw": gmap.raw, "final_loss": None}
    if w["method"] == "ixg":
        gmap = gradient_x_input(clf, x, label, sample_id=sid)
        return {"sample_id": sid, "values": gmap.values, "raw": gmap.raw, "final_loss": None}
    infill = w["infill"]
    filler = (FlipInfiller() if infill == "flip" else VaeInfiller(w["vae"]) if infill == "vae"
              else KnockoffInfiller(knockoff))
    cfg = OptConfig(**w["opt"])
    params = optimize_mask(clf, filler, x, label, w["objective"], cfg, rng=Rng(cfg.seed, sid), sample_id=sid)
    return {"sample_id": sid, "values": to_saliency(params).values, "theta": params.theta,
            "final_loss": params.final_loss}


def cmd_explain(args) -> Path:
    clf_path = Path(args.classifier) if args.classifier else ckpt_path(args, "classifier")
    vae_path = None
    if args.method == "mask" and args.infill == "vae":
        vae_path = Path(args.vae) if args.vae else ckpt_path(args, "vae-infill")
    if args.method == "mask" and args.infill == "knockoff":
        vae_path = Path(args.vae) if args.vae else ckpt_path(args, "vae-knockoff", args.latent)
    require([p for p in (clf_path, vae_path) if p is not None])
    ds = D.load_variant(args.data_dir, args.dataset, args.split)
    clf = M.load_checkpoint(clf_path, "classifier")
    ids, scanned = explain_set(clf, ds, args.limit)
    opt = OptConfig.for_dataset(args.dataset, lr=args.lr, sparsity=args.sparsity, tv_weight=args.tv,
                                batch_masks=args.batch_masks, iterations=args.iterations,
                                temperature=args.temperature, seed=args.seed, paper_signs=args.paper_signs,
                                parameterization=args.parameterization)
    run = make_run_dir(args.out, "explain")
    art = run / "artifacts"
    knockoffs = [None] * len(ids)
    if args.method == "mask" and args.infill == "knockoff":
        vae = M.load_checkpoint(vae_path, "vae")
        kos = knockoffs_for(vae, ds.images[ids], ids, args.seed, args.reencode_every)
        export_knockoffs([KnockoffImage(k, int(s), vae.latent, args.seed) for k, s in zip(kos, ids)], art)
        knockoffs = list(kos)
    method_tag = args.infill if args.method == "mask" else args.method
    state = {"classifier_path": str(clf_path), "vae_path": None if vae_path is None else str(vae_path),
             "method": args.method, "infill": args.infill, "objective": args.objective,
             "opt": opt.as_dict(), "ig_steps": args.ig_steps}
    tasks = [(int(s), ds.images[s], int(ds.labels[s]), k) for s, k in zip(ids, knockoffs)]
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(args.jobs, initializer=_init_worker, initargs=(state,)) as pool:
            results = list(pool.map(_explain_one, tasks, chunksize=max(1, len(tasks) // (4 * args.jobs))))
    else:
        _init_worker(state)
        results = []
        for i, t in enumerate(tasks):
            results.append(_explain_one(t))
            log.info("explained %d/%d (sample %d)", i + 1, len(tasks), t[0])
    rows = []
    gradient = args.method != "mask"
    objective = args.objective if args.method == "mask" else "-"
    for (sid, _, label, _), res in zip(tasks, results):
        stem = f"{sid:05d}-{method_tag}-{objective}"
        write_pgm(art / f"{stem}.pgm", saliency_to_u8(res["values"], gradient))
        side = {"sample_id": sid, "label": label, "method": method_tag, "objective": objective,
                "infill": args.infill if args.method == "mask" else None,
                "config": opt.as_dict() if args.method == "mask" else {"ig_steps": args.ig_steps},
                "final_loss": res["final_loss"], "values": np.asarray(res["values"], np.float32).tolist()}
        if "theta" in res:
            side["theta"] = np.asarray(res["theta"], np.float32).tolist()
        (art / f"{stem}.json").write_text(json.dumps(side, sort_keys=True) + "\n")
        rows.append([sid, label, method_tag, objective, side["infill"] or "", f"artifacts/{stem}.pgm",
                     f"artifacts/{stem}.json"])
    _write_csv(run / "manifest.csv", EXPLAIN_HEADER, rows)
    write_config(run, args, {"classifier_checkpoint": str(clf_path),
                             "generator_checkpoint": None if vae_path is None else str(vae_path),
                             "opt": opt.as_dict(), "explained": len(ids), "scanned": scanned,
                             "rejected_misclassified": scanned - len(ids)})
    log.info("explained %d correctly classified samples out of %d scanned", len(ids), scanned)
    print(run)
    return run


# ---------------------------------------------------------------------------
# evaluate


def parse_thresholds(spec: str | None, gradient: bool) -> list[str]:
    if spec is None:
        return list(GRADIENT_THRESHOLDS if gradient else COUNTERFACTUAL_THRESHOLDS)
    out = []
    for tok in spec.split(","):
        tok = tok.strip()
        if tok == "mean":
            if not gradient:
                raise UsageError("threshold 'mean' applies to gradient maps only")
            out.append(tok)
            continue
        try:
            v = float(tok)
        except ValueError:
            raise UsageError(f"bad threshold {tok!r}") from None
        lo, hi = (-1.0, 1.0) if gradient else (0.0, 1.0)
        if not lo <= v <= hi:
            raise UsageError(f"threshold {v} outside [{lo}, {hi}] for {'gradient' if gradient else 'counterfactual'} maps")
        out.append(tok)
    return out


def threshold_value(values: np.ndarray, tok: str) -> float:
    return float(values.mean()) if tok == "mean" else float(tok)


def cmd_evaluate(args) -> Path:
    src = Path(args.run)
    manifest = src / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    src_cfg = json.loads((src / "config.json").read_text())
    with open(manifest, newline="") as fh:
        entries = list(csv.DictReader(fh))
    if not entries:
        raise D.EmptyDatasetError(f"{manifest} lists no samples")
    gradient = entries[0]["method"] in ("ig", "ixg")
    thresholds = parse_thresholds(args.thresholds, gradient)
    dataset = src_cfg.get("dataset", args.dataset)
    clf_path = Path(args.classifier or src_cfg.get("classifier_checkpoint") or ckpt_path(args, "classifier", dataset=dataset))
    require([clf_path])
    clf = M.load_checkpoint(clf_path, "classifier")
    ds = D.load_variant(args.data_dir, dataset, src_cfg.get("split", "test"))
    ids = np.array([int(e["sample_id"]) for e in entries])
    images, labels = ds.images[ids], ds.labels[ids]
    if not np.array_equal(labels, [int(e["label"]) for e in entries]):
        raise D.DataError("manifest labels do not match the dataset; wrong --data-dir or --dataset?")
    maps = []
    for e in entries:
        side = json.loads((src / e["json"]).read_text())
        vals = np.asarray(side["values"], np.float64)
        # counterfactual maps store oriented(theta) - 0.5; thresholds apply to oriented theta
        maps.append(vals if gradient else vals + 0.5)
    gts = [ground_truth_box(x) for x in images]
    records = []
    for tok in thresholds:
        boxes = [saliency_box(m, threshold_value(m, tok)) for m in maps]
        records += score_boxes(clf, images, labels, boxes, gts, entries[0]["method"], entries[0]["objective"],
                               tok, ids, mode=args.interpolation)
    records += baselines(clf, images, labels, ids)
    rows = aggregate(records)
    run = make_run_dir(args.out, "evaluate")
    write_metric_csv(rows, run / "artifacts" / "metrics.csv")
    write_report(rows, records, run / "artifacts" / "report.json")
    _write_csv(run / "manifest.csv", ["artifact"], [["artifacts/metrics.csv"], ["artifacts/report.json"]])
    write_config(run, args, {"source_run": str(src), "thresholds_used": thresholds,
                             "classifier_checkpoint": str(clf_path)})
    for r in rows:
        if r.cls == "all":
            print(f"{r.method:8s} {r.objective:4s} thr={r.threshold:5s} SM={r.sm:+.3f} WSL={r.wsl:6.2f} n={r.count}")
    print(run)
    return run


# ---------------------------------------------------------------------------
# sweep / knockoffs / diagnose


def _load_eval_images(args, classifier=None):
    ds = D.load_variant(args.data_dir, args.dataset, args.split)
    n = len(ds) if args.limit is None else min(args.limit, len(ds))
    return ds.take(n)


def cmd_sweep(args) -> Path:
    methods = [m.strip() for m in args.methods.split(",")]
    unknown = set(methods) - {"flip", "vae", "knockoff5", "knockoff16"}
    if unknown:
        raise UsageError(f"unknown sweep method(s): {', '.join(sorted(unknown))}")
    clf_path = ckpt_path(args, "classifier")
    paths = {"classifier": clf_path}
    if "vae" in methods:
        paths["vae"] = ckpt_path(args, "vae-infill")
    for k in (5, 16):
        if f"knockoff{k}" in methods:
            paths[f"knockoff{k}"] = ckpt_path(args, "vae-knockoff", k)
    require(paths.values())
    clf = M.load_checkpoint(clf_path, "classifier")
    ds = _load_eval_images(args)
    ids = np.arange(len(ds))
    run = make_run_dir(args.out, "sweep")
    refs = {}
    for m in methods:
        if m == "flip":
            refs[m] = lambda im, mk, r: np.zeros_like(im)
        elif m == "vae":
            vae = M.load_checkpoint(paths["vae"], "vae")
            refs[m] = lambda im, mk, r, vae=vae: vae.reconstruct(im * mk, rng=r)
        else:
            vae = M.load_checkpoint(paths[m], "vae")
            cache = run / "artifacts" / f"{m}.npy"
            kos = knockoffs_for(vae, ds.images, ids, args.seed, args.reencode_every)
            np.save(cache, kos)
            refs[m] = lambda im, mk, r, kos=kos: kos
    fractions = [float(f) for f in args.fractions.split(",")] if args.fractions else list(SWEEP_FRACTIONS)
    rows = knockoff_quality_sweep(clf, refs, ds.images, ds.labels, fractions, seed=args.seed)
    _write_csv(run / "artifacts" / "sweep.csv", SWEEP_HEADER,
               [[r["method"], r["fraction"], f"{r['ms_ssim']:.6f}", f"{r['target_probability']:.6f}"] for r in rows])
    _write_csv(run / "manifest.csv", ["artifact"], [["artifacts/sweep.csv"]])
    write_config(run, args, {"checkpoints": {k: str(v) for k, v in paths.items()}, "fractions": fractions})
    print(run)
    return run


def cmd_knockoffs(args) -> Path:
    path = Path(args.vae) if args.vae else ckpt_path(args, "vae-knockoff", args.latent)
    require([path])
    vae = M.load_checkpoint(path, "vae")
    ds = _load_eval_images(args)
    ids = np.arange(len(ds))
    run = make_run_dir(args.out, "knockoffs")
    kos = knockoffs_for(vae, ds.images, ids, args.seed, args.reencode_every)
    export_knockoffs([KnockoffImage(k, int(s), vae.latent, args.seed) for k, s in zip(kos, ids)], run / "artifacts")
    _write_csv(run / "manifest.csv", ["artifact"], [["artifacts/knockoffs.csv"], ["artifacts/knockoffs.npy"]])
    write_config(run, args, {"generator_checkpoint": str(path)})
    print(run)
    return run


def cmd_diagnose(args) -> Path:
    ds = _load_eval_images(args)
    if args.knockoffs:
        kos = np.load(args.knockoffs)
        if len(kos) < len(ds):
            raise D.CountMismatchError(f"{args.knockoffs} holds {len(kos)} knockoffs, need {len(ds)}")
        kos = kos[:len(ds)]
        gen = args.knockoffs
    else:
        path = Path(args.vae) if args.vae else ckpt_path(args, "vae-knockoff", args.latent)
        require([path])
        kos = knockoffs_for(M.load_checkpoint(path, "vae"), ds.images, np.arange(len(ds)), args.seed,
                            args.reencode_every)
        gen = str(path)
    res = exchangeability_check(ds.images, kos, Rng(args.seed, 0xD1A6), n_pairs=args.pairs, n_boot=args.boot)
    run = make_run_dir(args.out, "diagnose")
    report = {"pass_rate": res.pass_rate, "pairs": res.pairs.tolist(), "z_scores": res.z_scores.tolist(),
              "passed": res.passed.tolist(), "tolerance": res.tolerance, "samples": len(ds)}
    (run / "artifacts" / "exchangeability.json").write_text(json.dumps(report, indent=1) + "\n")
    _write_csv(run / "manifest.csv", ["artifact"], [["artifacts/exchangeability.json"]])
    write_config(run, args, {"generator": gen})
    print(f"exchangeability surrogate: {100 * res.pass_rate:.1f}% of {len(res.passed)} pixel pairs within "
          f"{res.tolerance:g} bootstrap SE")
    print(run)
    return run


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="knockoff-saliency", description="Counterfactual saliency maps with knockoff in-filling.")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, limit=None):
        sp.add_argument("--data-dir", type=Path, default=Path(os.environ.get("KS_DATA_DIR", "data/mnist")))
        sp.add_argument("--ckpt-dir", type=Path, default=Path(os.environ.get("KS_CKPT_DIR", "checkpoints")))
        sp.add_argument("--out", type=Path, default=Path("runs"))
        sp.add_argument("--seed", type=int, default=None, help="default: $KS_SEED or 0")
        sp.add_argument("--dataset", choices=sorted(D.SUBSETS), default="full")
        sp.add_argument("--split", choices=("train", "test"), default="test")
        sp.add_argument("--limit", type=int, default=limit)
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--latent", type=int, choices=(5, 16), default=None)
        sp.add_argument("--reencode-every", type=int, default=1,
                        help="knockoff generation: refresh the latent every k pixels")

    t = sub.add_parser("train", help="train a classifier or VAE")
    common(t)
    t.add_argument("--kind", choices=("classifier", "vae-infill", "vae-knockoff"), required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("explain", help="saliency maps for correctly classified samples")
    common(e)
    e.add_argument("--method", choices=("mask", "ig", "ixg"), default="mask")
    e.add_argument("--objective", choices=OBJECTIVES, default=SSR)
    e.add_argument("--infill", choices=("flip", "vae", "knockoff"), default="flip")
    e.add_argument("--iterations", type=int)
    e.add_argument("--lr", type=float)
    e.add_argument("--lambda", dest="sparsity", type=float)
    e.add_argument("--tv", type=float)
    e.add_argument("--batch-masks", type=int)
    e.add_argument("--temperature", type=float)
    e.add_argument("--paper-signs", action="store_true", help="score term signs exactly as printed")
    e.add_argument("--parameterization", choices=("direct", "logit"), default=None)
    e.add_argument("--ig-steps", type=int, default=50)
    e.add_argument("--classifier", help="classifier checkpoint (overrides --ckpt-dir naming)")
    e.add_argument("--vae", help="generator checkpoint (overrides --ckpt-dir naming)")
    e.set_defaults(func=cmd_explain)

    v = sub.add_parser("evaluate", help="SM / WSL tables for an explain run")
    common(v)
    v.add_argument("--run", required=True, help="explain run directory")
    v.add_argument("--thresholds", help="comma list; default 0.4,0.5,0.6 or mean,0.0,0.2 for gradient maps")
    v.add_argument("--interpolation", choices=("bilinear", "nearest"), default="bilinear")
    v.add_argument("--classifier")
    v.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="MS-SSIM vs target probability under random corruption")
    common(s, limit=500)
    s.add_argument("--methods", default="flip,vae,knockoff5,knockoff16")
    s.add_argument("--fractions")
    s.set_defaults(func=cmd_sweep)

    k = sub.add_parser("knockoffs", help="generate and export knockoff images")
    common(k)
    k.add_argument("--vae")
    k.set_defaults(func=cmd_knockoffs)

    d = sub.add_parser("diagnose", help="covariance-swap exchangeability surrogate")
    common(d, limit=1000)
    d.add_argument("--vae")
    d.add_argument("--knockoffs", help="reuse knockoffs.npy instead of generating")
    d.add_argument("--pairs", type=int, default=200)
    d.add_argument("--boot", type=int, default=200)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.seed is None:
        args.seed = default_seed(0)
    if getattr(args, "latent", None) is None and args.command in ("explain", "knockoffs", "diagnose"):
        args.latent = 5
    if args.jobs < 1 or (args.limit is not None and args.limit < 1):
        print("error: --jobs and --limit must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, D.DataError, M.CheckpointError, RejectedInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, M.TrainingDivergedError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
