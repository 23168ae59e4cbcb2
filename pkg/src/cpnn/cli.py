"""Command-line entry point: ``cpnn <subcommand> [options]``."""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (
    CountMatrix,
    DataError,
    align_genes,
    build_samples,
    fmt_float,
    read_annotations,
    read_dense_counts,
    read_features_dir,
    read_sparse_counts,
    read_split_groups,
    read_splits,
    write_splits,
)
from .deconv import DeconvConfig, ProportionMatrix, deconvolve, read_proportions, write_proportions
from .metrics import evaluate
from .model import Ablation, compute_weights, forward_patch, forward_slide, load_checkpoint, save_checkpoint
from .optim import NonFiniteGradientError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("cpnn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- helpers


def _read_counts(path, rows=None, genes=None) -> CountMatrix:
    path = Path(path)
    if path.suffix == ".mtx":
        stem = path.with_suffix("")
        rows = rows or f"{stem}_rows.txt"
        genes = genes or f"{stem}_genes.txt"
        return read_sparse_counts(path, rows, genes)
    return read_dense_counts(path)


def _write_run_info(out_dir, command, args, no_timestamp, extra=None):
    doc = {"command": command, "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"}}
    if extra:
        doc.update(extra)
    if not no_timestamp:
        doc["created"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    Path(out_dir, "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _write_matrix(path, header, row_ids, values):
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for rid, row in zip(row_ids, values):
            fh.write(str(rid) + "," + ",".join(fmt_float(v) for v in row) + "\n")


def _read_float_matrix(path):
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln]
    if len(lines) < 2:
        raise DataError(f"{path}: no data rows")
    header = lines[0].split(",")
    rows, vals = [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(header):
            raise DataError(f"{path}: ragged row {parts[0]!r}")
        rows.append(parts[0])
        try:
            vals.append([float(x) for x in parts[1:]])
        except ValueError as exc:
            raise DataError(f"{path}: row {parts[0]!r}: {exc}") from None
    return header[1:], rows, np.array(vals)


def _load_prototypes(path, genes=None):
    from .prototype import normalize_prototype, read_prototypes

    pm = read_prototypes(path)
    if not pm.normalized:
        pm = normalize_prototype(pm)
    if genes is not None and tuple(genes) != tuple(pm.gene_ids):
        missing = set(genes) - set(pm.gene_ids)
        if missing:
            raise DataError(f"prototype file lacks gene {sorted(missing)[0]!r}")
        pm = normalize_prototype(pm.select_genes(list(genes)))
    return pm


def _train_config(args):
    from .training import TrainConfig

    doc = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    overrides = {
        "lr": args.lr, "epochs": args.epochs, "batch_size": args.batch_size, "lam": args.lam,
        "patience": args.patience, "folds": args.folds, "validation_count": args.validation_count,
        "hidden": args.hidden,
    }
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    if args.flags is not None:
        doc["flags"] = args.flags
    doc["seed"] = args.seed
    try:
        return TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None


def _cv_plan(args, ids, cfg):
    from .training import make_folds

    if args.splits:
        return read_splits(args.splits)
    groups = None
    if args.patients:
        table = read_split_groups(args.patients)
        if table is None:
            raise DataError(f"{args.patients}: no patient column")
        groups = [table[s] for s in ids]
    return make_folds(ids, cfg.folds, cfg.seed, groups)


# ---------------------------------------------------------------- subcommands


def cmd_synth(args):
    from .synth import SynthConfig, generate, write_dataset

    doc = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        cfg = SynthConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth configuration: {exc}") from None
    ds = generate(cfg, spatial=args.spatial)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds.slides)} slides and {ds.sc.shape[0]} cells to {args.out}")


def cmd_fit_prototypes(args):
    from .prototype import FitConfig, fit_prototypes, write_fit_sidecar, write_prototypes

    sc = _read_counts(args.sc, args.sc_rows, args.sc_genes)
    ann = read_annotations(args.annotations, sc.row_ids)
    if args.bulk:
        bulk = read_dense_counts(args.bulk)
        sc, _ = align_genes(sc, bulk)
    cfg = FitConfig(lr=args.lr, epochs=args.epochs)
    raw, nuisance, disp, norm = fit_prototypes(sc, ann, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_prototypes(norm, out / "prototypes.csv")
    write_prototypes(raw, out / "prototypes_raw.csv")
    write_fit_sidecar(out / "fit.json", nuisance, disp, sc.gene_ids, ann.batch_names)
    _write_run_info(out, "fit-prototypes", args, args.no_timestamp)
    print(f"prototypes: {norm.values.shape[0]} types x {norm.values.shape[1]} genes -> {out}")


def cmd_deconvolve(args):
    from .prototype import read_dispersion

    bulk = read_dense_counts(args.bulk)
    disp, disp_genes = read_dispersion(args.fit)
    pm = _load_prototypes(args.prototypes)
    shared = sorted(set(bulk.gene_ids) & set(pm.gene_ids))
    if not shared:
        raise DataError("bulk counts and prototypes share no genes")
    bulk = bulk.select_genes(shared)
    pm = _load_prototypes(args.prototypes, shared)
    index = {g: j for j, g in enumerate(disp_genes)}
    missing = [g for g in bulk.gene_ids if g not in index]
    if missing:
        raise DataError(f"no dispersion for gene {missing[0]!r}")
    theta = disp.theta_sc[[index[g] for g in bulk.gene_ids]]
    props = deconvolve(bulk, pm, theta, DeconvConfig(lr=args.lr, steps=args.steps))
    write_proportions(props, args.out)
    print(f"proportions for {len(props.row_ids)} samples -> {args.out}")


def _slide_inputs(args):
    bulk = read_dense_counts(args.bulk)
    pm = _load_prototypes(args.prototypes)
    missing = set(pm.gene_ids) - set(bulk.gene_ids)
    if missing:
        raise DataError(f"bulk counts lack prototype gene {sorted(missing)[0]!r}")
    bulk = bulk.select_genes(list(pm.gene_ids))
    feats = read_features_dir(args.features)
    return build_samples(bulk, feats), pm


def cmd_train_slide(args):
    from .training import run_cv, train_slide

    cfg = _train_config(args)
    samples, pm = _slide_inputs(args)
    Wref = None
    if cfg.loss_config().lam > 0:
        if not args.reference:
            raise UsageError("--reference is required unless the regulariser is disabled")
        Wref = read_proportions(args.reference)
        if tuple(Wref.cell_type_names) != tuple(pm.cell_type_names):
            raise DataError("reference proportions and prototypes list different cell types")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_doc = cfg.to_dict()
    (out / "config.json").write_text(json.dumps(cfg_doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    if args.no_cv:
        params, hist = train_slide(samples, pm, Wref, cfg)
        save_checkpoint(params, out / "model.json", {"mode": "slide"})
        hist.write_csv(out / "history.csv")
        _write_run_info(out, "train-slide", args, args.no_timestamp)
        print(f"best_epoch={hist.best_epoch} val_loss={fmt_float(hist.best_val_loss)}")
        return

    ids = [s.slide_id for s in samples]
    plan = _cv_plan(args, ids, cfg)
    write_splits(plan, out / "splits.csv")
    res = run_cv(samples, cfg, "slide", pm, Wref, plan=plan, n_jobs=args.jobs)
    _write_cv_outputs(out, res, pm, samples)
    _write_run_info(out, "train-slide", args, args.no_timestamp, {"aggregate": res.aggregate})


def _write_cv_outputs(out, res, pm, samples, spot_ids=None):
    pred_rows, pred_vals, w_rows, w_vals = [], [], [], []
    with (out / "cv_metrics.csv").open("w", encoding="utf-8") as fh:
        fh.write("fold,n_test,mean_pcc,mean_scc,n_genes,best_epoch\n")
        for f in res.folds:
            fdir = out / f"fold{f.fold}"
            fdir.mkdir(exist_ok=True)
            save_checkpoint(f.params, fdir / "model.json", {"fold": f.fold})
            f.history.write_csv(fdir / "history.csv")
            (fdir / "validation.txt").write_text("".join(f"{v}\n" for v in f.history.validation_ids), encoding="utf-8")
            f.report.write_csv(fdir / "metrics.csv")
            fh.write(f"{f.fold},{len(f.test_ids)},{fmt_float(f.report.mean_pcc)},{fmt_float(f.report.mean_scc)},"
                     f"{f.report.n_genes_evaluated},{f.history.best_epoch}\n")
            if spot_ids is None:
                pred_rows += f.test_ids
                w_rows += f.test_ids
            else:
                rows = [f"{sid}:{p}" for sid in f.test_ids for p in spot_ids[sid]]
                pred_rows += rows
                w_rows += rows
            pred_vals.append(f.predictions)
            w_vals.append(f.mean_weights)
    _write_matrix(out / "predictions.csv", ["id", *pm.gene_ids], pred_rows, np.concatenate(pred_vals))
    _write_matrix(out / "weights.csv", ["slide_id" if spot_ids is None else "spot_id", *pm.cell_type_names],
                  w_rows, np.concatenate(w_vals))
    agg = res.aggregate
    print(f"mean_pcc={fmt_float(agg['mean_pcc'])} std_pcc={fmt_float(agg['std_pcc'])} "
          f"mean_scc={fmt_float(agg['mean_scc'])} std_scc={fmt_float(agg['std_scc'])}")


def cmd_train_patch(args):
    from .training import SpatialSample, run_cv, train_patch

    cfg = _train_config(args)
    if args.patch_lambda is not None:
        cfg.patch_lambda = args.patch_lambda
    cfg.patch_log1p = not args.no_log1p
    pm = _load_prototypes(args.prototypes)
    feats = read_features_dir(args.features)
    samples = []
    for sid, fs in feats.items():
        path = Path(args.spots) / f"{sid}.csv"
        if not path.exists():
            raise DataError(f"no spot counts for slide {sid!r}")
        spots = read_dense_counts(path)
        if tuple(spots.row_ids) != tuple(fs.patch_ids):
            raise DataError(f"slide {sid}: spot ids do not match patch ids")
        missing = set(pm.gene_ids) - set(spots.gene_ids)
        if missing:
            raise DataError(f"slide {sid}: spot counts lack gene {sorted(missing)[0]!r}")
        samples.append(SpatialSample(sid, fs, spots.select_genes(list(pm.gene_ids))))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if args.no_cv:
        params, hist = train_patch(samples, pm, cfg)
        save_checkpoint(params, out / "model.json", {"mode": "patch"})
        hist.write_csv(out / "history.csv")
        _write_run_info(out, "train-patch", args, args.no_timestamp)
        print(f"best_epoch={hist.best_epoch} val_loss={fmt_float(hist.best_val_loss)}")
        return
    if args.folds is None and not args.config and not args.splits:
        cfg.folds = len(samples)  # leave-one-slide-out by default
    ids = [s.slide_id for s in samples]
    plan = _cv_plan(args, ids, cfg)
    write_splits(plan, out / "splits.csv")
    res = run_cv(samples, cfg, "patch", pm, plan=plan, n_jobs=args.jobs)
    _write_cv_outputs(out, res, pm, samples, spot_ids={s.slide_id: s.features.patch_ids for s in samples})
    _write_run_info(out, "train-patch", args, args.no_timestamp, {"aggregate": res.aggregate})


def cmd_predict(args):
    params = load_checkpoint(args.model)
    feats = read_features_dir(args.features)
    if args.patch:
        rows, vals = [], []
        for sid, fs in feats.items():
            rows += [f"{sid}:{p}" for p in fs.patch_ids]
            vals.append(forward_patch(params, fs))
        _write_matrix(args.out, ["id", *params.gene_ids], rows, np.concatenate(vals))
        return
    if args.bulk:
        lib = dict(zip(*_library_sizes(args.bulk)))
    else:
        lib = {}
    rows, vals = [], []
    for sid, fs in feats.items():
        l = lib.get(sid, args.library_size)
        if l is None:
            raise DataError(f"no library size for slide {sid!r}; pass --bulk or --library-size")
        rows.append(sid)
        vals.append(forward_slide(params, fs, l).mu_bar)
    _write_matrix(args.out, ["id", *params.gene_ids], rows, np.array(vals))
    print(f"predictions for {len(rows)} slides -> {args.out}")


def _library_sizes(path):
    cm = read_dense_counts(path)
    return list(cm.row_ids), [int(v) for v in cm.values.sum(axis=1)]


def cmd_evaluate(args):
    genes, rows, pred = _read_float_matrix(args.pred)
    truth = read_dense_counts(args.truth)
    index = {r: i for i, r in enumerate(truth.row_ids)}
    missing = [r for r in rows if r not in index]
    if missing:
        raise DataError(f"no observed counts for {missing[0]!r}")
    gidx = {g: j for j, g in enumerate(truth.gene_ids)}
    absent = [g for g in genes if g not in gidx]
    if absent:
        raise DataError(f"observed counts lack gene {absent[0]!r}")
    obs = truth.values[[index[r] for r in rows]][:, [gidx[g] for g in genes]]
    report = evaluate(pred, obs, gene_ids=genes, axis=args.axis, log1p=args.log1p)
    report.write_csv(args.out)
    print(report.summary_line())


def cmd_gradcheck(args):
    from .gradcheck import run_gradchecks

    rep = run_gradchecks(args.seed, args.n_seeds, args.tol)
    print(rep.line())
    if not rep.passed:
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_export_weights(args):
    params = load_checkpoint(args.model)
    feats = read_features_dir(args.features)
    rows, vals = [], []
    for sid, fs in feats.items():
        if fs.dim != params.dims["D"]:
            raise DataError(f"slide {sid}: feature dimension {fs.dim} != checkpoint {params.dims['D']}")
        rows.append(sid)
        vals.append(compute_weights(params.head, fs).mean(axis=0))
    W = np.array(vals)
    W /= W.sum(axis=1, keepdims=True)
    write_proportions(ProportionMatrix(W, rows, params.cell_type_names), args.out)
    print(f"mean weights for {len(rows)} slides -> {args.out}")


# ---------------------------------------------------------------- parser


def _add_train_flags(p):
    p.add_argument("--seed", type=int, required=True, help="random seed (required)")
    p.add_argument("--config", help="JSON file with training settings; flags below override it")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-3)")
    p.add_argument("--epochs", type=int, help="maximum epochs (default 500)")
    p.add_argument("--batch-size", type=int, help="slides per mini-batch (default 16)")
    p.add_argument("--lambda", dest="lam", type=float, help="regulariser weight (default 1e3)")
    p.add_argument("--patience", type=int, help="early-stopping patience in epochs (default 20)")
    p.add_argument("--folds", type=int, help="cross-validation folds (default 4; slides for train-patch)")
    p.add_argument("--validation-count", type=int, help="validation slides per fold (default 30, clipped to 20%%)")
    p.add_argument("--hidden", type=int, help="hidden width of the weight head (default: feature dim)")
    p.add_argument("--flags", help="enabled components, e.g. PI,MC,U,R (default) or none")
    p.add_argument("--splits", help="CSV slide_id,fold to use instead of seeded folds")
    p.add_argument("--patients", help="CSV with slide_id,patient; folds group slides by patient")
    p.add_argument("--no-cv", action="store_true", help="train a single model on all slides")
    p.add_argument("--jobs", type=int, default=1, help="parallel fold workers (default 1)")
    p.add_argument("--no-timestamp", action="store_true", help="omit the timestamp from run.json")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cpnn", description="Cell-type prototype network pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="<command>")

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--config", help="JSON file with generator settings (default: built-in)")
    p.add_argument("--seed", type=int, help="override the generator seed")
    p.add_argument("--spatial", action="store_true", help="also write per-spot counts")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-prototypes", help="fit cell-type prototypes from single-cell counts")
    p.add_argument("--sc", required=True, help="counts: .mtx (with _rows.txt/_genes.txt) or dense CSV")
    p.add_argument("--sc-rows", help="row id file for .mtx input (default <stem>_rows.txt)")
    p.add_argument("--sc-genes", help="gene id file for .mtx input (default <stem>_genes.txt)")
    p.add_argument("--annotations", required=True, help="CSV cell_id,cell_type,batch")
    p.add_argument("--bulk", help="bulk CSV; restricts genes to those shared with it")
    p.add_argument("--lr", type=float, default=1e-2, help="learning rate (default 1e-2)")
    p.add_argument("--epochs", type=int, default=300, help="full-batch epochs (default 300)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-timestamp", action="store_true", help="omit the timestamp from run.json")
    p.set_defaults(func=cmd_fit_prototypes)

    p = sub.add_parser("deconvolve", help="estimate cell-type proportions of bulk samples")
    p.add_argument("--bulk", required=True, help="bulk counts CSV")
    p.add_argument("--prototypes", required=True, help="prototype CSV")
    p.add_argument("--fit", required=True, help="fit.json with per-gene dispersion")
    p.add_argument("--lr", type=float, default=1e-2, help="learning rate (default 1e-2)")
    p.add_argument("--steps", type=int, default=500, help="optimisation steps (default 500)")
    p.add_argument("--out", required=True, help="output CSV slide_id,<types>")
    p.set_defaults(func=cmd_deconvolve)

    p = sub.add_parser("train-slide", help="train on bulk counts (cross-validated by default)")
    p.add_argument("--bulk", required=True, help="bulk counts CSV")
    p.add_argument("--features", required=True, help="directory of per-slide feature CSVs")
    p.add_argument("--prototypes", required=True, help="prototype CSV")
    p.add_argument("--reference", help="reference proportions CSV (needed when the regulariser is on)")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_slide)

    p = sub.add_parser("train-patch", help="train on spot counts (leave-one-slide-out by default)")
    p.add_argument("--features", required=True, help="directory of per-slide feature CSVs")
    p.add_argument("--spots", required=True, help="directory of per-slide spot count CSVs")
    p.add_argument("--prototypes", required=True, help="prototype CSV")
    p.add_argument("--patch-lambda", type=float, help="prototype drift weight (default 1.0)")
    p.add_argument("--no-log1p", action="store_true", help="correlate raw rather than log1p values")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_patch)

    p = sub.add_parser("predict", help="predict expression from a checkpoint")
    p.add_argument("--model", required=True, help="checkpoint JSON")
    p.add_argument("--features", required=True, help="directory of per-slide feature CSVs")
    p.add_argument("--bulk", help="bulk CSV supplying per-slide total counts")
    p.add_argument("--library-size", type=float, help="total count for slides missing from --bulk")
    p.add_argument("--patch", action="store_true", help="per-patch predictions instead of per slide")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="per-gene PCC/SCC of predictions against counts")
    p.add_argument("--pred", required=True, help="predictions CSV")
    p.add_argument("--truth", required=True, help="observed counts CSV")
    p.add_argument("--axis", choices=("gene", "sample"), default="gene", help="correlation axis (default gene)")
    p.add_argument("--log1p", action="store_true", help="correlate log1p values")
    p.add_argument("--out", default="metrics.csv", help="output CSV gene,pcc,scc (default metrics.csv)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    p.add_argument("--seed", type=int, required=True, help="first seed")
    p.add_argument("--n-seeds", type=int, default=50, help="seeds to check (default 50)")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error (default 1e-4)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-weights", help="per-slide mean compositional weights")
    p.add_argument("--model", required=True, help="checkpoint JSON")
    p.add_argument("--features", required=True, help="directory of per-slide feature CSVs")
    p.add_argument("--out", required=True, help="output CSV slide_id,<types>")
    p.set_defaults(func=cmd_export_weights)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if getattr(args, "flags", None) is not None:
            Ablation.from_string(args.flags)
        code = args.func(args)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, NonFiniteGradientError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
