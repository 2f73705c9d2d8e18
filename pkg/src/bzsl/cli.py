"""Command line interface: ``bzsl {embed,fit-predict,tune,ablate,sweep,synth}``.

Every option can also come from a flat ``key=value`` config file passed with
``--config``. Giving the same key both ways is an error, as is any key the
command does not know. Exit codes: 0 success, 2 usage or configuration
error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import core, dnaside, evalharness
from .core import Hyperparams
from .datastore import (
    load_labels,
    load_matrix,
    load_split,
    make_split,
    save_labels,
    save_matrix,
    save_split,
)
from .errors import BzslError, NotPositiveDefinite, UnmatchedSample

EXIT_USAGE = 2
EXIT_DATA = 3

# config-file spellings that differ from the option's dest
ALIASES = {
    "kmer.k": "k",
    "align.match": "match",
    "align.mismatch": "mismatch",
    "align.gap": "gap",
    "seq.length": "length",
    "grid.kappa0": "grid_kappa0",
    "grid.kappa1": "grid_kappa1",
    "grid.m_mult": "grid_m_mult",
    "grid.s_scale": "grid_s_scale",
    "grid.k_neighbors": "grid_k_neighbors",
}

PATH_KEYS = ("fasta", "labels", "features", "split", "side_info", "side_info_classes")
HYPER_KEYS = ("kappa0", "kappa1", "m_mult", "s_scale", "k_neighbors", "pca_dim")


class UsageError(Exception):
    pass


def _float_list(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from exc


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from exc


def _default_threads():
    env = os.environ.get("BZSL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# parser


def _common(p, data=True, hyper=True):
    p.add_argument("--config", help="flat key=value file supplying any of these options")
    p.add_argument("--seed", type=int, help="master random seed (default 0)")
    p.add_argument("--threads", type=int, help="worker threads (default: $BZSL_THREADS or CPU count)")
    p.add_argument("--out", help="output directory")
    if data:
        p.add_argument("--features", help="feature matrix (.csv or bmat)")
        p.add_argument("--labels", help="label CSV: sample_id,class_name[,group_id]")
        p.add_argument("--split", help="split CSV: sample_id,partition")
        p.add_argument("--unseen-frac", dest="unseen_frac", type=float,
                       help="make a split with this unseen-class fraction when --split is absent")
        p.add_argument("--seen-test-frac", dest="seen_test_frac", type=float,
                       help="seen test fraction for a generated split (default 0.2)")
        p.add_argument("--side-info", dest="side_info", help="class attribute matrix (.csv or bmat)")
        p.add_argument("--side-info-classes", dest="side_info_classes",
                       help="sidecar CSV row_index,class_name (default: <side-info stem>.classes.csv)")
    if hyper:
        p.add_argument("--kappa0", type=float, help="dispersion of local prior means (default 0.1)")
        p.add_argument("--kappa1", type=float, help="dispersion of class means (default 1.0)")
        p.add_argument("--m-mult", dest="m_mult", type=float, help="m as a multiple of D+2 (default 5)")
        p.add_argument("--s-scale", dest="s_scale", type=float, help="Sigma_0 scaling s (default 1)")
        p.add_argument("--k-neighbors", dest="k_neighbors", type=int, help="K seen classes per surrogate (default 2)")
        p.add_argument("--pca-dim", dest="pca_dim", type=int, help="PCA output dimension (default: 500 when D > 500)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bzsl", description="Bayesian zero-shot classification with DNA side information")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("embed", help="embed DNA barcodes into class attribute vectors")
    _common(p, data=False, hyper=False)
    p.add_argument("--fasta", help="FASTA file of barcodes")
    p.add_argument("--labels", help="label CSV: sample_id,class_name")
    p.add_argument("--method", choices=("kmer", "onehot-export"), help="embedding (default kmer)")
    p.add_argument("--k", type=int, help="k-mer length (config key kmer.k, default 4)")
    p.add_argument("--length", type=int, help="aligned length L (config key seq.length, default: median length)")
    p.add_argument("--match", type=int, help="alignment match score (default 1)")
    p.add_argument("--mismatch", type=int, help="alignment mismatch score (default -1)")
    p.add_argument("--gap", type=int, help="alignment gap score (default -2)")
    p.add_argument("--class-attr", dest="class_attr", choices=("mean", "consensus"),
                   help="class vector: mean of sample embeddings or embedding of the class consensus (default mean)")
    p.add_argument("--format", choices=("bmat", "csv"), help="matrix output format (default bmat)")

    p = sub.add_parser("fit-predict", help="fit on train_seen and evaluate the test partitions")
    _common(p)
    p.add_argument("--mode", choices=core.MODES, help="candidate classes at prediction time (default gzsl)")

    p = sub.add_parser("tune", help="grid search on a validation split carved from train_seen")
    _common(p)
    for key in ("kappa0", "kappa1", "m_mult", "s_scale"):
        p.add_argument(f"--grid-{key.replace('_', '-')}", dest=f"grid_{key}", type=_float_list,
                       help=f"comma-separated values for {key} (config key grid.{key})")
    p.add_argument("--grid-k-neighbors", dest="grid_k_neighbors", type=_int_list,
                   help="comma-separated values for k_neighbors (config key grid.k_neighbors)")
    p.add_argument("--val-unseen-frac", dest="val_unseen_frac", type=float,
                   help="fraction of seen classes held out as pseudo-unseen (default 0.1)")
    p.add_argument("--val-test-frac", dest="val_test_frac", type=float,
                   help="per-class validation test fraction (default 0.2)")

    p = sub.add_parser("ablate", help="vary the fraction of seen classes used for training")
    _common(p)
    p.add_argument("--fractions", type=_float_list, help="seen-class fractions (default 0.25,0.5,0.75,1.0)")
    p.add_argument("--repeats", type=int, help="repeats per fraction (default 5)")

    p = sub.add_parser("sweep", help="factorial sweep over kappa0 and kappa1")
    _common(p)
    p.add_argument("--kappa0-list", dest="kappa0_list", type=_float_list, help="kappa0 values")
    p.add_argument("--kappa1-list", dest="kappa1_list", type=_float_list, help="kappa1 values")

    p = sub.add_parser("synth", help="sample a synthetic dataset from the hierarchical model")
    _common(p, data=False, hyper=False)
    p.add_argument("--n-local-priors", dest="n_local_priors", type=int, help="local priors G (default 10)")
    p.add_argument("--classes-per-prior", dest="classes_per_prior", type=int, help="classes per prior (default 3)")
    p.add_argument("--samples-per-class", dest="samples_per_class", type=int, help="samples per class (default 50)")
    p.add_argument("--dim", type=int, help="feature dimension D (default 10)")
    p.add_argument("--kappa0", type=float, help="generative kappa0 (default 0.1)")
    p.add_argument("--kappa1", type=float, help="generative kappa1 (default 1.0)")
    p.add_argument("--m-gen", dest="m_gen", type=int, help="inverse-Wishart dof (default 2(D+2))")
    p.add_argument("--sideinfo-noise", dest="sideinfo_noise", type=float, help="side information noise (default 0)")
    p.add_argument("--seen-test-frac", dest="seen_test_frac", type=float, help="seen test fraction (default 0.2)")
    p.add_argument("--format", choices=("bmat", "csv"), help="matrix output format (default bmat)")
    return parser


DEFAULTS = {
    "seed": 0,
    "method": "kmer",
    "k": 4,
    "match": 1,
    "mismatch": -1,
    "gap": -2,
    "class_attr": "mean",
    "format": "bmat",
    "mode": "gzsl",
    "seen_test_frac": 0.2,
    "val_unseen_frac": 0.1,
    "val_test_frac": 0.2,
    "fractions": [0.25, 0.5, 0.75, 1.0],
    "repeats": 5,
}


def read_config(path) -> dict:
    """Parse a flat ``key=value`` file; ``#`` starts a comment line."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise UsageError(f"duplicate key {key}")
        out[key] = value
    return out


def resolve(parser, args) -> dict:
    """Merge command line values with the config file into one dict."""
    sub = _subparser(parser, args.command)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    values = {dest: getattr(args, dest) for dest in actions}
    if args.config:
        for key, raw in read_config(args.config).items():
            dest = ALIASES.get(key, key)
            if dest not in actions:
                raise UsageError(f"unknown key {key}")
            if values[dest] is not None:
                raise UsageError(f"duplicate key {key}")
            action = actions[dest]
            try:
                value = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"bad value for {key}: {raw!r}") from exc
            if action.choices and value not in action.choices:
                raise UsageError(f"bad value for {key}: {raw!r} (choose from {', '.join(action.choices)})")
            values[dest] = value
    for key, default in DEFAULTS.items():
        if key in values and values[key] is None:
            values[key] = default
    if values.get("threads") is None:
        values["threads"] = _default_threads()
    for key in PATH_KEYS:
        path = values.get(key)
        if path is not None and not Path(path).exists():
            raise UsageError(f"{key}: no such file {path}")
    if values.get("out") is None:
        raise UsageError("--out is required")
    return values


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _require(values, *keys):
    missing = [k for k in keys if values.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _hyper(values) -> Hyperparams:
    given = {k: values[k] for k in HYPER_KEYS if values.get(k) is not None}
    try:
        return Hyperparams(**given)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _outdir(values) -> Path:
    out = Path(values["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# shared data loading


def _load_dataset(values, out: Path | None = None):
    _require(values, "features", "labels", "side_info")
    x = load_matrix(values["features"])
    labels = load_labels(values["labels"])
    if x.shape[0] != len(labels):
        raise BzslError(f"{x.shape[0]} feature rows but {len(labels)} labels")
    if values.get("split"):
        split = load_split(values["split"], labels)
    else:
        if values.get("unseen_frac") is None:
            raise UsageError("provide --split or --unseen-frac")
        split = make_split(labels.labels, values["unseen_frac"], values["seen_test_frac"],
                           labels.group_ids, values["seed"])
        if out is not None:
            save_split(out / "split.csv", split, labels)
    name_to_id = {n: i for i, n in enumerate(labels.class_names)}
    phi = dnaside.load_side_info(values["side_info"], name_to_id, values.get("side_info_classes"))
    return x, labels, split, phi


# --------------------------------------------------------------------------
# commands


def cmd_embed(values) -> int:
    _require(values, "fasta", "labels")
    out = _outdir(values)
    ext = ".csv" if values["format"] == "csv" else ".bmat"
    records = dnaside.parse_fasta(values["fasta"], values["labels"])
    if not records:
        raise BzslError("FASTA file contains no records")
    length = values["length"] or dnaside.median_length(records)
    cons = dnaside.consensus(records, length)
    aligned = np.stack(dnaside.align_all(records, cons, values["match"], values["mismatch"],
                                         values["gap"], values["threads"]))
    labels = np.array([r.class_id for r in records])
    names = sorted({(r.class_id, r.class_name) for r in records})
    class_names = {c: n for c, n in names}

    if values["method"] == "kmer":
        if not 1 <= values["k"] <= 6:
            raise UsageError("--k must be between 1 and 6")
        emb = np.stack([dnaside.kmer_embedding(t, values["k"]) for t in aligned])
        tag = "dna_kmer"
    else:
        emb = np.stack([dnaside.one_hot(t).reshape(-1) for t in aligned])
        tag = "dna_external"

    if values["class_attr"] == "consensus" and values["method"] == "kmer":
        table = dnaside.consensus_attributes(records, aligned, values["k"])
    else:
        table = dnaside.class_attributes(emb, labels, tag)
        table.class_names = [class_names[c] for c in table.class_ids]

    save_matrix(out / f"sample_embeddings{ext}", emb)
    with open(out / "sample_embeddings.ids.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_index", "sample_id", "class_name"])
        for r, rec in enumerate(records):
            w.writerow([r, rec.sample_id, rec.class_name])
    dnaside.save_side_info(out / f"class_attributes{ext}", table)
    hist = np.bincount(aligned.reshape(-1).astype(np.int64), minlength=5)
    meta = [
        f"method={values['method']}",
        f"channels={','.join(dnaside.CHANNELS)}",
        f"length={length}",
        f"k={values['k']}",
        f"class_attr={values['class_attr']}",
        f"consensus={dnaside.detokenize(cons)}",
    ]
    (out / "embed_meta.txt").write_text("\n".join(meta) + "\n", encoding="utf-8")

    print(f"consensus length: {length}")
    print("token histogram: " + " ".join(f"{c}={n}" for c, n in zip(dnaside.CHANNELS, hist)))
    print(f"samples: {emb.shape[0]} x {emb.shape[1]}, classes: {len(table)}")
    return 0


def _mode_eval(model, x, split, mode):
    if mode == "gzsl":
        test = np.concatenate([split.test_seen, split.test_unseen])
    elif mode == "zsl_only":
        test = split.test_unseen
    else:
        test = split.test_seen
    test = np.asarray(test, dtype=np.int64)
    if len(test) == 0:
        return test, np.array([], dtype=np.int64), np.array([])
    pred, top = core.predict_batch(model, x[test], mode)
    return test, pred, top


def cmd_fit_predict(values) -> int:
    out = _outdir(values)
    hyper = _hyper(values)
    x, labels, split, phi = _load_dataset(values, out)
    y = labels.labels
    train_classes = np.unique(y[split.train_seen])
    model = core.fit(x[split.train_seen], y[split.train_seen], phi.subset(sorted(train_classes.tolist())),
                     phi.subset(sorted(split.unseen_classes.tolist())), hyper, values["threads"])
    mode = values["mode"]
    test, pred, top = _mode_eval(model, x, split, mode)
    acc = evalharness.per_class_accuracy(y[test], pred, set(y[test].tolist()))
    echo = dict(hyper.to_dict(), mode=mode, seed=values["seed"],
                pca_dim_used=model.pca.out_dim if model.pca else None)
    report = evalharness.GzslReport.from_accuracies(
        acc, sorted(set(y[split.test_seen].tolist())), sorted(split.unseen_classes.tolist()), echo)

    sample_ids = labels.sample_ids or [str(i) for i in range(len(labels))]
    evalharness.write_rows(out / "report.csv", [report.row()])
    unseen = set(split.unseen_classes.tolist())
    evalharness.write_rows(out / "per_class.csv", [
        {"class_id": c, "class_name": labels.name_of(c), "kind": "unseen" if c in unseen else "seen",
         "n_test": int(np.sum(y[test] == c)), "accuracy": a}
        for c, a in sorted(report.per_class_acc.items())
    ])
    evalharness.write_rows(out / "predictions.csv", [
        {"sample_id": sample_ids[i], "true": labels.name_of(int(y[i])),
         "predicted": labels.name_of(int(p)), "top_score": float(s)}
        for i, p, s in zip(test, pred, top)
    ])
    (out / "summary.txt").write_text(report.summary(), encoding="utf-8")
    core.save_model(out / "model.bzsl", model)
    print(f"S = {report.seen_acc:.2f}  US = {report.unseen_acc:.2f}  H = {report.harmonic_mean:.2f}")
    return 0


def cmd_tune(values) -> int:
    out = _outdir(values)
    base = _hyper(values)
    x, labels, split, phi = _load_dataset(values, out)
    grid = {k: values[f"grid_{k}"] for k in core.DEFAULT_GRID if values.get(f"grid_{k}") is not None}
    if not grid:
        grid = dict(core.DEFAULT_GRID)
    val = evalharness.make_validation_split(labels.labels, split, values["val_unseen_frac"],
                                            values["val_test_frac"], values["seed"])
    best, configs, reports = evalharness.tune_grid(x, labels.labels, val, phi, grid, base,
                                                   values["seed"], values["threads"])
    evalharness.write_rows(out / "tune_report.csv", [r.row() for r in reports])
    lines = [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}"
             for k, v in best.to_dict().items() if v is not None]
    (out / "best_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"evaluated {len(configs)} configurations; best: " + ", ".join(lines))
    return 0


def cmd_ablate(values) -> int:
    out = _outdir(values)
    hyper = _hyper(values)
    x, labels, split, phi = _load_dataset(values, out)
    result = evalharness.ablate_seen_count(x, labels.labels, split, phi, hyper, values["fractions"],
                                           values["repeats"], values["seed"], values["threads"])
    evalharness.write_rows(out / "ablation_runs.csv", result.long_rows())
    evalharness.write_rows(out / "ablation.csv", result.aggregate())
    for row in result.aggregate():
        print(f"fraction {row['seen_fraction']}: US {row['US_mean']:.3f} +/- {row['US_sd']:.3f}, "
              f"S {row['S_mean']:.3f}, H {row['H_mean']:.3f}")
    return 0


def cmd_sweep(values) -> int:
    _require(values, "kappa0_list", "kappa1_list")
    out = _outdir(values)
    hyper = _hyper(values)
    x, labels, split, phi = _load_dataset(values, out)
    result = evalharness.sweep_kappas(x, labels.labels, split, phi, hyper, values["kappa0_list"],
                                      values["kappa1_list"], values["seed"], values["threads"])
    rows = [r[0].row() for r in result.runs]
    evalharness.write_rows(out / "sweep.csv", rows)
    print(f"wrote {len(rows)} sweep cells")
    return 0


def cmd_synth(values) -> int:
    fields = ("n_local_priors", "classes_per_prior", "samples_per_class", "dim", "kappa0", "kappa1",
              "m_gen", "sideinfo_noise", "seen_test_frac")
    given = {k: values[k] for k in fields if values.get(k) is not None}
    spec = evalharness.SyntheticSpec(seed=values["seed"], **given)
    try:
        spec.validate()
    except BzslError as exc:
        raise UsageError(str(exc)) from exc
    data = evalharness.generate_synthetic(spec)
    out = _outdir(values)
    ext = ".csv" if values["format"] == "csv" else ".bmat"
    save_matrix(out / f"features{ext}", data.x)
    save_labels(out / "labels.csv", data.labels)
    save_split(out / "split.csv", data.split, data.labels)
    dnaside.save_side_info(out / f"side_info{ext}", data.phi)
    truth = spec.true_hyperparams()
    lines = [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}"
             for k, v in truth.to_dict().items() if v is not None]
    (out / "true_hyper.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {data.x.shape[0]}x{data.x.shape[1]} features, {len(data.labels.class_names)} classes, "
          f"{len(data.split.unseen_classes)} unseen")
    return 0


COMMANDS = {
    "embed": cmd_embed,
    "fit-predict": cmd_fit_predict,
    "tune": cmd_tune,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        values = resolve(parser, args)
        return COMMANDS[args.command](values)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnmatchedSample as exc:
        print(f"UnmatchedSample: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NotPositiveDefinite as exc:
        where = f" (class {exc.class_id})" if exc.class_id is not None else ""
        print(f"NotPositiveDefinite{where}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BzslError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
