"""``lte-lab`` command line interface.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import _json
from .data import load_dataset, save_dataset
from .embedding import (
    LTEModel,
    closeness,
    embed_dataset,
    embed_dataset_out_of_fold,
    load_embeddings,
    save_embeddings,
    select_top_categories,
    train_lte,
)
from .errors import DataError, NumericalError
from .evaluation import compute_metrics, rotate_dataset, synth_hierarchy_dataset
from .experiment import ChannelConfig, ExperimentConfig, load_config, run_experiment
from .forest import ForestConfig, train_forest
from .kernels import KERNELS, KernelSpec, fit_kernel, gram, save_gram
from .label_tree import LabelTree, build_label_tree
from .svm import OvOClassifier, default_grid, predict_ovo, train_ovo, tune_hyperparameters

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _forest_args(p):
    p.add_argument("--trees", type=int, default=200, help="trees per forest (default 200)")
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--min-leaf", type=int, default=1)
    p.add_argument("--mtry", type=int, default=None, help="features per split (default ceil(sqrt(M)))")


def _forest_config(args) -> ForestConfig:
    return ForestConfig(num_trees=args.trees, max_depth=args.max_depth, min_leaf=args.min_leaf,
                        features_per_split=args.mtry)


def _seed_arg(p, required=True):
    p.add_argument("--seed", type=int, required=required, default=None if required else 0)


def _jobs_arg(p):
    p.add_argument("--jobs", type=int, default=1, help="worker threads (results do not depend on it)")


# -- subcommands ---------------------------------------------------------------------

def cmd_synth(args):
    ds, planted = synth_hierarchy_dataset(args.classes, args.dim, separation=args.separation,
                                          sigma=args.sigma, snippets_per_class=args.snippets,
                                          segments_per_snippet=args.segments, seed=args.seed)
    save_dataset(ds, args.out)
    if args.tree_out:
        planted.save(args.tree_out)
    if args.rotated_out:
        save_dataset(rotate_dataset(ds, args.seed + 1), args.rotated_out)
    print(f"wrote {len(ds)} snippets, C={ds.num_classes}, M={ds.feature_dim} to {args.out}")


def cmd_tree_build(args):
    ds = load_dataset(args.data)
    tree = build_label_tree(ds, _forest_config(args), seed=args.seed, jobs=args.jobs)
    tree.save(args.out)
    print(f"label tree with {len(tree.split_nodes())} split nodes written to {args.out}")


def cmd_tree_show(args):
    sys.stdout.write(LabelTree.load(args.tree).render())


def cmd_lte_train(args):
    ds = load_dataset(args.data)
    tree = LabelTree.load(args.tree)
    model = train_lte(tree, ds.segment_samples(), _forest_config(args), seed=args.seed, jobs=args.jobs)
    model.save(args.out)
    print(f"LTE model ({model.dim}-dimensional) written to {args.out}")


def cmd_lte_embed(args):
    ds = load_dataset(args.data)
    if args.oof:
        if not args.tree:
            raise DataError("--oof needs --tree")
        E = embed_dataset_out_of_fold(ds, LabelTree.load(args.tree), _forest_config(args),
                                      k=args.folds, seed=args.seed, jobs=args.jobs)
    else:
        if not args.model:
            raise DataError("embedding needs --model (or --oof with --tree)")
        E = embed_dataset(LTEModel.load(args.model), ds)
    save_embeddings(args.out, ds.ids, [ds.label_names[c - 1] for c in ds.labels], E)
    print(f"{E.shape[0]} embeddings of dimension {E.shape[1]} written to {args.out}")


def cmd_closeness(args):
    aux = load_dataset(args.aux_data)
    if args.top_n > aux.num_classes:
        raise DataError(f"N exceeds category count: --top-n {args.top_n} > {aux.num_classes} categories")
    scene = load_dataset(args.data)
    forest = train_forest(scene.segment_samples(), _forest_config(args).with_seed(args.seed), jobs=args.jobs)
    aux_sets = {name: aux.segment_samples([c]).features for c, name in enumerate(aux.label_names, start=1)}
    table = closeness(forest, aux_sets)
    top = select_top_categories(table, args.top_n)
    _json.dump({"closeness": table.to_dict(), "top_n": args.top_n,
                "scene_names": list(scene.label_names),
                "top": {scene.label_names[c - 1]: v for c, v in top.items()}}, args.out, "closeness")
    for c, cats in top.items():
        print(f"{scene.label_names[c - 1]}: {', '.join(cats)}")


def _load_channels(paths):
    ids = labels = None
    chans = []
    for p in paths:
        i, lab, E = load_embeddings(p)
        if ids is not None and (i != ids or lab != labels):
            raise DataError(f"{p}: snippet ids/labels differ from the first channel")
        ids, labels = i, lab
        chans.append(E)
    return ids, labels, chans


def _kernel_input(kind, chans):
    if kind != "fusion" and len(chans) != 1:
        raise DataError(f"kernel {kind!r} takes one --data file; use --kernel fusion for several")
    return chans if kind == "fusion" else chans[0]


def cmd_gram(args):
    ids, _, chans = _load_channels(args.data)
    X = _kernel_input(args.kernel, chans)
    spec = fit_kernel(args.kernel, X, gamma=args.gamma)
    if args.test:
        tids, _, tchans = _load_channels(args.test)
        K = gram(spec, _kernel_input(args.kernel, tchans), X)
        save_gram(args.out, K, tids, ids)
    else:
        save_gram(args.out, gram(spec, X), ids, ids)
    print(f"{args.kernel} gram written to {args.out} ({spec.to_dict()})")


def _label_index(names):
    order = []
    for n in names:
        if n not in order:
            order.append(n)
    return order


def cmd_svm_tune(args):
    ids, names, chans = _load_channels(args.data)
    classes = sorted(set(names))
    y = np.array([classes.index(n) + 1 for n in names])
    grid = default_grid(args.kernel, tuple(args.c_grid))
    best, table = tune_hyperparameters(_kernel_input(args.kernel, chans), y, args.kernel, grid,
                                       k=args.folds, seed=args.seed, tol=args.tol)
    _json.dump({"best": best, "table": table}, args.out, "tuning")
    print(f"best: {best}")


def cmd_svm_train(args):
    ids, names, chans = _load_channels(args.data)
    classes = sorted(set(names))
    y = np.array([classes.index(n) + 1 for n in names])
    X = _kernel_input(args.kernel, chans)
    spec = fit_kernel(args.kernel, X, gamma=args.gamma, gamma_scale=args.gamma_scale)
    clf = train_ovo(gram(spec, X), y, args.c_reg, args.tol, spec, col_ids=ids)
    compact, keep = clf.compact()
    _json.dump({"ovo": compact.to_dict(), "support_vectors": [E[keep].tolist() for E in chans],
                "label_names": classes}, args.out, "ovo_svm")
    print(f"{len(clf.machines)} pairwise machines written to {args.out}")


def cmd_svm_predict(args):
    d = _json.load(args.model, "ovo_svm")
    clf = OvOClassifier.from_dict(d["ovo"])
    support = [np.asarray(s, dtype=np.float64) for s in d["support_vectors"]]
    names = d["label_names"]
    ids, true, chans = _load_channels(args.data)
    if len(chans) != len(support):
        raise DataError(f"model has {len(support)} channel(s), got {len(chans)} --data file(s)")
    kind = clf.kernel.kind
    K = gram(clf.kernel, _kernel_input(kind, chans), _kernel_input(kind, support))
    pred = predict_ovo(clf, K)
    with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snippet_id", "label", "predicted"])
        for sid, t, p in zip(ids, true, pred):
            w.writerow([sid, t, names[p - 1]])
    print(f"{len(ids)} predictions written to {args.out}")


def cmd_eval(args):
    path = Path(args.pred)
    if not path.is_file():
        raise DataError(f"predictions file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"label", "predicted"} <= set(rows[0]):
        raise DataError(f"{path}: expected columns snippet_id,label,predicted")
    names = _label_index(sorted({r["label"] for r in rows} | {r["predicted"] for r in rows}))
    idx = {n: i + 1 for i, n in enumerate(names)}
    report = compute_metrics([idx[r["label"]] for r in rows], [idx[r["predicted"]] for r in rows], len(names))
    if args.out:
        _json.dump({"metrics": report.to_dict(), "label_names": names}, args.out, "report")
    sys.stdout.write(report.table(names))


def cmd_run(args):
    overrides = {"output_dir": args.out}
    if args.kernel:
        overrides["kernel"] = args.kernel
    if args.folds:
        overrides["embed_folds"] = args.folds
        overrides["svm_folds"] = args.folds
    if args.config:
        cfg = load_config(args.config, args.seed, overrides)
    else:
        if not args.data:
            raise DataError("run needs --config or --data")
        cfg = ExperimentConfig(channels=[], seed=args.seed, **overrides)
    if args.data:
        chans = [ChannelConfig("scene", args.data)]
        if args.aux_data:
            chans.append(ChannelConfig("aux", args.data, aux_data=args.aux_data))
            if not args.kernel:
                cfg.kernel = "fusion"
        cfg.channels = chans
    if args.aux_data and not args.data:
        raise DataError("--aux-data needs --data")
    if args.top_n:
        for ch in cfg.channels:
            ch.top_n = args.top_n
    if args.trees:
        cfg.forest = replace(cfg.forest, num_trees=args.trees)
    result = run_experiment(cfg, jobs=args.jobs)
    sys.stdout.write(result.report.table(result.label_names))


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lte-lab", description="Label tree embeddings and kernel SVM classification.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a planted-hierarchy dataset")
    s.add_argument("--out", required=True)
    _seed_arg(s)
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--separation", type=float, default=4.0)
    s.add_argument("--sigma", type=float, default=0.5)
    s.add_argument("--snippets", type=int, default=20)
    s.add_argument("--segments", type=int, default=10)
    s.add_argument("--tree-out", help="also write the planted label tree")
    s.add_argument("--rotated-out", help="also write a randomly rotated second view")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("tree", help="label tree learning and display")
    tsub = t.add_subparsers(dest="tree_command", required=True, parser_class=_Parser)
    tb = tsub.add_parser("build")
    tb.add_argument("--data", required=True)
    tb.add_argument("--out", required=True)
    _seed_arg(tb)
    _jobs_arg(tb)
    _forest_args(tb)
    tb.set_defaults(func=cmd_tree_build)
    ts = tsub.add_parser("show")
    ts.add_argument("--tree", "--data", dest="tree", required=True)
    ts.set_defaults(func=cmd_tree_show)

    le = sub.add_parser("lte", help="label tree embedding models")
    lsub = le.add_subparsers(dest="lte_command", required=True, parser_class=_Parser)
    lt = lsub.add_parser("train")
    lt.add_argument("--data", required=True)
    lt.add_argument("--tree", required=True)
    lt.add_argument("--out", required=True)
    _seed_arg(lt)
    _jobs_arg(lt)
    _forest_args(lt)
    lt.set_defaults(func=cmd_lte_train)
    lm = lsub.add_parser("embed")
    lm.add_argument("--data", required=True)
    lm.add_argument("--out", required=True)
    lm.add_argument("--model")
    lm.add_argument("--oof", action="store_true", help="out-of-fold embedding (needs --tree)")
    lm.add_argument("--tree")
    lm.add_argument("--folds", type=int, default=10)
    _seed_arg(lm, required=False)
    _jobs_arg(lm)
    _forest_args(lm)
    lm.set_defaults(func=cmd_lte_embed)

    c = sub.add_parser("closeness", help="closeness of auxiliary categories to scene classes")
    c.add_argument("--data", required=True)
    c.add_argument("--aux-data", required=True)
    c.add_argument("--top-n", "--top", dest="top_n", type=int, required=True)
    c.add_argument("--out", required=True)
    _seed_arg(c)
    _jobs_arg(c)
    _forest_args(c)
    c.set_defaults(func=cmd_closeness)

    g = sub.add_parser("gram", help="export a Gram matrix as CSV")
    g.add_argument("--kernel", choices=KERNELS, required=True)
    g.add_argument("--data", action="append", required=True, help="training embeddings (repeat per channel)")
    g.add_argument("--test", action="append", help="row embeddings (repeat per channel)")
    g.add_argument("--gamma", type=float)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gram)

    sv = sub.add_parser("svm", help="one-vs-one SVM")
    ssub = sv.add_subparsers(dest="svm_command", required=True, parser_class=_Parser)
    st = ssub.add_parser("tune")
    st.add_argument("--kernel", choices=KERNELS, required=True)
    st.add_argument("--data", action="append", required=True)
    st.add_argument("--folds", type=int, default=10)
    st.add_argument("--c-grid", type=float, nargs="+", default=[0.1, 1.0, 10.0, 100.0])
    st.add_argument("--tol", type=float, default=1e-3)
    st.add_argument("--out", required=True)
    _seed_arg(st)
    st.set_defaults(func=cmd_svm_tune)
    sr = ssub.add_parser("train")
    sr.add_argument("--kernel", choices=KERNELS, required=True)
    sr.add_argument("--data", action="append", required=True)
    sr.add_argument("--c-reg", type=float, default=1.0)
    sr.add_argument("--gamma", type=float)
    sr.add_argument("--gamma-scale", type=float, default=1.0)
    sr.add_argument("--tol", type=float, default=1e-3)
    sr.add_argument("--out", required=True)
    sr.set_defaults(func=cmd_svm_train)
    sp = ssub.add_parser("predict")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", action="append", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_svm_predict)

    e = sub.add_parser("eval", help="metrics from a predictions CSV")
    e.add_argument("--pred", "--data", dest="pred", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("run", help="full pipeline from a config file")
    r.add_argument("--config")
    r.add_argument("--data")
    r.add_argument("--aux-data")
    r.add_argument("--out", required=True)
    _seed_arg(r)
    _jobs_arg(r)
    r.add_argument("--kernel", choices=KERNELS)
    r.add_argument("--folds", type=int)
    r.add_argument("--top-n", type=int)
    r.add_argument("--trees", type=int)
    r.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    stage = " ".join(x for x in (args.command, getattr(args, f"{args.command}_command", None)) if x)
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"lte-lab {stage}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"lte-lab {stage}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
