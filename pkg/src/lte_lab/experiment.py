"""End-to-end experiment: label trees, embeddings, kernel SVMs and metrics.

Flow per channel: learn a label tree on the training snippets, embed the
training snippets out of fold and the test snippets with a model fitted on
all training data.  A channel with an auxiliary corpus instead learns its
tree over the auxiliary categories closest to the scene classes.  The
channel embeddings then feed a tuned one-vs-one SVM.
"""
from __future__ import annotations

import configparser
import contextlib
import csv
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import _json
from .data import Dataset, Snippet, load_dataset, stratified_split_indices
from .embedding import (
    closeness,
    embed_dataset,
    embed_dataset_out_of_fold,
    save_embeddings,
    select_top_categories,
    train_lte,
)
from .errors import DataError, LteError
from .evaluation import MetricsReport, compute_metrics
from .forest import ForestConfig, train_forest
from .kernels import KERNELS, fit_kernel, gram
from .label_tree import build_label_tree, node_seed
from .svm import default_grid, predict_ovo, train_ovo, tune_hyperparameters

__all__ = [
    "ChannelConfig",
    "ExperimentConfig",
    "ExperimentResult",
    "run_experiment",
    "load_config",
    "align_dataset",
    "restrict_classes",
]


@dataclass
class ChannelConfig:
    name: str
    data: str | Path | Dataset
    test_data: str | Path | Dataset | None = None
    aux_data: str | Path | Dataset | None = None
    top_n: int = 10


@dataclass
class ExperimentConfig:
    channels: list[ChannelConfig]
    seed: int
    kernel: str = "linear"
    test_fraction: float = 0.3
    embed_folds: int = 10
    svm_folds: int = 10
    forest: ForestConfig = field(default_factory=ForestConfig)
    c_grid: tuple[float, ...] = (0.1, 1.0, 10.0, 100.0)
    gamma_scales: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    tol: float = 1e-3
    output_dir: str | Path | None = None

    def validate(self) -> None:
        if not self.channels:
            raise DataError("config: at least one channel is required")
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise DataError(f"config: duplicate channel names {names}")
        if self.kernel not in KERNELS:
            raise DataError(f"config: unknown kernel {self.kernel!r}")
        if self.kernel != "fusion" and len(self.channels) != 1:
            raise DataError(f"config: kernel {self.kernel!r} takes one channel; use 'fusion' for several")
        for c in self.channels:
            for p in (c.data, c.test_data, c.aux_data):
                if isinstance(p, (str, Path)) and not Path(p).is_file():
                    raise DataError(f"config: channel {c.name!r}: file not found: {p}")

    def describe(self) -> dict:
        def src(p):
            if p is None:
                return None
            return str(p) if isinstance(p, (str, Path)) else "<in-memory dataset>"

        return {
            "seed": self.seed,
            "kernel": self.kernel,
            "test_fraction": self.test_fraction,
            "embed_folds": self.embed_folds,
            "svm_folds": self.svm_folds,
            "forest": asdict(self.forest),
            "c_grid": list(self.c_grid),
            "gamma_scales": list(self.gamma_scales),
            "tol": self.tol,
            "channels": [{"name": c.name, "data": src(c.data), "test_data": src(c.test_data),
                          "aux_data": src(c.aux_data), "top_n": c.top_n} for c in self.channels],
        }


@dataclass
class ExperimentResult:
    report: MetricsReport
    predictions: np.ndarray
    test_ids: list[str]
    best_params: dict
    label_names: tuple[str, ...]
    train_embeddings: dict[str, np.ndarray]
    test_embeddings: dict[str, np.ndarray]


@contextlib.contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except LteError as exc:
        if str(exc).startswith("["):
            raise
        raise type(exc)(f"[{name}] {exc}") from exc


def _as_dataset(obj) -> Dataset:
    return obj if isinstance(obj, Dataset) else load_dataset(obj)


def align_dataset(ds: Dataset, reference: Dataset, ids=None) -> Dataset:
    """Reorder ``ds`` to ``reference``'s snippet ids and relabel with its label indices."""
    ids = reference.ids if ids is None else ids
    ref_label = dict(zip(reference.ids, reference.labels))
    by_id = {s.id: s for s in ds.snippets}
    out = []
    for sid in ids:
        if sid not in by_id:
            raise DataError(f"snippet {sid!r} missing from a channel dataset")
        s = by_id[sid]
        name = ds.label_names[s.label - 1]
        ref_name = reference.label_names[ref_label[sid] - 1]
        if name != ref_name:
            raise DataError(f"snippet {sid!r} is {name!r} in one channel and {ref_name!r} in another")
        out.append(Snippet(s.id, int(ref_label[sid]), s.segments))
    return Dataset(tuple(out), reference.label_names)


def restrict_classes(ds: Dataset, names) -> Dataset:
    """Keep only the snippets whose class name is in ``names`` (renumbered in that order)."""
    names = list(names)
    new = {n: i + 1 for i, n in enumerate(names)}
    snippets = [Snippet(s.id, new[ds.label_names[s.label - 1]], s.segments)
                for s in ds.snippets if ds.label_names[s.label - 1] in new]
    return Dataset(tuple(snippets), tuple(names))


def _channel_embeddings(ch: ChannelConfig, train: Dataset, test: Dataset, cfg: ExperimentConfig,
                        jobs: int, out: Path | None) -> tuple[np.ndarray, np.ndarray]:
    seed = node_seed(cfg.seed, [], f"channel:{ch.name}")
    forest_cfg = cfg.forest
    chdir = None
    if out is not None:
        chdir = out / ch.name
        chdir.mkdir(parents=True, exist_ok=True)

    if ch.aux_data is None:
        with _stage(f"{ch.name}: tree build"):
            tree = build_label_tree(train, forest_cfg, seed=node_seed(seed, [], "tree"), jobs=jobs)
        with _stage(f"{ch.name}: out-of-fold embedding"):
            E_train = embed_dataset_out_of_fold(train, tree, forest_cfg, k=cfg.embed_folds,
                                                seed=node_seed(seed, [], "oof"), jobs=jobs)
        with _stage(f"{ch.name}: lte train"):
            model = train_lte(tree, train.segment_samples(), forest_cfg,
                              seed=node_seed(seed, [], "lte"), jobs=jobs)
    else:
        with _stage(f"{ch.name}: closeness"):
            aux = _as_dataset(ch.aux_data)
            if aux.feature_dim != train.feature_dim:
                raise DataError(f"auxiliary dimension {aux.feature_dim} != channel dimension {train.feature_dim}")
            scene_forest = train_forest(train.segment_samples(),
                                        forest_cfg.with_seed(node_seed(seed, [], "scene")), jobs=jobs)
            aux_sets = {name: aux.segment_samples([c]).features
                        for c, name in enumerate(aux.label_names, start=1)}
            table = closeness(scene_forest, aux_sets)
            top = select_top_categories(table, ch.top_n)
            chosen = {n for names in top.values() for n in names}
            selected = [n for n in aux.label_names if n in chosen]
            if len(selected) < 2:
                raise DataError("auxiliary selection kept fewer than 2 categories")
            aux_sel = restrict_classes(aux, selected)
        with _stage(f"{ch.name}: tree build"):
            tree = build_label_tree(aux_sel, forest_cfg, seed=node_seed(seed, [], "tree"), jobs=jobs)
        with _stage(f"{ch.name}: lte train"):
            model = train_lte(tree, aux_sel.segment_samples(), forest_cfg,
                              seed=node_seed(seed, [], "lte"), jobs=jobs)
            # the auxiliary model never saw scene snippets, so no out-of-fold pass
            E_train = embed_dataset(model, train)
        if chdir is not None:
            _json.dump({"closeness": table.to_dict(),
                        "top_n": ch.top_n,
                        "top": {train.label_names[c - 1]: v for c, v in top.items()},
                        "selected": selected}, chdir / "closeness.json", "closeness")
    with _stage(f"{ch.name}: test embedding"):
        E_test = embed_dataset(model, test)
    if chdir is not None:
        tree.save(chdir / "tree.json")
        (chdir / "tree.txt").write_text(tree.render(), encoding="utf-8")
        model.save(chdir / "lte_model.json")
        names = train.label_names
        save_embeddings(chdir / "train_embeddings.csv", train.ids,
                        [names[c - 1] for c in train.labels], E_train)
        save_embeddings(chdir / "test_embeddings.csv", test.ids,
                        [names[c - 1] for c in test.labels], E_test)
    return E_train, E_test


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """Run the full pipeline; writes artifacts when ``cfg.output_dir`` is set."""
    cfg.validate()
    out = Path(cfg.output_dir) if cfg.output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(_json.dumps(cfg.describe()), encoding="utf-8")

    with _stage("load"):
        primary = cfg.channels[0]
        base = _as_dataset(primary.data)
        if primary.test_data is not None:
            raw_test = _as_dataset(primary.test_data)
            unknown = set(raw_test.label_names) - set(base.label_names)
            if unknown:
                raise DataError(f"test data has classes absent from training: {sorted(unknown)}")
            base_test = Dataset(tuple(Snippet(s.id, base.label_map[raw_test.label_names[s.label - 1]],
                                              s.segments) for s in raw_test.snippets), base.label_names)
            train_ids, test_ids = base.ids, base_test.ids
        else:
            tr, te = stratified_split_indices(base.labels, 1.0 - cfg.test_fraction,
                                              node_seed(cfg.seed, [], "test-split"))
            train_ids = [base.ids[i] for i in tr]
            test_ids = [base.ids[i] for i in te]
            base_test = base
        splits = {}
        for ch in cfg.channels:
            if primary.test_data is not None:
                trd = align_dataset(_as_dataset(ch.data), base, train_ids)
                ted = align_dataset(_as_dataset(ch.test_data if ch.test_data is not None else ch.data),
                                    base_test, test_ids)
            else:
                full = align_dataset(_as_dataset(ch.data), base)
                trd = full.select_ids(train_ids)
                ted = full.select_ids(test_ids)
            splits[ch.name] = (trd, ted)
    if out is not None:
        (out / "split.json").write_text(_json.dumps({"train": train_ids, "test": test_ids}), encoding="utf-8")

    E_train, E_test = {}, {}
    for ch in cfg.channels:
        trd, ted = splits[ch.name]
        E_train[ch.name], E_test[ch.name] = _channel_embeddings(ch, trd, ted, cfg, jobs, out)

    train_ds, test_ds = splits[primary.name]
    y_train = train_ds.labels
    y_test = test_ds.labels
    chans_train = [E_train[c.name] for c in cfg.channels]
    chans_test = [E_test[c.name] for c in cfg.channels]
    train_arg = chans_train if cfg.kernel == "fusion" else chans_train[0]
    test_arg = chans_test if cfg.kernel == "fusion" else chans_test[0]

    with _stage("svm tune"):
        grid = default_grid(cfg.kernel, cfg.c_grid, cfg.gamma_scales)
        best, table = tune_hyperparameters(train_arg, y_train, cfg.kernel, grid, k=cfg.svm_folds,
                                           seed=node_seed(cfg.seed, [], "tune"), tol=cfg.tol)
    with _stage("svm train"):
        spec = fit_kernel(cfg.kernel, train_arg, gamma_scale=best.get("gamma_scale", 1.0))
        K_train = gram(spec, train_arg)
        clf = train_ovo(K_train, y_train, best["C_reg"], cfg.tol, spec, col_ids=train_ds.ids)
    with _stage("svm predict"):
        pred = predict_ovo(clf, gram(spec, test_arg, train_arg))
    report = compute_metrics(y_test, pred, train_ds.num_classes)

    if out is not None:
        _json.dump({"best": best, "table": table}, out / "tuning.json", "tuning")
        compact, keep = clf.compact()
        _json.dump({"ovo": compact.to_dict(),
                    "channels": [c.name for c in cfg.channels],
                    "support_vectors": [E[keep].tolist() for E in chans_train],
                    "label_names": list(train_ds.label_names)}, out / "svm_model.json", "ovo_svm")
        names = train_ds.label_names
        with (out / "predictions.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["snippet_id", "label", "predicted"])
            for sid, t, p in zip(test_ds.ids, y_test, pred):
                w.writerow([sid, names[t - 1], names[p - 1]])
        _json.dump({"metrics": report.to_dict(), "label_names": list(names),
                    "best_params": best, "seed": cfg.seed}, out / "report.json", "report")
        (out / "report.txt").write_text(report.table(names), encoding="utf-8")
    return ExperimentResult(report, pred, test_ds.ids, best, train_ds.label_names, E_train, E_test)


# -- config file ---------------------------------------------------------------------

_EXPERIMENT_KEYS = {
    "kernel": str, "test_fraction": float, "embed_folds": int, "svm_folds": int,
    "c_grid": "floats", "gamma_scales": "floats", "tol": float, "top_n": int,
}
_FOREST_KEYS = {"num_trees": int, "max_depth": "optint", "min_leaf": int,
                "features_per_split": "optint", "bootstrap": "bool"}
_CHANNEL_KEYS = {"data", "test_data", "aux_data", "top_n"}


def _convert(kind, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if kind == "optint":
            return None if raw.lower() in ("", "none", "unlimited") else int(raw)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise DataError(f"config: bad value {raw!r} for {where}") from None


def load_config(path: str | Path, seed: int, overrides: dict | None = None) -> ExperimentConfig:
    """Parse an INI-style ``key = value`` config with [experiment], [forest] and [channel.NAME] sections.

    Relative paths resolve against the config file's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise DataError(f"config: {exc}") from None
    root = path.parent
    exp: dict = {}
    forest: dict = {}
    channels: list[ChannelConfig] = []
    default_top = 10
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "experiment":
            for k, v in items.items():
                if k not in _EXPERIMENT_KEYS:
                    raise DataError(f"config: unknown key {k!r} in [experiment]")
                exp[k] = _convert(_EXPERIMENT_KEYS[k], v, f"experiment.{k}")
        elif section == "forest":
            for k, v in items.items():
                if k not in _FOREST_KEYS:
                    raise DataError(f"config: unknown key {k!r} in [forest]")
                forest[k] = _convert(_FOREST_KEYS[k], v, f"forest.{k}")
        elif section.startswith("channel."):
            name = section.split(".", 1)[1]
            unknown = set(items) - _CHANNEL_KEYS
            if unknown:
                raise DataError(f"config: unknown key(s) {sorted(unknown)} in [{section}]")
            if "data" not in items:
                raise DataError(f"config: [{section}] needs a data path")

            def resolve(key):
                v = items.get(key)
                return None if v is None else str(root / v)

            top = _convert(int, items["top_n"], f"{section}.top_n") if "top_n" in items else None
            channels.append(ChannelConfig(name, resolve("data"), resolve("test_data"),
                                          resolve("aux_data"), top))
        else:
            raise DataError(f"config: unknown section [{section}]")
    default_top = exp.pop("top_n", default_top)
    for ch in channels:
        if ch.top_n is None:
            ch.top_n = default_top
    cfg = ExperimentConfig(channels=channels, seed=seed, forest=ForestConfig(**forest), **exp)
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg
