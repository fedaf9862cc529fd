"""Acceptance criteria 1-10, each at its stated tolerance and time budget.

Every test records one PASS/FAIL line, printed in the terminal summary.
"""
import contextlib
import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_KEY
from lte_lab.cli import main
from lte_lab.data import Dataset, SampleSet, Snippet, save_dataset
from lte_lab.embedding import closeness, embed_segment, embed_snippet, train_lte
from lte_lab.evaluation import rotate_dataset, synth_hierarchy_dataset
from lte_lab.experiment import ChannelConfig, ExperimentConfig, run_experiment
from lte_lab.forest import ForestConfig, train_forest
from lte_lab.kernels import ChannelSet, fusion_gram, gram
from lte_lab.label_tree import (
    ConfusionMatrix,
    SymmetricAffinity,
    brute_force_partition,
    build_label_tree,
    confusion_matrix,
    partition_objective,
    spectral_partition,
    symmetrize,
)
from lte_lab.svm import duality_gap, kkt_violations, train_binary_svm

pytestmark = pytest.mark.acceptance


@pytest.fixture()
def criterion(request):
    """Context manager factory: times the block and records a PASS/FAIL line."""

    @contextlib.contextmanager
    def record(number, name, budget):
        t0 = time.perf_counter()
        info = {}
        ok = False
        try:
            yield info
            ok = True
        finally:
            elapsed = time.perf_counter() - t0
            within = elapsed < budget
            status = "PASS" if ok and within else "FAIL"
            detail = "; ".join(f"{k}={v}" for k, v in info.items())
            line = f"[{status}] criterion {number:2d} {name}: {detail} ({elapsed:.1f}s / budget {budget}s)"
            request.config.stash[ACCEPTANCE_KEY].append((number, line))
            print(line)
        assert elapsed < budget, f"criterion {number} took {elapsed:.1f}s > {budget}s"

    return record


def gaussian_classes(C, M=8, per_class=4, segments=3, spread=3.0, seed=0):
    rng = np.random.default_rng(seed)
    means = spread * rng.standard_normal((C, M))
    snippets = [Snippet(f"c{c}_{k}", c, means[c - 1] + rng.standard_normal((segments, M)))
                for c in range(1, C + 1) for k in range(per_class)]
    return Dataset(tuple(snippets), tuple(f"k{c:02d}" for c in range(1, C + 1)))


def test_c01_confusion_rows(criterion):
    with criterion(1, "confusion rows sum to 1, perfect forest gives identity", 10) as info:
        worst = 0.0
        for i in range(20):
            rng = np.random.default_rng(i)
            C = int(rng.integers(2, 7))
            M = int(rng.integers(1, 6))
            labels = tuple(range(1, C + 1))
            y = np.repeat(labels, rng.integers(3, 9, C))
            X = rng.standard_normal((y.size, M)) + rng.uniform(0, 2) * y[:, None]
            f = train_forest(SampleSet(X, y, labels), ForestConfig(num_trees=int(rng.integers(1, 30)), seed=i))
            ye = np.repeat(labels, rng.integers(1, 6, C))
            Xe = 3 * rng.standard_normal((ye.size, M))
            A = confusion_matrix(f, SampleSet(Xe, ye, labels)).entries
            worst = max(worst, float(np.abs(A.sum(axis=1) - 1).max()))
        info["max_row_error"] = f"{worst:.1e}"
        assert worst <= 1e-9

        X = np.arange(12, dtype=float)[:, None]
        y = np.repeat([1, 2, 3, 4], 3)
        S = SampleSet(X, y, (1, 2, 3, 4))
        perfect = train_forest(S, ForestConfig(num_trees=10, bootstrap=False))
        A = confusion_matrix(perfect, S).entries
        info["perfect_is_identity"] = bool(np.array_equal(A, np.eye(4)))
        assert np.array_equal(A, np.eye(4))


def test_c02_spectral_vs_brute_force(criterion):
    with criterion(2, "spectral >= 0.9 x brute-force optimum", 30) as info:
        good = 0
        for i in range(100):
            rng = np.random.default_rng(1000 + i)
            n = 3 + i % 6
            A = rng.random((n, n))
            A /= A.sum(axis=1, keepdims=True)
            S = symmetrize(ConfusionMatrix(A, tuple(range(1, n + 1))))
            _, best, _ = brute_force_partition(S)
            if partition_objective(S, spectral_partition(S)) >= 0.9 * best:
                good += 1
        info["random_within_0.9"] = f"{good}/100"

        exact = 0
        for i in range(100):
            rng = np.random.default_rng(5000 + i)
            n = 3 + i % 6
            k = int(rng.integers(1, n))
            perm = rng.permutation(n)
            M = np.zeros((n, n))
            for block in (perm[:k], perm[k:]):
                B = rng.random((block.size, block.size)) + 0.01
                M[np.ix_(block, block)] = B + B.T
            M /= M.sum(axis=1).max()
            S = SymmetricAffinity(M, tuple(range(1, n + 1)))
            p, best, _ = brute_force_partition(S)
            q = spectral_partition(S)
            if q == p and partition_objective(S, q) == best:
                exact += 1
        info["block_diagonal_exact"] = f"{exact}/100"
        assert good >= 95
        assert exact == 100


def test_c03_partition_count(criterion):
    with criterion(3, "2^(n-1)-1 candidates", 5) as info:
        counts = {}
        for n in range(2, 11):
            S = symmetrize(ConfusionMatrix(np.random.default_rng(n).random((n, n)), tuple(range(1, n + 1))))
            counts[n] = brute_force_partition(S)[2]
        info["counts"] = counts
        assert counts[4] == 7
        assert all(counts[n] == 2 ** (n - 1) - 1 for n in counts)


def test_c04_tree_and_embedding_structure(criterion):
    with criterion(4, "tree shape and LTE dimension", 120) as info:
        dims = {}
        worst = 0.0
        for C in (2, 8, 10, 19):
            ds = gaussian_classes(C, seed=C)
            tree = build_label_tree(ds, ForestConfig(), seed=C)
            assert len(tree.leaves()) == C and len(tree.split_nodes()) == C - 1
            model = train_lte(tree, ds.segment_samples(), ForestConfig(), seed=C)
            dims[C] = model.dim
            assert model.dim == 2 * (C - 1)
            for s in ds.snippets[::3]:
                for v in [embed_segment(model, x) for x in s.segments] + [embed_snippet(model, s)]:
                    assert v.shape == (2 * (C - 1),)
                    worst = max(worst, float(np.abs(v[0::2] + v[1::2] - 1).max()))
        info["dims"] = dims
        info["max_pair_error"] = f"{worst:.1e}"
        assert dims[10] == 18 and dims[19] == 36
        assert worst <= 1e-9


def test_c05_planted_hierarchy(criterion):
    with criterion(5, "planted root recovery and end-to-end accuracy", 300) as info:
        recovered = 0
        accs = []
        for seed in range(20):
            ds, planted = synth_hierarchy_dataset(8, 16, separation=4.0, sigma=0.5, snippets_per_class=20,
                                                  segments_per_snippet=10, seed=seed)
            tree = build_label_tree(ds, ForestConfig(), seed=seed)
            recovered += tree.root.partition == planted.root.partition
            cfg = ExperimentConfig([ChannelConfig("scene", ds)], seed=seed, kernel="linear")
            accs.append(run_experiment(cfg).report.accuracy)
        info["root_recovered"] = f"{recovered}/20"
        info["min_accuracy"] = f"{min(accs):.3f}"
        assert recovered >= 18
        assert min(accs) >= 0.95


def test_c06_svm_correctness(criterion):
    with criterion(6, "SMO KKT, analytic case, duality gap", 30) as info:
        worst_kkt, worst_rel, worst_abs_tight = 0.0, 0.0, 0.0
        for i in range(50):
            rng = np.random.default_rng(i)
            n = int(rng.integers(6, 30))
            X = rng.standard_normal((n, int(rng.integers(2, 6))))
            y = np.where(X[:, 0] + 0.5 * rng.standard_normal(n) > 0, 1.0, -1.0)
            y[0], y[1] = 1.0, -1.0
            kind = ("linear", "rbf", "chi2")[i % 3]
            K = gram(kind, np.abs(X) if kind == "chi2" else X)
            C = (0.1, 1.0, 10.0)[i % 3]
            svm = train_binary_svm(K, y, C, tol=1e-3)
            worst_kkt = max(worst_kkt, float(kkt_violations(svm, K).max()))
            primal_minus_dual = duality_gap(svm, K)
            dual = svm.alpha.sum() - 0.5 * float((svm.alpha * y) @ K @ (svm.alpha * y))
            worst_rel = max(worst_rel, primal_minus_dual / max(1.0, abs(dual)))
            tight = train_binary_svm(K, y, C, tol=1e-5)
            worst_abs_tight = max(worst_abs_tight, duality_gap(tight, K))
        info["max_kkt_violation"] = f"{worst_kkt:.1e}"
        info["max_relative_gap@tol1e-3"] = f"{worst_rel:.1e}"
        info["max_gap@tol1e-5"] = f"{worst_abs_tight:.1e}"

        x = np.array([[0.0], [2.0]])
        two = train_binary_svm(x @ x.T, np.array([-1.0, 1.0]), C_reg=1e6, tol=1e-9)
        info["analytic_alpha"] = np.round(two.alpha, 9).tolist()
        info["analytic_b"] = round(two.b, 9)
        assert worst_kkt <= 1e-3
        assert worst_rel <= 1e-3
        assert worst_abs_tight <= 1e-3
        np.testing.assert_allclose(two.alpha, [0.5, 0.5], atol=1e-6)
        assert abs(two.b + 1.0) <= 1e-6


def test_c07_kernel_suite(criterion):
    with criterion(7, "kernel PSD, fusion equals chi2, unit diagonal", 10) as info:
        rng = np.random.default_rng(7)
        X = rng.random((50, 10))
        X2 = rng.random((50, 6))
        grams = {"rbf": gram("rbf", X), "chi2": gram("chi2", X), "fusion": gram("fusion", [X, X2])}
        mins = {k: float(np.linalg.eigvalsh(K).min()) for k, K in grams.items()}
        info["min_eigenvalues"] = {k: f"{v:.2e}" for k, v in mins.items()}
        single = fusion_gram(ChannelSet.from_training([X]))
        diff = float(np.abs(single - grams["chi2"]).max())
        info["fusion_vs_chi2"] = f"{diff:.1e}"
        diag_ok = all(np.array_equal(np.diag(K), np.ones(50)) for K in grams.values())
        info["unit_diagonal"] = diag_ok
        assert all(v >= -1e-8 for v in mins.values())
        assert diff <= 1e-12
        assert diag_ok


def test_c08_closeness(criterion):
    with criterion(8, "closeness columns and self-category argmax", 30) as info:
        ds, _ = synth_hierarchy_dataset(8, 16, snippets_per_class=20, segments_per_snippet=10, seed=8)
        idx = np.arange(len(ds))
        scene, held = ds.subset(idx[idx % 2 == 0]), ds.subset(idx[idx % 2 == 1])
        forest = train_forest(scene.segment_samples(), ForestConfig(seed=8))
        aux = {f"aux{c}": held.segment_samples([c]).features for c in range(1, 9)}
        table = closeness(forest, aux)
        col_err = float(np.abs(table.values.sum(axis=0) - 1).max())
        argmax = [int(table.scene_classes[i]) for i in table.values.argmax(axis=0)]
        info["max_column_error"] = f"{col_err:.1e}"
        info["argmax"] = argmax
        assert col_err <= 1e-9
        assert argmax == list(range(1, 9))


FUSION_SETTINGS = dict(sigma=2.5, snippets_per_class=60, segments_per_snippet=4, test_fraction=0.5)


def test_c09_fusion_direction(criterion):
    with criterion(9, "fusion >= best single channel - 0.02", 300) as info:
        rows = []
        for seed in range(5):
            ds, _ = synth_hierarchy_dataset(8, 16, separation=4.0, sigma=FUSION_SETTINGS["sigma"],
                                            snippets_per_class=FUSION_SETTINGS["snippets_per_class"],
                                            segments_per_snippet=FUSION_SETTINGS["segments_per_snippet"],
                                            seed=seed)
            rot = rotate_dataset(ds, 1000 + seed)

            def acc(channels, kernel):
                cfg = ExperimentConfig(channels, seed=seed, kernel=kernel,
                                       test_fraction=FUSION_SETTINGS["test_fraction"])
                return run_experiment(cfg).report.accuracy

            a = acc([ChannelConfig("scene", ds)], "chi2")
            b = acc([ChannelConfig("rotated", rot)], "chi2")
            f = acc([ChannelConfig("scene", ds), ChannelConfig("rotated", rot)], "fusion")
            rows.append((a, b, f))
        info["(scene, rotated, fusion)"] = [tuple(round(v, 3) for v in r) for r in rows]
        margins = [f - max(a, b) for a, b, f in rows]
        info["min_margin"] = f"{min(margins):+.3f}"
        assert all(m >= -0.02 for m in margins)


def _tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def test_c10_determinism(criterion, tmp_path):
    with criterion(10, "run twice gives hash-identical directories", 300) as info:
        ds, _ = synth_hierarchy_dataset(4, 8, sigma=1.0, snippets_per_class=12, segments_per_snippet=5, seed=10)
        aux, _ = synth_hierarchy_dataset(8, 8, sigma=1.0, snippets_per_class=4, segments_per_snippet=5, seed=11)
        save_dataset(ds, tmp_path / "scene.csv")
        save_dataset(rotate_dataset(ds, 12), tmp_path / "rotated.csv")
        save_dataset(aux, tmp_path / "aux.csv")
        (tmp_path / "c.ini").write_text(
            "[experiment]\nkernel = fusion\nembed_folds = 4\nsvm_folds = 4\ntop_n = 3\n"
            "[channel.scene]\ndata = scene.csv\n"
            "[channel.rotated]\ndata = rotated.csv\n"
            "[channel.aux]\ndata = scene.csv\naux_data = aux.csv\n")
        hashes = {}
        for jobs in (1, 4):
            for rep in (1, 2):
                out = tmp_path / f"out_j{jobs}_r{rep}"
                code = main(["run", "--config", str(tmp_path / "c.ini"), "--seed", "3",
                             "--jobs", str(jobs), "--out", str(out)])
                assert code == 0
                hashes[(jobs, rep)] = _tree_hash(out)
        info["jobs1_repeat_identical"] = hashes[(1, 1)] == hashes[(1, 2)]
        info["jobs4_repeat_identical"] = hashes[(4, 1)] == hashes[(4, 2)]
        info["jobs1_equals_jobs4"] = hashes[(1, 1)] == hashes[(4, 1)]
        assert hashes[(1, 1)] == hashes[(1, 2)]
        assert hashes[(4, 1)] == hashes[(4, 2)]
        assert hashes[(1, 1)] == hashes[(4, 1)]
