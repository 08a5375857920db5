"""End-to-end acceptance suite.

One test per criterion; each asserts the stated thresholds and prints a
single summary line on success.
"""

import filecmp
import itertools
import math
import random
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.stats

from cellgraph import inference, model, preprocess, retrieval, shard_store, stats
from cellgraph.cli import EXIT_OK, main
from cellgraph.graph_build import build_graph, expand_features
from cellgraph.retrieval import Query, TaskConfig, attribute_value
from cellgraph.shard_store import ExpressionBlock

from conftest import make_record, planted_two_block
from test_cli import run_build, write_inputs
from test_inference import brute_force_core, random_instance

STAGES = ("infant", "child", "adult", "elderly")
VOCAB = {
    "tissue_general": ["blood", "lung", "brain"],
    "development_stage_category": list(STAGES) + [None],
    "sex_normalized": ["female", "male"],
    "disease_BMG_name": ["healthy", "flu", "copd"],
    "tissue": ["blood", "lung", None],
    "suspension_type": ["cell", "nucleus"],
}


def _random_records(rng: random.Random, n: int):
    return [
        make_record(
            matrix_row_idx=i,
            donor_id=f"d{rng.randrange(8)}",
            **{a: rng.choice(values) for a, values in VOCAB.items()},
        )
        for i in range(n)
    ]


def test_criterion_1_retrieval_oracle_equivalence():
    rng = random.Random(0)
    t0 = time.perf_counter()
    for trial in range(1_000):
        records = _random_records(rng, rng.randint(10, 500))

        # Phase I against a brute-force conjunctive filter
        constraints = {}
        for attr in rng.sample(sorted(VOCAB), rng.randint(0, 3)):
            pool = [v if v is not None else "unknown" for v in VOCAB[attr]]
            constraints[attr] = frozenset(rng.sample(pool, rng.randint(1, 2)))
        q = Query(constraints)
        expected = [
            i
            for i, r in enumerate(records)
            if all(attribute_value(r, a) in vals for a, vals in constraints.items())
        ]
        assert retrieval.phase1_extract(records, q) == expected

        # Phase II invariants
        cfg = TaskConfig(
            balance_field="disease_BMG_name",
            control_value="healthy",
            match_keys=("tissue_general", "development_stage_category", "sex_normalized"),
            age_key_index=1,
            age_order=STAGES,
            tolerance=rng.choice([0, 1, 2]),
            upsample=rng.random() < 0.5,
            seed=trial,
        )
        cohort = retrieval.phase2_balance(records, Query({}), cfg)
        for key, (cases, controls) in cohort.strata.items():
            assert len(cases) == len(controls) > 0
            for i in cases:
                assert attribute_value(records[i], cfg.balance_field) != cfg.control_value
            for i in controls:
                assert attribute_value(records[i], cfg.balance_field) == cfg.control_value
            for i in cases + controls:
                for j, k in enumerate(cfg.match_keys):
                    v = attribute_value(records[i], k)
                    if j == cfg.age_key_index:
                        assert abs(cfg.age_rank(v) - cfg.age_rank(key[j])) <= cfg.tolerance
                    else:
                        assert v == key[j]
        if not cfg.upsample:
            assert len(set(cohort.rows)) == len(cohort.rows)
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    print(f"\n[criterion 1] 1,000 instances matched the oracle in {elapsed:.1f}s")


def test_criterion_2_gradient_correctness():
    graph, _, _ = model.micro_instance()
    assert graph.entities.num_proteins == 6
    assert len(graph.edges.ppi) == 8
    err = model.gradient_check(step=1e-5)
    assert err <= 1e-4
    print(f"\n[criterion 2] max relative gradient error {err:.3g} <= 1e-4")


def test_criterion_3_planted_graph_reconstruction():
    graph, features = planted_two_block()
    cfg = model.ModelConfig(
        d_prime=16,
        d=16,
        mask_ratio=0.1,
        learning_rate=0.5,
        epochs=1200,
        seed=1,
        lambda_deg=0.0,
        layers_global=0,
    )
    t0 = time.perf_counter()
    trained, _ = model.train(graph, features, cfg, check_gradients=False)
    import torch

    plan = model.sample_mask(graph, cfg.mask_ratio, cfg.seed, cfg.neg_ratio)
    adj_vis = trained.visible_adjacency(plan.visible)
    x = torch.as_tensor(features, dtype=trained.text_emb.dtype)
    with torch.no_grad():
        h = trained(x, adj_vis)
    auc, recovered = model.masked_edge_auc(trained, h, plan, seed=99)
    elapsed = time.perf_counter() - t0
    assert elapsed < 300.0
    assert auc >= 0.80
    assert recovered >= 0.70
    print(
        f"\n[criterion 3] masked-edge AUC {auc:.3f} >= 0.80, "
        f"recovered {recovered:.3f} >= 0.70 in {elapsed:.0f}s"
    )


def test_criterion_4_mann_whitney_exact():
    _, p = stats.mann_whitney_u([1, 2], [3, 4])
    assert p == pytest.approx(0.3333, abs=1e-4)

    rng = np.random.default_rng(4)
    checked = 0
    for n1, n2 in itertools.product(range(1, 9), repeat=2):
        for _ in range(3):
            pool = rng.permutation(np.arange(1.0, n1 + n2 + 1))  # distinct -> no ties
            x, y = pool[:n1], pool[n1:]
            _, p_ours = stats.mann_whitney_u(x, y)
            p_ref = scipy.stats.mannwhitneyu(x, y, alternative="two-sided", method="exact").pvalue
            assert p_ours == pytest.approx(p_ref, abs=1e-12)
            checked += 1
    print(f"\n[criterion 4] exact p agreed with enumeration on {checked} cases, all n1,n2 <= 8")


def test_criterion_5_core_extraction():
    assert inference.DEFAULT_TOP_NODES == 120
    assert inference.DEFAULT_MAX_LEAVES == 3
    rng = np.random.default_rng(5)
    compared = 0
    for _ in range(500):
        n = int(rng.integers(2, 25))
        scores, weights = random_instance(rng, n)
        top = int(rng.integers(1, n + 1))
        leaves = int(rng.integers(0, 4))
        core = inference.extract_core(scores, weights, top, leaves)
        # connected and within the node budget
        assert len(core.nodes) <= top
        if len(core.nodes) > 1:
            adj = {g: set() for g in core.nodes}
            for a, b, _ in core.edges:
                adj[a].add(b)
                adj[b].add(a)
            seen, stack = {core.nodes[0]}, [core.nodes[0]]
            while stack:
                g = stack.pop()
                for h in adj[g]:
                    if h not in seen:
                        seen.add(h)
                        stack.append(h)
            assert seen == set(core.nodes)
        if n <= 12:
            want = brute_force_core(scores, weights, top, leaves)
            assert core.nodes == want.nodes
            assert core.flags == want.flags
            assert [(a, b) for a, b, _ in core.edges] == [(a, b) for a, b, _ in want.edges]
            compared += 1
    print(f"\n[criterion 5] 500 graphs connected and bounded; {compared} matched the brute-force pruner")


def test_criterion_6_shard_store(tmp_path, monkeypatch):
    rng = np.random.default_rng(6)
    for i in range(100):
        m = rng.random((int(rng.integers(1, 30)), int(rng.integers(1, 20)))).astype("<f4")
        p1, p2 = tmp_path / f"a{i}.npy", tmp_path / f"b{i}.npy"
        shard_store.write_npy(p1, m)
        back = shard_store.read_npy(p1)
        assert np.array_equal(back, m)
        shard_store.write_npy(p2, back)
        assert p1.read_bytes() == p2.read_bytes()
        raw = p1.read_bytes()
        assert raw[:6] == b"\x93NUMPY" and raw[6:8] == b"\x01\x00"
        header_len = int.from_bytes(raw[8:10], "little")
        assert (10 + header_len) % 64 == 0
        assert raw[10 + header_len - 1 : 10 + header_len] == b"\n"

    corpus = rng.random((50_000, 4)).astype("<f4")
    manifest = shard_store.write_shards(corpus, 10_000, tmp_path / "corpus")
    indices = rng.integers(0, 50_000, size=1_000).tolist()
    opened = []
    real_open = open

    def counting_open(path, *args, **kwargs):
        if str(path).endswith(".npy"):
            opened.append(str(path))
        return real_open(path, *args, **kwargs)

    monkeypatch.setattr("cellgraph.shard_store.open", counting_open, raising=False)
    block = shard_store.read_rows(manifest, indices, tmp_path / "corpus")
    touched = {manifest.locate(i)[0] for i in indices}
    assert len(touched) <= 6
    assert len(opened) == len(set(opened)) == len(touched)
    assert np.array_equal(block.values, corpus[indices])
    print(
        f"\n[criterion 6] 100 byte-exact round trips; 1,000 reads opened "
        f"{len(set(opened))} shard files (<= 6)"
    )


def test_criterion_7_preprocessing_constants():
    assert preprocess.PreprocessConfig().target_sum == 10_000
    rng = np.random.default_rng(7)
    counts = rng.integers(1, 50, size=(40, 30)).astype(float)
    logged = preprocess.normalize(counts)
    sums = np.expm1(logged).sum(axis=1)
    assert np.allclose(sums, 10_000.0, atol=1e-3)

    picked = preprocess.select_hvg(counts, 10)
    var = counts.var(axis=0)
    expected = sorted(sorted(range(30), key=lambda j: (-var[j], j))[:10])
    assert picked == expected

    worst = 0.0
    for _ in range(20):
        m = rng.random((int(rng.integers(3, 11)), int(rng.integers(2, 11))))
        k = int(rng.integers(1, min(m.shape)))
        res = preprocess.pca(m, k)
        centered = m - m.mean(axis=0)
        evals, evecs = np.linalg.eigh(centered.T @ centered)
        order = np.argsort(-evals)
        if evals[order[k - 1]] - (evals[order[k]] if k < len(evals) else 0.0) < 1e-8:
            continue  # degenerate leading block: subspace not unique
        ours = res.components.T
        ref = evecs[:, order[:k]]
        gap = np.linalg.norm(ours @ ours.T - ref @ ref.T)
        worst = max(worst, gap)
        assert gap < 1e-6
    print(f"\n[criterion 7] constants honored; worst PCA subspace gap {worst:.2e} < 1e-6")


def test_criterion_8_downstream_classification():
    rng = np.random.default_rng(5)
    n_feat, n_donors, per_donor = 20, 20, 15
    mapping = [(f"f{i}", f"t{i}", f"p{i}") for i in range(n_feat)]
    ppi = [
        (f"p{i}", f"p{j}")
        for i in range(n_feat)
        for j in range(i + 1, n_feat)
        if rng.random() < 0.2
    ]
    graph = build_graph(mapping, ppi, None)

    counts, records, labels = [], [], []
    for d in range(n_donors):
        for r in range(per_donor):
            row = rng.poisson(5.0, n_feat).astype(float) + 1.0
            if d % 2 == 1:
                row[:5] += 12.0  # planted class signal on 5 transcripts
            counts.append(row)
            records.append(make_record(donor_id=f"d{d}", matrix_row_idx=len(counts) - 1))
            labels.append(d % 2)
    counts = np.asarray(counts)
    labels = np.asarray(labels)

    train_idx, test_idx = retrieval.donor_split(records, 0.3, 0.4, seed=0)
    train_donors = {records[i].donor_id for i in train_idx}
    test_donors = {records[i].donor_id for i in test_idx}
    assert not train_donors & test_donors  # no donor leakage

    logged = preprocess.normalize(counts)
    mu = logged[train_idx].mean(axis=0)
    sd = logged[train_idx].std(axis=0)
    sd[sd == 0] = 1.0
    standardized = (logged - mu) / sd
    feats = expand_features(
        ExpressionBlock(list(range(len(counts))), standardized), graph.entities
    )

    cfg = model.ModelConfig(
        d_prime=8, d=8, mask_ratio=0.2, epochs=30, seed=0, learning_rate=0.05
    )
    pretrained, _ = model.train(graph, feats[train_idx][:5], cfg, check_gradients=False)

    head = inference.DownstreamHead(cfg, graph, 2)
    inference.train_classifier(
        pretrained, head, feats[train_idx], labels[train_idx], epochs=200, seed=0
    )
    train_acc = float(
        np.mean(inference.classify(feats[train_idx], pretrained, head).argmax(1) == labels[train_idx])
    )
    test_acc = float(
        np.mean(inference.classify(feats[test_idx], pretrained, head).argmax(1) == labels[test_idx])
    )
    assert train_acc >= 0.95
    assert test_acc >= 0.85
    print(f"\n[criterion 8] train accuracy {train_acc:.3f} >= 0.95, test accuracy {test_acc:.3f} >= 0.85")


def test_criterion_9_cli_determinism(tmp_path):
    def run_pipeline(tag: str) -> dict[str, Path]:
        root = tmp_path / tag
        root.mkdir()
        write_inputs(root)
        code, built = run_build(root)
        assert code == EXIT_OK
        cohort_dir = root / "cohort"
        assert main(
            [
                "query",
                "--attrs", str(built / "attributes.csv"),
                "--conditions", "{}",
                "--label-column", "disease_BMG_name",
                "--output-dir", str(cohort_dir),
            ]
        ) == EXIT_OK
        split_dir = root / "split"
        assert main(
            ["split", "--attrs", str(built / "attributes.csv"), "--output-dir", str(split_dir)]
        ) == EXIT_OK
        pre_dir = root / "pre"
        assert main(
            [
                "pretrain",
                "--data-dir", str(built / "shards"),
                "--graph", str(built / "graph.json"),
                "--cohort", str(cohort_dir / "cohort.json"),
                "--model-config", '{"d_prime": 4, "d": 4, "mask_ratio": 0.3}',
                "--epochs", "5",
                "--output-dir", str(pre_dir),
            ]
        ) == EXIT_OK
        infer_dir = root / "infer"
        assert main(
            [
                "infer-core",
                "--data-dir", str(built / "shards"),
                "--graph", str(built / "graph.json"),
                "--cohort", str(cohort_dir / "cohort.json"),
                "--checkpoint", str(pre_dir / "checkpoint.bin"),
                "--control-label", "healthy",
                "--head-epochs", "10",
                "--output-dir", str(infer_dir),
            ]
        ) == EXIT_OK
        outputs = {}
        for d in (built, cohort_dir, split_dir, pre_dir, infer_dir):
            for f in sorted(d.rglob("*")):
                # resolved-config files echo the invocation, which includes
                # run-specific absolute paths; everything else must match
                if f.is_file() and not f.name.endswith("_config.json"):
                    outputs[str(f.relative_to(root))] = f
        return outputs

    a = run_pipeline("run_a")
    b = run_pipeline("run_b")
    assert a.keys() == b.keys()
    for rel in a:
        assert filecmp.cmp(a[rel], b[rel], shallow=False), f"output differs: {rel}"
    print(f"\n[criterion 9] {len(a)} pipeline outputs byte-identical across reruns")
