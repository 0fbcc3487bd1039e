"""The ten release gates, one test per criterion, run at the stated
tolerances. Each test prints a single summary line with its measured
margins so the log shows how much headroom every gate has."""

import json
import math
import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from hgconv import autodiff as ad
from hgconv import baselines
from hgconv import conv
from hgconv import diagnostics
from hgconv import evaluation as ev
from hgconv import hetgraph as hg
from hgconv import train as tr
from hgconv.cli import _label_table

from test_conv import build_graph, random_instance

STRUCTURE_BENCH = hg.SyntheticSpec(
    node_types=(("paper", 300, 32), ("author", 100, 32), ("term", 50, 32)),
    relations=(("author", "writes", "paper", 6.0),
               ("term", "describes", "paper", 4.0)),
    label_type="paper", num_classes=3, signal="structure-only")

MIXED_BENCH = hg.SyntheticSpec(
    node_types=(("paper", 300, 12), ("author", 100, 8), ("term", 50, 8)),
    relations=(("author", "writes", "paper", 4.0),
               ("term", "describes", "paper", 2.0),
               ("paper", "cites", "paper", 4.0)),
    label_type="paper", num_classes=3, signal="mixed")

BENCH_LAYER = conv.LayerConfig(heads=4, d_head=8)


def bench_f1(spec, layer, train_cfg, seed, resplit=None):
    g, labels, split = hg.generate_synthetic(spec, seed)
    if resplit is not None:
        split = hg.make_split(labels, seed, train_fraction=resplit[0],
                              val_fraction=resplit[1])
    mcfg = conv.ModelConfig(label_type=spec.label_type,
                            num_classes=spec.num_classes,
                            layers=(layer, layer))
    params, _ = tr.train(g, labels, split, mcfg, train_cfg)
    classes = _label_table(g, labels, mcfg)
    _, logits, _ = conv.model_forward(g, mcfg, params)
    pred = np.argmax(logits.values[split.test], axis=1)
    f1, _ = ev.f1_scores(pred, classes[split.test], spec.num_classes)
    return f1, g, labels, split, mcfg


def test_criterion_01_gradient_suite():
    t0 = time.time()
    results = diagnostics.run_gradient_suite(seed=2026, instances=20)
    elapsed = time.time() - t0
    worst = max(results.values())
    assert worst <= 1e-4
    assert elapsed < 60.0
    print(f"criterion 1 PASS: {len(results)} gradient cases x 20 instances, "
          f"worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_02_attention_normalization():
    worst = 0.0
    segments = 0
    for trial in range(100):
        rng = np.random.default_rng(5000 + trial)
        n_types = int(rng.integers(1, 5))
        counts = tuple(int(rng.integers(2, 13)) for _ in range(n_types))
        dims = tuple(int(rng.integers(2, 5)) for _ in range(n_types))
        pairs = [(int(rng.integers(0, n_types)), int(rng.integers(0, n_types)))
                 for _ in range(int(rng.integers(1, 3)))]
        g = build_graph(rng, counts, dims, pairs,
                        p=float(rng.uniform(0.2, 0.8)))
        lcfg = conv.LayerConfig(heads=int(rng.integers(1, 4)),
                                d_head=int(rng.integers(1, 3)))
        mcfg = conv.ModelConfig(label_type="t0", num_classes=2,
                                layers=(lcfg,))
        params = conv.init_params(g, mcfg, seed=trial)
        _, _, cap = conv.model_forward(g, mcfg, params,
                                       capture_attention=True)
        for rid, (_, dst_ids, values) in cap.get("alpha", {}).items():
            n_dst = g.node_types[g.relations[rid].dst_type].count
            sums = np.zeros((n_dst, values.shape[1]))
            np.add.at(sums, dst_ids, values)
            present = np.unique(dst_ids)
            worst = max(worst, float(np.abs(sums[present] - 1.0).max()))
            segments += present.size * values.shape[1]
        for tid, (_, rows_node, values) in cap.get("beta", {}).items():
            sums = np.zeros((g.node_types[tid].count, values.shape[1]))
            np.add.at(sums, rows_node, values)
            present = np.unique(rows_node)
            worst = max(worst, float(np.abs(sums[present] - 1.0).max()))
            segments += present.size * values.shape[1]
    assert segments > 0
    assert worst <= 1e-12
    print(f"criterion 2 PASS: {segments} attention segments over 100 "
          f"graphs, worst |sum-1| {worst:.2e}")


def test_criterion_03_oracle_equivalence():
    worst_conv = 0.0
    for trial in range(50):
        g, lcfg, params = random_instance(9000 + trial)
        h0 = {t.id: ad.Tensor(g.attrs[t.id]) for t in g.node_types}
        got = conv.layer_forward(h0, g, params, lcfg, layer=1)
        arrays = {t.id: g.attrs[t.id] for t in g.node_types}
        want = baselines.dense_oracle_layer(g, arrays, params, lcfg)
        for tid in want:
            worst_conv = max(worst_conv, float(
                np.max(np.abs(got[tid].values - want[tid]))))
    assert worst_conv <= 1e-10

    worst_rgcn = 0.0
    for trial in range(20):
        rng = np.random.default_rng(9500 + trial)
        n_types = int(rng.integers(1, 4))
        counts = tuple(int(rng.integers(2, 11)) for _ in range(n_types))
        dims = tuple(int(rng.integers(2, 5)) for _ in range(n_types))
        pairs = [(int(rng.integers(0, n_types)), int(rng.integers(0, n_types)))
                 for _ in range(int(rng.integers(1, 3)))]
        g = build_graph(rng, counts, dims, pairs, p=0.4)
        mats = {r.id: rng.normal(size=(dims[r.dst_type], dims[r.src_type]))
                for r in g.relations}
        h = {t.id: g.attrs[t.id] for t in g.node_types}
        rcfg = baselines.RgcnModeConfig(
            normalization="mean" if trial % 2 == 0 else "symmetric")
        fast = baselines.rgcn_mode_forward(g, h, mats, rcfg)
        slow = baselines.dense_rgcn_oracle(g, h, mats, rcfg)
        for tid in fast:
            worst_rgcn = max(worst_rgcn, float(
                np.max(np.abs(fast[tid] - slow[tid]))))
    assert worst_rgcn <= 1e-10
    print(f"criterion 3 PASS: conv oracle max {worst_conv:.2e} over 50, "
          f"rgcn oracle max {worst_rgcn:.2e} over 20")


def test_criterion_04_edge_file_shuffle(tmp_path):
    layer = conv.LayerConfig(heads=2, d_head=3)
    for trial in range(10):
        rng = np.random.default_rng(7000 + trial)
        spec = hg.SyntheticSpec(
            node_types=(("a", int(rng.integers(40, 61)), 4),
                        ("b", int(rng.integers(5, 15)), 3)),
            relations=(("b", "links", "a", float(rng.uniform(2.0, 4.0))),
                       ("a", "refs", "a", 2.0)),
            label_type="a", num_classes=2, signal="structure-only")
        g, labels, splits = hg.generate_synthetic(spec, trial)
        root = tmp_path / f"case{trial}"
        hg.save_dataset(root, g, labels, splits)
        mcfg = conv.ModelConfig(label_type="a", num_classes=2,
                                layers=(layer, layer))

        outputs = []
        for shuffle in (False, True):
            if shuffle:
                for path in sorted(root.glob("*.edges.tsv")):
                    lines = path.read_text().splitlines()
                    order = rng.permutation(len(lines))
                    path.write_text(
                        "\n".join(lines[i] for i in order) + "\n")
            loaded, _, _ = hg.load_dataset(root)
            params = conv.init_params(loaded, mcfg, seed=trial)
            emb, logits, _ = conv.model_forward(loaded, mcfg, params)
            outputs.append((logits.values,
                            {tid: e.values for tid, e in emb.items()}))
        assert np.array_equal(outputs[0][0], outputs[1][0])
        for tid in outputs[0][1]:
            assert np.array_equal(outputs[0][1][tid], outputs[1][1][tid])
    print("criterion 4 PASS: 10 shuffled edge files, outputs bit-identical")


def test_criterion_05_rgcn_ignores_attention_params():
    for trial in range(5):
        rng = np.random.default_rng(7700 + trial)
        n_types = int(rng.integers(1, 3))
        width = 4
        counts = tuple(int(rng.integers(3, 9)) for _ in range(n_types))
        dims = (width,) * n_types
        pairs = [(int(rng.integers(0, n_types)), int(rng.integers(0, n_types)))
                 for _ in range(int(rng.integers(1, 3)))]
        g = build_graph(rng, counts, dims, pairs, p=0.5)
        lcfg = conv.LayerConfig(heads=2, d_head=2)
        mcfg = conv.ModelConfig(label_type="t0", num_classes=2,
                                layers=(lcfg,))
        params = conv.init_params(g, mcfg, seed=trial)
        h = {t.id: g.attrs[t.id] for t in g.node_types}
        rcfg = baselines.RgcnModeConfig()
        before = baselines.rgcn_mode_forward(g, h, params, rcfg)
        for name in params.names():
            if ".macro.M." not in name:
                params[name].values += rng.normal(
                    size=params[name].values.shape)
        after = baselines.rgcn_mode_forward(g, h, params, rcfg)
        for tid in before:
            assert np.array_equal(before[tid], after[tid])
    print("criterion 5 PASS: 5 instances, attention perturbation left "
          "rgcn outputs bit-identical")


def test_criterion_06_structure_benchmark():
    t0 = time.time()
    tcfg = tr.TrainConfig(max_epochs=300, patience=100, lr=0.05)
    ours, theirs = [], []
    for seed in range(5):
        f1, g, labels, split, mcfg = bench_f1(
            STRUCTURE_BENCH, BENCH_LAYER, replace(tcfg, seed=seed), seed)
        ours.append(f1)
        mlp = baselines.mlp_baseline(g.attrs[labels.node_type], labels,
                                     split, mcfg, replace(tcfg, seed=seed))
        theirs.append(mlp.macro_f1)
    elapsed = time.time() - t0
    mean_ours = float(np.mean(ours))
    mean_mlp = float(np.mean(theirs))
    assert mean_ours >= 0.90
    assert mean_ours >= mean_mlp + 0.30
    assert elapsed < 300.0
    print(f"criterion 6 PASS: macro-F1 {mean_ours:.4f} (>=0.90), mlp "
          f"{mean_mlp:.4f} (margin {mean_ours - mean_mlp:.2f} >= 0.30), "
          f"{elapsed:.0f}s")


def test_criterion_07_ablation_ordering():
    tcfg = tr.TrainConfig(max_epochs=300, patience=100, lr=0.005)
    means = {}
    for flag in (None, "no_micro", "no_macro", "no_wrc"):
        layer = BENCH_LAYER if flag is None else replace(BENCH_LAYER,
                                                         **{flag: True})
        f1s = [bench_f1(MIXED_BENCH, layer, replace(tcfg, seed=seed), seed,
                        resplit=(0.5, 0.2))[0]
               for seed in range(5)]
        means[flag or "full"] = float(np.mean(f1s))
    for flag in ("no_micro", "no_macro", "no_wrc"):
        assert means["full"] >= means[flag] - 0.01, means
    print("criterion 7 PASS: " +
          " ".join(f"{k}={v:.4f}" for k, v in means.items()))


def test_criterion_08_loss_identities():
    n, c = 12, 3
    labels = np.arange(n) % c
    ce = tr.semi_supervised_loss(ad.Tensor(np.zeros((n, c))), labels)
    ce_err = abs(float(ce.values) - n * math.log(c))
    assert ce_err <= 1e-12

    group = tr.PairGroup(relation_id=0, src_type=0, dst_type=1,
                         pos_src=np.arange(4), pos_dst=np.arange(4),
                         neg_src=np.arange(8) % 5,
                         neg_dst=np.arange(8) % 6)
    emb = {0: ad.Tensor(np.zeros((5, 4))), 1: ad.Tensor(np.zeros((6, 4)))}
    pair = tr.unsupervised_loss(emb, tr.PairSet(groups=(group,)))
    pair_err = abs(float(pair.values) / 12 - math.log(2.0))
    assert pair_err <= 1e-12
    print(f"criterion 8 PASS: uniform-logit ce off by {ce_err:.1e}, "
          f"zero-dot pair loss off by {pair_err:.1e} per pair")


def _comb2(x):
    return math.comb(int(x), 2)


def _ari_oracle(a, b):
    table = {}
    for x, y in zip(a, b):
        table[(x, y)] = table.get((x, y), 0) + 1
    rows, cols = {}, {}
    for (x, y), n in table.items():
        rows[x] = rows.get(x, 0) + n
        cols[y] = cols.get(y, 0) + n
    n = len(a)
    index = sum(_comb2(v) for v in table.values())
    row_sum = sum(_comb2(v) for v in rows.values())
    col_sum = sum(_comb2(v) for v in cols.values())
    expected = row_sum * col_sum / _comb2(n)
    max_index = (row_sum + col_sum) / 2
    if max_index == expected:
        return 1.0
    return (index - expected) / (max_index - expected)


def _entropy_oracle(counts, n):
    return -sum((c / n) * math.log(c / n) for c in counts if c)


def _nmi_oracle(a, b):
    n = len(a)
    table = {}
    for x, y in zip(a, b):
        table[(x, y)] = table.get((x, y), 0) + 1
    rows, cols = {}, {}
    for (x, y), cnt in table.items():
        rows[x] = rows.get(x, 0) + cnt
        cols[y] = cols.get(y, 0) + cnt
    h1 = _entropy_oracle(rows.values(), n)
    h2 = _entropy_oracle(cols.values(), n)
    if h1 == 0.0 and h2 == 0.0:
        return 1.0
    h12 = _entropy_oracle(table.values(), n)
    return min(max(2 * (h1 + h2 - h12) / (h1 + h2), 0.0), 1.0)


def test_criterion_09_clustering_metrics():
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(8800 + trial)
        n = int(rng.integers(5, 41))
        a = rng.integers(0, int(rng.integers(2, 6)), size=n)
        b = rng.integers(0, int(rng.integers(2, 6)), size=n)
        worst = max(worst,
                    abs(ev.ari(a, b) - _ari_oracle(a.tolist(), b.tolist())),
                    abs(ev.nmi(a, b) - _nmi_oracle(a.tolist(), b.tolist())))
        same = rng.integers(0, 4, size=n)
        assert ev.ari(same, same) == 1.0
        assert ev.nmi(same, same) == 1.0
    assert worst <= 1e-12
    print(f"criterion 9 PASS: 20 random partitions, worst oracle gap "
          f"{worst:.2e}; identical partitions exactly 1.0")


CLI_SPEC = {
    "node_types": [
        {"name": "paper", "count": 40, "attr_dim": 6},
        {"name": "author", "count": 20, "attr_dim": 6},
    ],
    "relations": [
        {"src": "author", "edge": "writes", "dst": "paper",
         "mean_degree": 3.0},
    ],
    "label_type": "paper",
    "num_classes": 2,
    "signal": "structure-only",
}

CLI_CONFIG = {
    "model": {"layers": [{"heads": 2, "d_head": 3},
                         {"heads": 2, "d_head": 3}]},
    "train": {"max_epochs": 15, "patience": 6, "lr": 0.05, "seed": 3},
}


def _cli(*argv):
    env = dict(os.environ, HGCONV_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "hgconv.cli", *argv],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, (proc.stdout, proc.stderr)


def _tree_digest(root):
    """Bytes per relative path; manifests are parsed with the duration
    dropped, everything else compared verbatim."""
    digest = {}
    for p in sorted(Path(root).rglob("*")):
        if not p.is_file():
            continue
        key = p.relative_to(root).as_posix()
        if p.name == "manifest.json":
            doc = json.loads(p.read_text())
            del doc["duration_seconds"]
            digest[key] = json.dumps(doc, sort_keys=True)
        else:
            digest[key] = p.read_bytes()
    return digest


def test_criterion_10_cli_determinism(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(CLI_SPEC) + "\n")
    config = tmp_path / "config.json"
    config.write_text(json.dumps(CLI_CONFIG) + "\n")
    data, run = tmp_path / "data", tmp_path / "run"

    def pipeline(rerun):
        force = ("--force",) if rerun else ()
        _cli("gen", "--spec", str(spec), "--seed", "7", "--out", str(data),
             *force)
        _cli("train", "--data", str(data), "--config", str(config),
             "--out", str(run), *force)
        _cli("eval", "--data", str(data), "--model", str(run / "model.json"),
             "--out", str(tmp_path / "metrics"), *force)
        _cli("ablate", "--variant", "no-macro", "--data", str(data),
             "--config", str(config), "--out", str(tmp_path / "ablation"),
             *force)
        _cli("export", "--what", "projection", "--data", str(data),
             "--model", str(run / "model.json"),
             "--out", str(tmp_path / "proj"), *force)
        return _tree_digest(tmp_path)

    first = pipeline(rerun=False)
    second = pipeline(rerun=True)
    assert first == second
    print(f"criterion 10 PASS: {len(first)} files byte-identical across "
          "reruns of every command (manifest durations excluded)")
