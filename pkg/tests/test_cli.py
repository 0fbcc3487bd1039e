"""End-to-end command-line tests, each driving the installed entry
point in a subprocess with single-threaded kernels pinned."""

import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

SMALL_SPEC = {
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

SMALL_CONFIG = {
    "model": {"layers": [{"heads": 2, "d_head": 3},
                         {"heads": 2, "d_head": 3}]},
    "train": {"max_epochs": 12, "patience": 5, "lr": 0.05, "seed": 3},
}


def run_cli(*argv, expect=0):
    env = dict(os.environ, HGCONV_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "hgconv.cli", *argv],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == expect, (proc.stdout, proc.stderr)
    return proc


def write_json(path, doc):
    path.write_text(json.dumps(doc) + "\n", encoding="utf-8")
    return str(path)


def dir_digest(root):
    """File bytes keyed by relative path, manifests excluded (their
    duration field is the one permitted difference between reruns)."""
    root = Path(root)
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def manifest_sans_duration(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    del doc["duration_seconds"]
    return doc


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset(workdir):
    spec = write_json(workdir / "spec.json", SMALL_SPEC)
    out = workdir / "data"
    run_cli("gen", "--spec", spec, "--seed", "7", "--out", str(out))
    return out


@pytest.fixture(scope="module")
def trained(workdir, dataset):
    config = write_json(workdir / "config.json", SMALL_CONFIG)
    out = workdir / "run"
    run_cli("train", "--data", str(dataset), "--config", config,
            "--out", str(out))
    return out


class TestGen:
    def test_rerun_is_byte_identical(self, workdir):
        spec = write_json(workdir / "gen_spec.json", SMALL_SPEC)
        a, b = workdir / "gen_a", workdir / "gen_b"
        run_cli("gen", "--spec", spec, "--seed", "11", "--out", str(a))
        run_cli("gen", "--spec", spec, "--seed", "11", "--out", str(b))
        assert dir_digest(a) == dir_digest(b)
        assert (manifest_sans_duration(a / "manifest.json")
                == manifest_sans_duration(b / "manifest.json"))

    def test_three_classes_in_labels(self, workdir):
        doc = dict(SMALL_SPEC, num_classes=3)
        spec = write_json(workdir / "gen3_spec.json", doc)
        out = workdir / "gen3"
        run_cli("gen", "--spec", spec, "--seed", "0", "--out", str(out))
        classes = {line.split("\t")[1]
                   for line in (out / "labels.tsv").read_text().splitlines()}
        assert classes == {"0", "1", "2"}

    def test_scaled_citation_shape_counts(self, workdir):
        doc = {
            "node_types": [
                {"name": "paper", "count": 678, "attr_dim": 4},
                {"name": "author", "count": 164, "attr_dim": 4},
                {"name": "subject", "count": 20, "attr_dim": 4},
            ],
            "relations": [
                {"src": "author", "edge": "writes", "dst": "paper",
                 "mean_degree": 3.0},
                {"src": "subject", "edge": "describes", "dst": "paper",
                 "mean_degree": 1.0},
            ],
            "label_type": "paper",
            "num_classes": 3,
            "signal": "structure-only",
        }
        spec = write_json(workdir / "acm_spec.json", doc)
        out = workdir / "gen_acm"
        run_cli("gen", "--spec", spec, "--seed", "1", "--out", str(out))
        counts = {name: len((out / f"{name}.attrs.tsv")
                            .read_text().splitlines())
                  for name in ("paper", "author", "subject")}
        assert counts == {"paper": 678, "author": 164, "subject": 20}

    def test_existing_out_dir_needs_force(self, workdir, dataset):
        spec = write_json(workdir / "force_spec.json", SMALL_SPEC)
        proc = run_cli("gen", "--spec", spec, "--seed", "7",
                       "--out", str(dataset), expect=1)
        assert "--force" in proc.stderr
        run_cli("gen", "--spec", spec, "--seed", "7", "--out", str(dataset),
                "--force")


class TestTrain:
    def test_writes_model_history_manifest(self, trained):
        assert (trained / "model.json").is_file()
        assert (trained / "history.tsv").is_file()
        doc = manifest_sans_duration(trained / "manifest.json")
        assert doc["command"] == "train"
        assert doc["seed"] == 3
        assert sorted(doc["outputs"]) == ["history.tsv", "manifest.json",
                                          "model.json"]

    def test_default_config_is_two_layers_of_eight_by_eight(
            self, workdir, dataset):
        out = workdir / "run_default"
        run_cli("train", "--data", str(dataset), "--out", str(out),
                "--seed", "0")
        doc = json.loads((out / "model.json").read_text())
        layers = doc["config"]["model"]["layers"]
        assert len(layers) == 2
        assert all(l["heads"] == 8 and l["d_head"] == 8 for l in layers)

    def test_unknown_config_key_names_it(self, workdir, dataset):
        doc = {"train": dict(SMALL_CONFIG["train"], warmup=5)}
        config = write_json(workdir / "bad_config.json", doc)
        proc = run_cli("train", "--data", str(dataset), "--config", config,
                       "--out", str(workdir / "run_bad"), expect=1)
        assert "warmup" in proc.stderr

    def test_rerun_same_seed_identical_model(self, workdir, dataset,
                                             trained):
        config = write_json(workdir / "config2.json", SMALL_CONFIG)
        out = workdir / "run_again"
        run_cli("train", "--data", str(dataset), "--config", config,
                "--out", str(out))
        assert ((out / "model.json").read_bytes()
                == (trained / "model.json").read_bytes())
        assert ((out / "history.tsv").read_bytes()
                == (trained / "history.tsv").read_bytes())

    def test_seed_flag_overrides_config(self, workdir, dataset):
        config = write_json(workdir / "config3.json", SMALL_CONFIG)
        out = workdir / "run_seed5"
        run_cli("train", "--data", str(dataset), "--config", config,
                "--out", str(out), "--seed", "5")
        doc = json.loads((out / "model.json").read_text())
        assert doc["config"]["train"]["seed"] == 5

    def test_sweep_fans_out_per_seed(self, workdir, dataset):
        config = write_json(workdir / "config4.json", SMALL_CONFIG)
        out = workdir / "run_sweep"
        run_cli("train", "--data", str(dataset), "--config", config,
                "--out", str(out), "--sweep", "0,1")
        for seed in (0, 1):
            doc = json.loads((out / f"seed-{seed}" / "model.json")
                             .read_text())
            assert doc["config"]["train"]["seed"] == seed
        assert ((out / "seed-0" / "model.json").read_bytes()
                != (out / "seed-1" / "model.json").read_bytes())
        manifest = manifest_sans_duration(out / "manifest.json")
        assert manifest["config"]["sweep_seeds"] == [0, 1]
        assert "seed-0/model.json" in manifest["outputs"]
        assert "seed-1/manifest.json" in manifest["outputs"]


class TestEval:
    def test_writes_metrics_json(self, workdir, dataset, trained):
        out = workdir / "metrics"
        run_cli("eval", "--data", str(dataset),
                "--model", str(trained / "model.json"), "--out", str(out))
        doc = json.loads((out / "metrics.json").read_text())
        for key in ("macro_f1", "micro_f1", "ari", "nmi", "precision",
                    "recall", "nmi_normalization", "config"):
            assert key in doc
        assert doc["config"]["model"]["layers"][0]["heads"] == 2

    def test_missing_model_errors(self, workdir, dataset):
        proc = run_cli("eval", "--data", str(dataset),
                       "--model", str(workdir / "nope.json"),
                       "--out", str(workdir / "metrics_bad"), expect=1)
        assert "nope.json" in proc.stderr


class TestAblate:
    def test_no_wrc_model_lacks_residual_params(self, workdir, dataset):
        config = write_json(workdir / "config5.json", SMALL_CONFIG)
        out = workdir / "abl"
        run_cli("ablate", "--variant", "no-wrc", "--data", str(dataset),
                "--config", config, "--out", str(out))
        doc = json.loads((out / "model.json").read_text())
        assert not [n for n in doc["params"] if ".res." in n]
        assert [n for n in doc["params"] if ".micro." in n]
        assert (out / "metrics.json").is_file()
        manifest = manifest_sans_duration(out / "manifest.json")
        assert manifest["config"]["variant"] == "no-wrc"

    def test_unknown_variant_rejected(self, workdir, dataset):
        proc = run_cli("ablate", "--variant", "no-heads",
                       "--data", str(dataset),
                       "--out", str(workdir / "abl_bad"), expect=2)
        assert "no-heads" in proc.stderr


class TestGradcheck:
    def test_seed_zero_passes_and_prints_per_op(self):
        proc = run_cli("gradcheck", "--seed", "0", "--instances", "2")
        lines = [l.split("\t") for l in proc.stdout.strip().splitlines()]
        names = {row[0] for row in lines}
        assert {"matmul", "segment_softmax", "cross_entropy_sum",
                "model_2layer", "worst"} <= names
        assert all(float(row[1]) <= 1e-4 and row[2] == "ok"
                   for row in lines)


class TestExport:
    def test_attention_single_relation_beta_is_one(self, workdir, dataset,
                                                   trained):
        edges = (dataset / "author__writes__paper.edges.tsv").read_text()
        node = edges.splitlines()[0].split("\t")[1]
        out = workdir / "attn"
        run_cli("export", "--what", "attention", "--data", str(dataset),
                "--model", str(trained / "model.json"), "--out", str(out),
                "--node", node)
        text = (out / f"attention_{node}.tsv").read_text()
        assert text.splitlines()[0] == "author__writes__paper\t1.0"

    def test_attention_requires_node(self, workdir, dataset, trained):
        proc = run_cli("export", "--what", "attention",
                       "--data", str(dataset),
                       "--model", str(trained / "model.json"),
                       "--out", str(workdir / "attn_bad"), expect=1)
        assert "--node" in proc.stderr

    def test_embeddings_rows_match_type_count(self, workdir, dataset,
                                              trained):
        out = workdir / "emb"
        run_cli("export", "--what", "embeddings", "--data", str(dataset),
                "--model", str(trained / "model.json"), "--out", str(out))
        lines = (out / "embeddings.tsv").read_text().splitlines()
        assert len(lines) == SMALL_SPEC["node_types"][0]["count"]
        width = 2 * 3
        assert all(len(l.split("\t")) == 1 + width for l in lines)

    def test_projection_has_xy_and_class(self, workdir, dataset, trained):
        out = workdir / "proj"
        run_cli("export", "--what", "projection", "--data", str(dataset),
                "--model", str(trained / "model.json"), "--out", str(out))
        lines = (out / "projection.tsv").read_text().splitlines()
        assert len(lines) == SMALL_SPEC["node_types"][0]["count"]
        for line in lines:
            cols = line.split("\t")
            assert len(cols) == 4
            assert int(cols[3]) in (0, 1)


class TestDeterminism:
    def test_full_pipeline_rerun_byte_identical(self, workdir, dataset):
        config = write_json(workdir / "config6.json", SMALL_CONFIG)
        digests = []
        for tag in ("x", "y"):
            root = workdir / f"pipe_{tag}"
            run_cli("train", "--data", str(dataset), "--config", config,
                    "--out", str(root / "run"))
            run_cli("eval", "--data", str(dataset),
                    "--model", str(root / "run" / "model.json"),
                    "--out", str(root / "metrics"))
            run_cli("export", "--what", "embeddings", "--data", str(dataset),
                    "--model", str(root / "run" / "model.json"),
                    "--out", str(root / "emb"))
            digests.append(dir_digest(root))
        assert digests[0] == digests[1]
