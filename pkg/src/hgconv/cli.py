"""Command-line entry points: gen, train, eval, ablate, gradcheck, export.

Every run that writes files also writes a manifest.json recording the
command, the fully resolved config, the seed derivation scheme, and
every produced file. Reruns with the same inputs and seed are
byte-identical except for the manifest's duration field.

HGCONV_THREADS, when set, is exported to the BLAS/OpenMP thread count
variables before numpy loads; HGCONV_THREADS=1 forces deterministic
single-threaded kernels.
"""

import os


def _pin_threads():
    threads = os.environ.get("HGCONV_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS",
                    "NUMBA_NUM_THREADS"):
            os.environ[var] = threads


_pin_threads()

import argparse
import json
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import evaluation as ev
from . import hetgraph as hg
from .conv import ModelConfig, model_forward
from .diagnostics import TOLERANCE, run_gradient_suite
from .train import DivergenceError, TrainConfig, parse_config, train

SEED_SCHEME = ("root seed s -> init: SeedSequence(s); dropout masks: "
               "SeedSequence([s, epoch, layer, slot]); negative sampling: "
               "SeedSequence([s, epoch]); kmeans restart r: "
               "SeedSequence([s, r]); synthetic data: SeedSequence(s) with "
               "the split seed drawn from the generator stream")

VARIANTS = {"no-micro": "no_micro", "no-macro": "no_macro",
            "no-wrc": "no_wrc"}


def _write(path, text):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _prepare_out(path, force):
    out = Path(path)
    if out.exists() and not force:
        raise ValueError(f"output directory {out} exists; pass --force to "
                         "overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out, command, config, seed, inputs, outputs, started):
    doc = {
        "command": command,
        "config": config,
        "duration_seconds": round(time.time() - started, 6),
        "inputs": {k: str(v) for k, v in sorted(inputs.items())},
        "outputs": sorted(set(outputs) | {"manifest.json"}),
        "seed": seed,
        "seed_scheme": SEED_SCHEME,
        "version": __version__,
    }
    _write(out / "manifest.json",
           json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _model_json(model_cfg, train_cfg, params):
    config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    return ('{"config": ' + json.dumps(config, sort_keys=True) +
            ', "params": ' + params.to_json() + '}\n')


def _load_model(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValueError(f"model file {path} does not exist") from None
    try:
        config = doc["config"]
        model_cfg = ModelConfig.from_dict(config["model"])
        train_cfg = TrainConfig.from_dict(config["train"])
        params = ad.ParamStore.from_json(json.dumps(doc["params"]))
    except KeyError as exc:
        raise ValueError(f"model file {path} is missing {exc}") from None
    return model_cfg, train_cfg, params


def _resolve_config(args, graph, labels):
    doc = {}
    if args.config is not None:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    label_type = graph.node_types[labels.node_type].name
    model_cfg, train_cfg = parse_config(doc, label_type=label_type,
                                        num_classes=labels.num_classes)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    return model_cfg, train_cfg


def _label_table(g, labels, model_cfg):
    t = g.type_by_name(model_cfg.label_type)
    if labels.node_type != t.id:
        raise ValueError(f"labels are for type id {labels.node_type}, model "
                         f"expects {t.name} (id {t.id})")
    table = np.full(t.count, -1, dtype=np.int64)
    table[labels.ids] = labels.classes
    return table


def _test_report(g, labels, split, model_cfg, params, cluster_seed):
    split.check_against(labels)
    classes = _label_table(g, labels, model_cfg)
    t = g.type_by_name(model_cfg.label_type)
    emb, logits, _ = model_forward(g, model_cfg, params)
    pred = np.argmax(logits.values[split.test], axis=1)
    return ev.evaluate(pred, classes[split.test], labels.num_classes,
                       embeddings=emb[t.id].values[split.test],
                       cluster_seed=cluster_seed)


def _listdir(out):
    names = (p.relative_to(out).as_posix() for p in out.rglob("*")
             if p.is_file())
    return sorted(n for n in names if n != "manifest.json")


def _sweep_seeds(text):
    try:
        seeds = [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise ValueError(f"--sweep expects comma-separated seeds, got "
                         f"{text!r}") from None
    if not seeds:
        raise ValueError("--sweep needs at least one seed")
    if len(set(seeds)) != len(seeds):
        raise ValueError("--sweep seeds must be distinct")
    return seeds


def _run_sweep(args, out, started, config_echo):
    """Fan the same command out across processes, one seed per child,
    each writing into its own subdirectory."""
    seeds = _sweep_seeds(args.sweep)
    procs = []
    for seed in seeds:
        argv = [sys.executable, "-m", "hgconv.cli", args.command,
                "--data", str(args.data),
                "--out", str(out / f"seed-{seed}"),
                "--seed", str(seed)]
        if args.config is not None:
            argv += ["--config", str(args.config)]
        if getattr(args, "variant", None) is not None:
            argv += ["--variant", args.variant]
        if args.force:
            argv.append("--force")
        procs.append(subprocess.Popen(argv))
    codes = [p.wait() for p in procs]
    config_echo = dict(config_echo)
    config_echo["sweep_seeds"] = seeds
    _write_manifest(out, args.command, config_echo, None,
                    _train_inputs(args), _listdir(out), started)
    return max(codes)


def _train_inputs(args):
    inputs = {"data": args.data}
    if args.config is not None:
        inputs["config"] = args.config
    return inputs


def cmd_gen(args):
    started = time.time()
    spec_text = Path(args.spec).read_text(encoding="utf-8")
    spec = hg.SyntheticSpec.from_json(spec_text)
    out = _prepare_out(args.out, args.force)
    graph, labels, splits = hg.generate_synthetic(spec, args.seed)
    hg.save_dataset(out, graph, labels, splits)
    _write_manifest(out, "gen", json.loads(spec_text), args.seed,
                    {"spec": args.spec}, _listdir(out), started)
    return 0


def _train_and_write(args, variant=None):
    started = time.time()
    graph, labels, splits = hg.load_dataset(args.data)
    model_cfg, train_cfg = _resolve_config(args, graph, labels)
    if variant is not None:
        flag = VARIANTS[variant]
        layers = tuple(replace(layer, **{flag: True})
                       for layer in model_cfg.layers)
        model_cfg = replace(model_cfg, layers=layers)
    if args.sweep is not None:
        out = _prepare_out(args.out, args.force)
        echo = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
        if variant is not None:
            echo["variant"] = variant
        return _run_sweep(args, out, started, echo)
    out = _prepare_out(args.out, args.force)
    params, history = train(graph, labels, splits, model_cfg, train_cfg)
    _write(out / "model.json", _model_json(model_cfg, train_cfg, params))
    _write(out / "history.tsv", history.to_tsv())
    outputs = ["model.json", "history.tsv"]
    echo = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    if variant is not None:
        report = _test_report(graph, labels, splits, model_cfg, params,
                              cluster_seed=train_cfg.seed)
        echo["variant"] = variant
        _write(out / "metrics.json", ev.metrics_json(report, echo))
        outputs.append("metrics.json")
    _write_manifest(out, args.command, echo, train_cfg.seed,
                    _train_inputs(args), outputs, started)
    return 0


def cmd_train(args):
    return _train_and_write(args)


def cmd_ablate(args):
    return _train_and_write(args, variant=args.variant)


def cmd_eval(args):
    started = time.time()
    graph, labels, splits = hg.load_dataset(args.data)
    model_cfg, train_cfg, params = _load_model(args.model)
    out = _prepare_out(args.out, args.force)
    report = _test_report(graph, labels, splits, model_cfg, params,
                          cluster_seed=train_cfg.seed)
    echo = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    _write(out / "metrics.json", ev.metrics_json(report, echo))
    _write_manifest(out, "eval", echo, train_cfg.seed,
                    {"data": args.data, "model": args.model},
                    ["metrics.json"], started)
    return 0


def cmd_gradcheck(args):
    results = run_gradient_suite(seed=args.seed, instances=args.instances)
    worst = max(results.values())
    for name in sorted(results):
        err = results[name]
        status = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{name}\t{err:.6e}\t{status}")
    print(f"worst\t{worst:.6e}\t{'ok' if worst <= TOLERANCE else 'FAIL'}")
    return 0 if worst <= TOLERANCE else 1


def cmd_export(args):
    started = time.time()
    graph, labels, _ = hg.load_dataset(args.data)
    model_cfg, train_cfg, params = _load_model(args.model)
    out = _prepare_out(args.out, args.force)
    echo = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
            "what": args.what, "node": args.node, "type": args.type}
    if args.what == "attention":
        if args.node is None:
            raise ValueError("--node is required for attention export")
        record = ev.export_attention(graph, model_cfg, params, args.node,
                                     type_name=args.type)
        name = f"attention_{args.node}.tsv"
        _write(out / name, ev.attention_tsv(record))
        outputs = [name]
    else:
        t = graph.type_by_name(args.type if args.type is not None
                               else model_cfg.label_type)
        emb, _, _ = model_forward(graph, model_cfg, params)
        values = emb[t.id].values
        if args.what == "embeddings":
            _write(out / "embeddings.tsv",
                   ev.embeddings_tsv(np.arange(t.count), values))
            outputs = ["embeddings.tsv"]
        else:
            classes = _label_table(graph, labels, model_cfg)
            xy = ev.pca_project(values, dims=2, seed=train_cfg.seed)
            _write(out / "projection.tsv",
                   ev.projection_tsv(np.arange(t.count), xy, classes))
            outputs = ["projection.tsv"]
    _write_manifest(out, "export", echo, train_cfg.seed,
                    {"data": args.data, "model": args.model}, outputs,
                    started)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hgconv",
        description="Heterogeneous graph convolution toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset directory")
    p.add_argument("--spec", required=True, help="SyntheticSpec JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen)

    def add_train_flags(p):
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--config", default=None, help="config JSON file")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--sweep", default=None,
                       help="comma-separated seeds; one process per seed")
        p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="train a model")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train and evaluate an ablated model")
    p.add_argument("--variant", required=True, choices=sorted(VARIANTS))
    add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a trained model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="model.json path")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export", help="write attention/embedding artifacts")
    p.add_argument("--what", required=True,
                   choices=("attention", "embeddings", "projection"))
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--node", type=int, default=None)
    p.add_argument("--type", default=None, help="node type name")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
