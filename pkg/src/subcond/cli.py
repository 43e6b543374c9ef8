"""Command-line entry point: ``subcond <command> [--config FILE] [flags]``.

Settings resolve as built-in defaults <- JSON config <- flags. Every command
writes ``manifest.json`` next to its outputs; passing that manifest back as
``--config`` reproduces the outputs byte for byte.
"""
import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .datagen import FORMAT_VERSION, SyntheticSpec, gen_synthetic, read_dataset, write_dataset
from .errors import ConfigError
from .harness import (
    RESULTS_HEADER,
    TrainConfig,
    compare,
    embeddings_csv,
    evaluate,
    heldout_workflow,
    train,
)
from .layers import adapter_similarity
from .models import MODES, ModelConfig, build_model, count_params, is_ensemble, load_model, save_model

log = logging.getLogger("subcond")

COMMANDS = ("gen-data", "train", "compare", "finetune", "export-embeddings", "param-count", "adapter-sim")
MANIFEST_VERSION = 1
MODEL_KEYS = ("architecture", "hidden", "channels", "temporal_kernel", "rank", "alpha", "activation", "bias")
DEFAULT_LIFT = [4, 32]


def default_config():
    bench = SyntheticSpec().to_dict()
    bench.pop("seed")
    model = {k: v for k, v in ModelConfig().to_dict().items() if k in MODEL_KEYS}
    tr = TrainConfig().to_dict()
    tr.pop("seeds")
    return {
        "benchmark": bench,
        "model": model,
        "train": tr,
        "seed": 1,
        "seeds": [1, 2, 3],
        "condition": "subject_conditioned",
        "held_out": None,
        "finetune_trials": 100,
        "jobs": 1,
        "out_dir": None,
    }


def _merge(base, update, path=""):
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"{where}: unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def load_config(path, command):
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    # manifests are configs with provenance keys on top
    recorded = data.pop("command", command)
    if recorded != command:
        raise ConfigError(f"command: manifest was written by {recorded!r}, not {command!r}")
    data.pop("format_versions", None)
    data.pop("package_version", None)
    cfg = default_config()
    _merge(cfg, data)
    return cfg


def resolve(args):
    cfg = load_config(args.config, args.command) if args.config else default_config()
    for flag, key in (("seed", "seed"), ("condition", "condition"), ("held_out", "held_out"),
                      ("finetune_trials", "finetune_trials"), ("jobs", "jobs"), ("out_dir", "out_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "seeds", None):
        cfg["seeds"] = _parse_seeds(args.seeds)
    if getattr(args, "epochs", None) is not None:
        cfg["train"]["epochs"] = args.epochs
    if cfg["out_dir"] is None:
        cfg["out_dir"] = os.environ.get("SUBCOND_OUT_DIR", "out")
    if cfg["model"]["architecture"] == "cnn" and cfg["benchmark"]["lift"] is None:
        cfg["benchmark"]["lift"] = list(DEFAULT_LIFT)
    _validate(cfg)
    return cfg


def _parse_seeds(text):
    try:
        seeds = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"seeds: expected comma-separated integers, got {text!r}") from exc
    if not seeds:
        raise ConfigError("seeds: empty list")
    return seeds


def _validate(cfg):
    """Instantiate every section once so bad values fail before any work starts."""
    try:
        spec = benchmark_spec(cfg, cfg["seed"])
        train_cfg(cfg)
        model_cfg(cfg, spec, cfg["condition"], cfg["seed"])
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["condition"] not in MODES:
        raise ConfigError(f"condition: must be one of {MODES}")
    if not isinstance(cfg["jobs"], int) or cfg["jobs"] < 1:
        raise ConfigError("jobs: must be a positive integer")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed: must be a non-negative integer")


def _section(section, build):
    try:
        return build()
    except ConfigError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def benchmark_spec(cfg, seed):
    return _section("benchmark", lambda: SyntheticSpec.from_dict(dict(cfg["benchmark"], seed=seed)))


def train_cfg(cfg):
    return _section("train", lambda: TrainConfig.from_dict(dict(cfg["train"], seeds=cfg["seeds"])))


def model_cfg(cfg, spec, mode, seed, shape=None):
    """Bind the model section to data dimensions; ``spec`` may be a Dataset."""
    shape = spec.feature_shape if shape is None else shape

    def build():
        return ModelConfig.from_dict(dict(cfg["model"], mode=mode, input_shape=list(shape),
                                          n_classes=spec.n_classes, n_subjects=spec.n_subjects, seed=seed))

    return _section("model", build)


def base_model_cfg(cfg):
    return _section("model", lambda: ModelConfig.from_dict(dict(cfg["model"])))


# ---------------------------------------------------------------- output helpers


def _out_dir(cfg):
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)
    log.info("wrote %s", path)


def write_manifest(out, command, cfg):
    manifest = {"command": command, "package_version": __version__,
                "format_versions": {"scnd": FORMAT_VERSION, "manifest": MANIFEST_VERSION}}
    manifest.update(copy.deepcopy(cfg))
    # where outputs land does not change them; keeps manifests comparable
    manifest.pop("out_dir")
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _csv(rows):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _load_split(path, name):
    return read_dataset(path, split=name)


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg, args):
    out = _out_dir(cfg)
    train_ds, test_ds = gen_synthetic(benchmark_spec(cfg, cfg["seed"]))
    write_dataset(train_ds, out / "train.scnd")
    write_dataset(test_ds, out / "test.scnd")
    write_manifest(out, "gen-data", cfg)
    print(f"wrote {len(train_ds)} train and {len(test_ds)} test trials to {out}")


def _datasets(cfg, args):
    if args.train_file or args.test_file:
        if not (args.train_file and args.test_file):
            raise ConfigError("--train-file and --test-file must be given together")
        return _load_split(args.train_file, "train"), _load_split(args.test_file, "test")
    return gen_synthetic(benchmark_spec(cfg, cfg["seed"]))


def cmd_train(cfg, args):
    out = _out_dir(cfg)
    seed, mode = cfg["seed"], cfg["condition"]
    train_ds, test_ds = _datasets(cfg, args)
    if train_ds.shape != test_ds.shape:
        raise ConfigError("train and test files have different feature shapes")
    model = build_model(model_cfg(cfg, train_ds, mode, seed, shape=train_ds.shape))
    train(model, train_ds, train_cfg(cfg), seed)
    acc = evaluate(model, test_ds)
    counts = count_params(model)
    rows = [RESULTS_HEADER] + [[mode, seed, s, "test", repr(acc[s]), counts["total"], counts["active"]]
                               for s in sorted(k for k in acc if k != "overall")]
    _write(out / "results.csv", _csv(rows))
    save_model(model, out / "model.npz")
    write_manifest(out, "train", cfg)
    print(f"{mode} seed {seed}: test accuracy {acc['overall']:.4f}")


def cmd_compare(cfg, args):
    out = _out_dir(cfg)
    report = compare(benchmark_spec(cfg, cfg["seed"]), train_cfg(cfg), base=base_model_cfg(cfg),
                     jobs=cfg["jobs"])
    _write(out / "results.csv", report.results_csv())
    _write(out / "aggregate.csv", report.aggregate_csv())
    _write(out / "diagnostics.csv", report.diagnostics_csv())
    for seed, text in sorted(report.embeddings.items()):
        _write(out / f"embeddings_seed{seed}.csv", text)
    write_manifest(out, "compare", cfg)
    for cond, (m, s) in report.aggregate().items():
        print(f"{cond:<20} {100 * m:6.2f}% +- {100 * s:.2f}%")


def cmd_finetune(cfg, args):
    out = _out_dir(cfg)
    spec = benchmark_spec(cfg, cfg["seed"])
    tcfg = train_cfg(cfg)
    rows = [["seed", "subject", "fallback_accuracy", "finetuned_accuracy", "frozen_unchanged"]]
    for seed in cfg["seeds"]:
        r = heldout_workflow(spec, tcfg, base=base_model_cfg(cfg), seed=seed, held_out=cfg["held_out"],
                             finetune_trials=cfg["finetune_trials"])
        held = spec.n_subjects - 1 if cfg["held_out"] is None else cfg["held_out"]
        same = r["frozen_digest_before"] == r["frozen_digest_after"]
        rows.append([seed, held, repr(r["fallback_accuracy"]), repr(r["finetuned_accuracy"]), int(same)])
        save_model(r["tuned"], out / f"finetuned_seed{seed}.npz")
        print(f"seed {seed}: fallback {r['fallback_accuracy']:.4f} -> fine-tuned {r['finetuned_accuracy']:.4f}")
    _write(out / "finetune.csv", _csv(rows))
    write_manifest(out, "finetune", cfg)


def cmd_export_embeddings(cfg, args):
    out = _out_dir(cfg)
    model = load_model(args.model)
    if args.data:
        data = read_dataset(args.data)
    else:
        data = gen_synthetic(benchmark_spec(cfg, cfg["seed"]))[1]
    target = Path(args.output) if args.output else out / "embeddings.csv"
    try:
        _write(target, embeddings_csv(model, data))
    except OSError as exc:
        raise OSError(f"cannot write {target}: {exc.strerror}") from exc
    write_manifest(out, "export-embeddings", dict(cfg, model_file=str(args.model)))
    print(f"wrote {3 * len(data)} embedding rows to {target}")


def cmd_param_count(cfg, args):
    spec = benchmark_spec(cfg, cfg["seed"])
    modes = MODES if args.all else (cfg["condition"],)
    rows = [["condition", "total", "active", "shared", "adapter", "n_subjects"]]
    for mode in modes:
        c = count_params(build_model(model_cfg(cfg, spec, mode, cfg["seed"])))
        rows.append([mode, c["total"], c["active"], c["shared"], c["adapter"], c["n_subjects"]])
    sys.stdout.write(_csv(rows))


def cmd_adapter_sim(cfg, args):
    out = _out_dir(cfg)
    model = load_model(args.model)
    if is_ensemble(model) or not model.subject_layers:
        raise ConfigError("model: adapter-sim needs a subject_conditioned model")
    for i, layer in enumerate(model.subject_layers, start=1):
        sim = adapter_similarity(layer)
        rows = [["subject"] + layer.subjects] + [[s] + [repr(float(v)) for v in row]
                                                 for s, row in zip(layer.subjects, sim)]
        _write(out / f"adapter_sim_layer{i}.csv", _csv(rows))
    write_manifest(out, "adapter-sim", dict(cfg, model_file=str(args.model)))
    print(f"wrote similarity matrices for {len(model.subject_layers)} layers to {out}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "compare": cmd_compare,
    "finetune": cmd_finetune,
    "export-embeddings": cmd_export_embeddings,
    "param-count": cmd_param_count,
    "adapter-sim": cmd_adapter_sim,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="subcond", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config or a manifest.json from an earlier run")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--epochs", type=int)
        p.add_argument("-v", "--verbose", action="count", default=0)
        return p

    common(sub.add_parser("gen-data", help="write train/test SCND files"))
    p = common(sub.add_parser("train", help="train and test one condition"))
    p.add_argument("--condition", choices=MODES)
    p.add_argument("--train-file")
    p.add_argument("--test-file")
    p = common(sub.add_parser("compare", help="all four conditions over the seed list"))
    p.add_argument("--seeds", help="comma-separated, e.g. 1,2,3")
    p.add_argument("--jobs", type=int)
    p = common(sub.add_parser("finetune", help="held-out subject: fallback vs frozen-backbone adapter"))
    p.add_argument("--seeds")
    p.add_argument("--held-out", dest="held_out", type=int)
    p.add_argument("--finetune-trials", dest="finetune_trials", type=int)
    p = common(sub.add_parser("export-embeddings", help="general/adapter/fused embeddings as CSV"))
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="SCND file; default is the configured benchmark's test split")
    p.add_argument("--output")
    p = common(sub.add_parser("param-count", help="print total/active parameter counts"))
    p.add_argument("--condition", choices=MODES)
    p.add_argument("--all", action="store_true", help="all four conditions")
    p = common(sub.add_parser("adapter-sim", help="adapter cosine-similarity matrices"))
    p.add_argument("--model", required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"subcond: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"subcond: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
