"""``advlatent`` command line: theory campaigns, model packaging, attacks, MI tables,
harness endpoints and experiment reports.

Every subcommand accepts ``--config file.toml``; keys of the file (dashes or
underscores) become option defaults and explicit flags still win. Every
run writes a manifest JSON recording all resolved options.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from .. import __version__

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("advlatent")

DATASET_ALIASES = {"mnist-test": "mnist", "cifar10-test": "cifar10"}


class CLIError(Exception):
    pass


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise CLIError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise CLIError(f"invalid config {path}: {exc}") from exc


def write_manifest(path, payload: dict) -> Path:
    from .report import manifest_json

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest_json({"advlatent_version": __version__, **payload}))
    return path


def _manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _options(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config_data")}


def _write_csv(path, columns: list[str], rows: list[dict]) -> None:
    from .report import _cell

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_cell(r.get(c)) for c in columns])


def _dataset_of(manifest: dict, override: str | None) -> str:
    name = override or manifest.get("dataset")
    if not name:
        raise CLIError("package does not record its dataset; pass --data")
    return DATASET_ALIASES.get(name, name)


# ---------------------------------------------------------------- subcommands


def cmd_theory(args) -> int:
    from ..ib_oracle import run_campaign

    t0 = time.perf_counter()
    report = run_campaign(args.campaign, args.trials, args.seed, args.max_support, args.distortion_tol)
    report["seconds"] = round(time.perf_counter() - t0, 3)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
        write_manifest(_manifest_path(args.out), {"command": "theory", "options": _options(args), "result": report})
    return 0 if report["violations"] == 0 else 1


def _train_spec_from_args(args):
    from ..splitnet import VGG_MNIST_KWARGS
    from .pipeline import TrainSpec

    dataset = args.dataset or ("mnist" if args.arch == "mnist-cnn" else "cifar10")
    dataset = DATASET_ALIASES.get(dataset, dataset)
    kwargs = dict(VGG_MNIST_KWARGS) if args.arch == "vgg-cifar" and dataset == "mnist" else {}
    return TrainSpec(args.arch, dataset, kwargs, args.epochs, args.seed)


def cmd_split(args) -> int:
    from ..splitnet import accuracy, attach_bottleneck, attach_codec, calibrate_codec, parse_codec, save_package
    from .pipeline import CALIBRATION_SAMPLES, dataset_for, resplit, trained_model

    spec = _train_spec_from_args(args)
    base, base_manifest = trained_model(spec)
    split = resplit(base, args.split_index)
    if args.bottleneck_channels:
        split = attach_bottleneck(split, args.bottleneck_channels, identity=True)
    ds = dataset_for(spec.dataset, base.input_shape)
    if args.codec:
        split = attach_codec(split, calibrate_codec(split, parse_codec(args.codec), ds.train_x[:CALIBRATION_SAMPLES]))
    split.eval()
    acc = accuracy(split, ds.test_x, ds.test_y)
    extra = {"dataset": spec.dataset, "accuracy": acc, "seed": args.seed, "base": spec.key()}
    arch = spec.arch_spec()
    out = Path(args.out)
    manifest = save_package(split, out, arch, "full", extra)
    written = [str(out)]
    if args.halves:
        for role in ("mobile", "local"):
            path = out.with_name(f"{out.stem}.{role}{out.suffix}")
            save_package(split, path, arch, role, extra)
            written.append(str(path))
    write_manifest(_manifest_path(out), {"command": "split", "options": _options(args), "package": manifest, "files": written})
    print(json.dumps({"files": written, "accuracy": acc, "latent_shape": list(split.latent_shape)}, indent=2))
    return 0


def cmd_train_bottleneck(args) -> int:
    from ..splitnet import ArchSpec, BottleneckTrainingStrategy, attach_bottleneck, load_package, save_package, split_model, train_bottleneck
    from .pipeline import dataset_for

    split, manifest = load_package(args.model)
    if manifest["role"] != "full":
        raise CLIError("train-bottleneck needs a full package")
    channels = args.channels or (split.bottleneck.channels if split.bottleneck is not None else None)
    if not channels:
        raise CLIError("package has no bottleneck; pass --channels")
    teacher = split_model(split.graph, split.split_index)
    student = attach_bottleneck(teacher, channels)
    ds = dataset_for(_dataset_of(manifest, args.data), split.input_shape)
    strategy = BottleneckTrainingStrategy.make(args.strategy, args.epochs, seed=args.seed)
    trained, report = train_bottleneck(student, strategy, ds, teacher)
    if split.codec is not None:
        trained.codec = split.codec
    arch = ArchSpec(manifest["config"]["arch"], manifest["config"].get("arch_kwargs") or {})
    extra = {"dataset": manifest.get("dataset"), "accuracy": report.accuracy, "seed": args.seed, "training": report.as_dict()}
    out = Path(args.out)
    pkg = save_package(trained, out, arch, "full", extra)
    write_manifest(_manifest_path(out), {"command": "train-bottleneck", "options": _options(args), "package": pkg})
    print(json.dumps(report.as_dict() | {"out": str(out)}, indent=2))
    return 0 if report.converged else 2


def cmd_attack(args) -> int:
    from ..attacks import AttackConfig
    from ..splitnet import load_package
    from .pipeline import attack_split, compute_asr, dataset_for, select_eval_set

    split, manifest = load_package(args.model)
    if manifest["role"] != "full":
        raise CLIError("attacks need a full package")
    ds = dataset_for(_dataset_of(manifest, args.data), split.input_shape)
    ev = select_eval_set(split, ds, args.n, args.eval_seed)
    config = AttackConfig(args.algo, args.norm, args.eps, args.space, args.steps, args.queries, args.seed)
    results = attack_split(split, config, ev)
    rows = [r.row() for r in results]
    _write_csv(args.out, ["sample_id", "algo", "space", "norm", "eps", "success", "queries", "achieved_norm"], rows)
    asr = compute_asr(results)
    write_manifest(_manifest_path(args.out), {"command": "attack", "options": _options(args), "attack": config.as_dict(), "asr": asr, "n": len(results), "model": manifest["config_hash"]})
    print(json.dumps({"asr": asr, "n": len(results), "out": args.out}))
    return 0


def cmd_mi_estimate(args) -> int:
    from ..mi_estimators import Schedule, mi_under_attack
    from ..splitnet import load_package
    from .pipeline import dataset_for, eps_grid, select_eval_set

    if args.attack.lower() != "pgd-linf":
        raise CLIError("mi-estimate supports --attack pgd-linf")
    split, manifest = load_package(args.model)
    ds = dataset_for(_dataset_of(manifest, args.data), split.input_shape)
    ev = select_eval_set(split, ds, args.n, args.eval_seed)
    kinds = [k.strip() for k in args.estimators.split(",") if k.strip()]
    schedule = Schedule(steps=args.mi_steps)
    rows = mi_under_attack(split, ev.x, ev.labels, eps_grid(args.eps_grid), kinds, tuple(range(args.seeds)), args.steps, args.seed, schedule, fit_on=args.fit_on)
    columns = ["eps", "estimator", "input_value", "latent_value", "input_acc", "latent_acc"]
    _write_csv(args.out, columns, rows)
    write_manifest(_manifest_path(args.out), {"command": "mi-estimate", "options": _options(args), "schedule": schedule.__dict__, "model": manifest["config_hash"]})
    print(json.dumps({"rows": len(rows), "out": args.out}))
    return 0


def cmd_serve_edge(args) -> int:
    from ..harness import listen, run_edge_endpoint
    from ..splitnet import load_package

    split, manifest = load_package(args.model)
    server = listen(args.host, args.port)
    print(json.dumps({"listening": list(server.getsockname())}), flush=True)
    stats = run_edge_endpoint(split, server, args.decision_only, args.sessions)
    print(json.dumps({"frames": stats.frames, "rejected": stats.rejected}))
    return 0


def cmd_serve_mobile(args) -> int:
    from ..datasets import load_dataset
    from ..harness import parse_address, run_mobile_endpoint
    from ..splitnet import load_package
    from .pipeline import adapt_inputs

    split, manifest = load_package(args.model)
    ds = load_dataset(_dataset_of(manifest, args.data))
    x = adapt_inputs(ds.test_x[: args.n], split.input_shape)
    y = ds.test_y[: args.n]
    result = run_mobile_endpoint(split, x, parse_address(args.connect))
    correct = sum(int(p == int(t)) for p, t in zip(result.predictions, y))
    summary = {"sent": len(result.predictions), "accuracy": correct / max(1, len(result.predictions)), "aborted": result.aborted, "error": result.error}
    if args.out:
        _write_csv(args.out, ["index", "label", "prediction"], [{"index": i, "label": int(y[i]), "prediction": p} for i, p in enumerate(result.predictions)])
        write_manifest(_manifest_path(args.out), {"command": "serve-mobile", "options": _options(args), "summary": summary})
    print(json.dumps(summary))
    return 1 if result.aborted else 0


def cmd_intercept(args) -> int:
    from ..attacks import ALLOWED_NORMS, AttackConfig
    from ..harness import listen, parse_address, run_interceptor

    algo = args.algo.upper()
    norm = args.norm or ALLOWED_NORMS.get(algo, ("linf",))[0]
    config = AttackConfig(algo, norm, args.eps, "latent", args.steps, args.queries, args.seed) if args.eps > 0 else None
    white_box = None
    if args.model:
        from ..splitnet import load_package

        white_box, _ = load_package(args.model)
    listener = listen(args.host, args.listen)
    print(json.dumps({"listening": list(listener.getsockname())}), flush=True)
    stats = run_interceptor(listener, parse_address(args.connect), config, args.num_classes, white_box)
    summary = {"frames": stats.frames, "successes": stats.successes, "mean_queries": sum(stats.queries) / max(1, len(stats.queries))}
    if args.out:
        _write_csv(args.out, ["sample_id", "algo", "space", "norm", "eps", "success", "queries", "achieved_norm"], [r.row() for r in stats.results])
        write_manifest(_manifest_path(args.out), {"command": "intercept", "options": _options(args), "summary": summary})
    print(json.dumps(summary))
    return 0


def cmd_report(args) -> int:
    from .experiments import resolve_config, run_experiment
    from .report import emit_plots, export_results

    config = dict(args.config_data or {})
    template = args.template or config.get("template")
    if not template:
        raise CLIError("pass --template or set `template` in the config")
    if args.workers:
        config["workers"] = args.workers
    resolve_config(template, config)
    bundle = run_experiment(template, config)
    files = export_results(bundle, args.out, args.format)
    if not args.no_plots:
        files += emit_plots(bundle, args.out)
    print(json.dumps({"template": template, "complete": bundle.complete, "failed_cells": len(bundle.failed), "files": [str(f) for f in files]}, indent=2))
    return 0 if bundle.complete else 3


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advlatent", description=__doc__.split("\n\n")[0].replace("\n", " "))
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML file whose keys become option defaults")
        p.set_defaults(func=func)
        return p

    p = add("theory", cmd_theory, "exact information-theory campaigns on random finite chains")
    p.add_argument("--campaign", choices=["dpi", "lemma2", "thm2", "cor1"], required=True)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-support", type=int, default=8)
    p.add_argument("--distortion-tol", type=float, default=1e-6)
    p.add_argument("--out")

    p = add("split", cmd_split, "train (cached) a classifier and package it split at an index")
    p.add_argument("--arch", choices=["mnist-cnn", "vgg-cifar"], required=True)
    p.add_argument("--split-index", type=int, required=True)
    p.add_argument("--bottleneck-channels", type=int, default=0)
    p.add_argument("--codec", help="qt:B, jc:Q or entropy:B")
    p.add_argument("--dataset", default=None, help="mnist or cifar10 (default: the arch's own dataset)")
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--halves", action="store_true", help="also write mobile and local half packages")
    p.add_argument("--out", required=True)

    p = add("train-bottleneck", cmd_train_bottleneck, "train the bottleneck of a package")
    p.add_argument("--model", required=True)
    p.add_argument("--strategy", choices=["sb", "db", "bf", "es", "SB", "DB", "BF", "ES"], required=True)
    p.add_argument("--channels", type=int, default=0)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data")
    p.add_argument("--out", required=True)

    p = add("attack", cmd_attack, "attack the input or latent of a packaged model")
    p.add_argument("--model", required=True)
    p.add_argument("--space", choices=["input", "latent"], required=True)
    p.add_argument("--algo", required=True)
    p.add_argument("--norm", choices=["l2", "linf"], required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--queries", type=int, default=10_000)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--data")
    p.add_argument("--out", required=True)

    p = add("mi-estimate", cmd_mi_estimate, "MI estimates of I(Y;T) under PGD attacks, per eps and estimator")
    p.add_argument("--model", required=True)
    p.add_argument("--attack", default="pgd-linf")
    p.add_argument("--eps-grid", default="0.01:0.10:0.01")
    p.add_argument("--estimators", default="mine,nwj,cpc,club,doe")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--steps", type=int, default=40, help="PGD iterations")
    p.add_argument("--mi-steps", type=int, default=2000, help="estimator training steps")
    p.add_argument("--fit-on", choices=["attacked", "clean"], default="attacked", help="fit estimators per cell on attacked pairs, or once on clean pairs")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--data")
    p.add_argument("--out", required=True)

    p = add("serve-edge", cmd_serve_edge, "classify latent frames received over TCP")
    p.add_argument("--model", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--decision-only", action="store_true")
    p.add_argument("--sessions", type=int, default=1)

    p = add("serve-mobile", cmd_serve_mobile, "send test-set latents to an edge endpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--connect", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--out")

    p = add("intercept", cmd_intercept, "man-in-the-middle that perturbs latent frames")
    p.add_argument("--listen", type=int, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--connect", required=True)
    p.add_argument("--algo", default="square")
    p.add_argument("--norm", choices=["l2", "linf"])
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--queries", type=int, default=10_000)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--model", help="white-box package of the local half (gradient attacks)")
    p.add_argument("--out")

    p = add("report", cmd_report, "run an experiment template and export CSV, manifest and plots")
    p.add_argument("--template", choices=["table1", "depth", "dimension", "compression", "attack-roster"])
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--workers", type=int, default=0)
    p.add_argument("--no-plots", action="store_true")
    return parser


def _subcommands(parser: argparse.ArgumentParser) -> dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def parse_args(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv`` after turning the ``--config`` file's keys into defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    data = load_config(known.config) if known.config else {}
    subs = _subcommands(parser)
    command = next((tok for tok in rest if tok in subs), None)
    if data and command is not None and command != "report":
        sub = subs[command]
        dests = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in data.items():
            dest = key.replace("-", "_")
            if dest not in dests or dest in ("help", "config"):
                raise CLIError(f"unknown config key {key!r} for {command}")
            defaults[dest] = value
            dests[dest].required = False
        sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    args.config_data = data
    return args


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(parser, argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
        return int(args.func(args) or 0)
    except CLIError as exc:
        print(f"advlatent: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"advlatent: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
