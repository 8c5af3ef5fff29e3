"""Experiment templates: the MI sweep (table1), depth, dimension, compression and attack roster.

Each template expands a config into independent cells, runs them on a
bounded worker pool and assembles one :class:`ReportBundle`. A failing
cell is quarantined: its row keeps the key columns, ``status=failed`` and
the exception text, and the other cells still run.
"""

from __future__ import annotations

import copy
import logging
import statistics
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import torch

from .. import __version__
from ..attacks import ALLOWED_NORMS, AttackConfig
from ..mi_estimators import KINDS, Schedule, fit_clean_estimators, mi_under_attack
from ..splitnet import CompressionCodec, accuracy, attach_codec, calibrate_codec, feature_split_index
from .pipeline import (
    CALIBRATION_SAMPLES,
    BottleneckSpec,
    EvalSet,
    TrainSpec,
    attack_split,
    compute_asr,
    dataset_for,
    resplit,
    select_eval_set,
    trained_bottleneck,
    trained_model,
)
from .report import STATUS_FAILED, STATUS_OK, PlotSpec, ReportBundle

log = logging.getLogger(__name__)

TEMPLATES = ("table1", "depth", "dimension", "compression", "attack-roster")


class ExperimentError(ValueError):
    pass


def _grid(start: float, stop: float, step: float) -> list[float]:
    n = int(round((stop - start) / step)) + 1
    return [round(start + i * step, 10) for i in range(n)]


MNIST_CNN = {"arch": "mnist-cnn", "dataset": "mnist", "arch_kwargs": {}, "epochs": 6, "seed": 0}
VGG = {"arch": "vgg-cifar", "dataset": "cifar10", "arch_kwargs": {}, "epochs": 6, "seed": 0}

ROSTER = [
    {"algo": "FGSM", "norm": "linf"},
    {"algo": "BIM", "norm": "linf"},
    {"algo": "MIM", "norm": "linf"},
    {"algo": "PGD", "norm": "linf"},
    {"algo": "PGD", "norm": "l2"},
    {"algo": "NES", "norm": "linf"},
    {"algo": "NATTACK", "norm": "linf"},
    {"algo": "SQUARE", "norm": "linf"},
    {"algo": "EATK", "norm": "l2"},
    {"algo": "SIGNOPT", "norm": "l2"},
    {"algo": "TRIANGLE", "norm": "l2"},
]

DEFAULTS: dict[str, dict] = {
    "table1": {
        "model": MNIST_CNN,
        "split_index": 2,
        "n": 1000,
        "eval_seed": 0,
        "eps_grid": _grid(0.01, 0.10, 0.01),
        "estimators": list(KINDS),
        "seeds": [0, 1, 2],
        "steps": 40,
        "attack_seed": 0,
        "mi_steps": 2000,
        "mi_batch": 256,
        "mi_lr": 1e-3,
        "pool": 2,
        "holdout": 0.3,
        "fit_on": "attacked",
    },
    "depth": {
        "model": VGG,
        "features": [0, 2, 4],
        "n": 300,
        "eval_seed": 0,
        "eps_grid": _grid(0.003, 0.015, 0.003),
        "attacks": [{"algo": "PGD", "norm": "linf", "steps": 40}, {"algo": "SQUARE", "norm": "linf", "queries": 1000}],
        "attack_seed": 0,
    },
    "dimension": {
        "model": VGG,
        "split_index": feature_split_index(2),
        "bottlenecks": [0, 12, 1],
        "strategy": "BF",
        "bottleneck_epochs": 2,
        "n": 300,
        "eval_seed": 0,
        "eps_grid": [0.003, 0.01, 0.03],
        "attacks": [{"algo": "PGD", "norm": "linf", "steps": 40}],
        "attack_seed": 0,
    },
    "compression": {
        "model": VGG,
        "split_index": feature_split_index(2),
        "approaches": ["SB", "DB", "BF", "JC", "QT", "ES"],
        "channels": 12,
        "bottleneck_epochs": 2,
        "jc_quality": 75,
        "qt_bits": 8,
        "es_bits": 8,
        "n": 200,
        "eval_seed": 0,
        "eps_grid": [0.05],
        "attacks": [{"algo": "SQUARE", "norm": "linf", "queries": 1000}, {"algo": "TRIANGLE", "norm": "l2", "queries": 1000}],
        "attack_seed": 0,
    },
    "attack-roster": {
        "model": MNIST_CNN,
        "split_index": 2,
        "n": 200,
        "eval_seed": 0,
        "eps_grid": [0.01],
        "attacks": [dict(a, steps=40, queries=1000) for a in ROSTER],
        "attack_seed": 0,
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(template: str, config: dict | None = None) -> dict:
    """Template defaults overlaid with ``config``; unknown keys are rejected."""
    if template not in DEFAULTS:
        raise ExperimentError(f"unknown template {template!r}; expected one of {TEMPLATES}")
    config = dict(config or {})
    config.pop("template", None)
    unknown = set(config) - set(DEFAULTS[template]) - {"workers"}
    if unknown:
        raise ExperimentError(f"unknown keys for template {template!r}: {sorted(unknown)}")
    merged = _merge(DEFAULTS[template], config)
    merged.setdefault("workers", 1)
    grid = [float(e) for e in merged.get("eps_grid", [])]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ExperimentError(f"eps_grid must be strictly increasing, got {grid}")
    for attack in merged.get("attacks", []):
        AttackConfig(attack["algo"], attack["norm"], 0.0)
    if merged.get("fit_on", "attacked") not in ("attacked", "clean"):
        raise ExperimentError(f"fit_on must be 'attacked' or 'clean', got {merged['fit_on']!r}")
    return merged


def train_spec(model: dict) -> TrainSpec:
    return TrainSpec(model["arch"], model["dataset"], dict(model.get("arch_kwargs", {})), int(model.get("epochs", 6)), int(model.get("seed", 0)))


def attack_config(attack: dict, eps: float, space: str, seed: int) -> AttackConfig:
    return AttackConfig(
        attack["algo"],
        attack["norm"],
        float(eps),
        space,
        steps=int(attack.get("steps", 40)),
        query_budget=int(attack.get("queries", 10_000)),
        seed=seed,
        params=dict(attack.get("params", {})),
    )


@dataclass
class Cell:
    key: dict
    run: Callable[[], list[dict] | dict]


def run_cells(cells: list[Cell], workers: int = 1) -> list[dict]:
    """Run cells on a bounded pool; rows come back in cell order."""

    def guarded(cell: Cell) -> list[dict]:
        t0 = time.perf_counter()
        try:
            out = cell.run()
            rows = out if isinstance(out, list) else [out]
            return [{**cell.key, **r, "status": STATUS_OK, "diagnostics": ""} for r in rows]
        except Exception as exc:
            log.error("cell %s failed: %s", cell.key, exc)
            log.debug("%s", traceback.format_exc())
            return [{**cell.key, "status": STATUS_FAILED, "diagnostics": f"{type(exc).__name__}: {exc}"[:500]}]
        finally:
            log.info("cell %s took %.1fs", cell.key, time.perf_counter() - t0)

    if workers <= 1:
        results = [guarded(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(guarded, cells))
    return [row for rows in results for row in rows]


def _manifest(template: str, config: dict, models: dict) -> dict:
    return {"advlatent_version": __version__, "template": template, "config": config, "models": models}


def _asr_row(split, attack: dict, eps: float, space: str, eval_set: EvalSet, seed: int) -> dict:
    results = attack_split(split, attack_config(attack, eps, space, seed), eval_set)
    return {"asr": compute_asr(results), "n": len(results), "mean_queries": statistics.fmean(r.queries_used for r in results)}


# ---------------------------------------------------------------- templates


def run_table1(config: dict) -> ReportBundle:
    spec = train_spec(config["model"])
    base, manifest = trained_model(spec)
    split = resplit(base, config["split_index"])
    ds = dataset_for(spec.dataset, base.input_shape)
    ev = select_eval_set(split, ds, config["n"], config["eval_seed"])
    schedule = Schedule(steps=config["mi_steps"], batch_size=config["mi_batch"], lr=config["mi_lr"])

    frozen = None
    if config["fit_on"] == "clean":
        frozen = fit_clean_estimators(split, ev.x, ev.labels, config["estimators"], tuple(config["seeds"]), schedule, config["pool"], config["holdout"])

    def cell(eps):
        return lambda: mi_under_attack(
            split, ev.x, ev.labels, [eps], config["estimators"], tuple(config["seeds"]), config["steps"], config["attack_seed"], schedule, config["pool"], config["holdout"], config["fit_on"], frozen
        )

    cells = [Cell({"eps": float(e)}, cell(e)) for e in config["eps_grid"]]
    rows = run_cells(cells, config["workers"])
    columns = ["eps", "estimator", "input_value", "latent_value", "input_acc", "latent_acc", "status", "diagnostics"]
    plots = [
        PlotSpec("table1_input_mi", "line", "eps", "input_value", ("estimator",), "I(Y;T) under input attacks", "nats"),
        PlotSpec("table1_latent_mi", "line", "eps", "latent_value", ("estimator",), "I(Y;T) under latent attacks", "nats"),
    ]
    models = {"base": {"key": spec.key(), "accuracy": manifest.get("accuracy"), "split_index": config["split_index"]}}
    return ReportBundle("table1", columns, rows, _manifest("table1", config, models), plots)


def run_depth(config: dict) -> ReportBundle:
    spec = train_spec(config["model"])
    base, manifest = trained_model(spec)
    ds = dataset_for(spec.dataset, base.input_shape)
    ev = select_eval_set(base, ds, config["n"], config["eval_seed"])
    targets = [("input", base)] + [(f"feature{k}", resplit(base, feature_split_index(k))) for k in config["features"]]
    cells = []
    for attack in config["attacks"]:
        for eps in config["eps_grid"]:
            for name, split in targets:
                space = "input" if name == "input" else "latent"
                key = {"eps": float(eps), "algo": attack["algo"], "norm": attack["norm"], "target": name, "space": space}
                cells.append(Cell(key, (lambda s=split, a=attack, e=eps, sp=space: _asr_row(s, a, e, sp, ev, config["attack_seed"]))))
    rows = run_cells(cells, config["workers"])
    columns = ["eps", "algo", "norm", "target", "space", "asr", "n", "mean_queries", "status", "diagnostics"]
    plots = [PlotSpec(f"depth_{a['algo'].lower()}_{a['norm']}", "line", "eps", "asr", ("target",), f"{a['algo']} ASR by depth", "ASR", {"algo": a["algo"], "norm": a["norm"]}) for a in config["attacks"]]
    models = {"base": {"key": spec.key(), "accuracy": manifest.get("accuracy")}}
    return ReportBundle("depth", columns, rows, _manifest("depth", config, models), plots)


def _bottleneck_pipeline(spec: TrainSpec, split_index: int, channels: int, strategy: str, epochs: int, seed: int):
    if channels == 0:
        base, manifest = trained_model(spec)
        split = resplit(base, split_index)
        return split, manifest.get("accuracy")
    split, manifest = trained_bottleneck(BottleneckSpec(spec, split_index, channels, strategy, epochs, seed))
    return split, manifest.get("accuracy")


def run_dimension(config: dict) -> ReportBundle:
    spec = train_spec(config["model"])
    base, _ = trained_model(spec)
    ds = dataset_for(spec.dataset, base.input_shape)
    cells = []
    models = {}
    for channels in config["bottlenecks"]:
        variant = "none" if channels == 0 else f"bn{channels}"
        split, acc = _bottleneck_pipeline(spec, config["split_index"], channels, config["strategy"], config["bottleneck_epochs"], spec.seed)
        ev = select_eval_set(split, ds, config["n"], config["eval_seed"])
        models[variant] = {"channels": channels, "latent_dim": split.latent_dim, "accuracy": acc}
        for attack in config["attacks"]:
            for eps in config["eps_grid"]:
                key = {"variant": variant, "channels": channels, "latent_dim": split.latent_dim, "clean_acc": acc, "algo": attack["algo"], "norm": attack["norm"], "eps": float(eps)}
                cells.append(Cell(key, (lambda s=split, a=attack, e=eps, v=ev: _asr_row(s, a, e, "latent", v, config["attack_seed"]))))
    rows = run_cells(cells, config["workers"])
    columns = ["variant", "channels", "latent_dim", "clean_acc", "algo", "norm", "eps", "asr", "n", "mean_queries", "status", "diagnostics"]
    plots = [PlotSpec("dimension", "bar", "eps", "asr", ("algo", "variant"), "Latent ASR by bottleneck width", "ASR")]
    return ReportBundle("dimension", columns, rows, _manifest("dimension", config, models), plots)


def _compression_pipeline(spec: TrainSpec, approach: str, config: dict, calib_x: torch.Tensor):
    split_index = config["split_index"]
    if approach in ("JC", "QT"):
        base, manifest = trained_model(spec)
        split = resplit(base, split_index)
        codec = CompressionCodec("JC", quality=config["jc_quality"]) if approach == "JC" else CompressionCodec("QT", bits=config["qt_bits"])
        split = attach_codec(split, calibrate_codec(split, codec, calib_x))
        split.eval()
        return split
    split, _ = trained_bottleneck(BottleneckSpec(spec, split_index, config["channels"], approach, config["bottleneck_epochs"], spec.seed))
    if approach == "ES":
        codec = calibrate_codec(split, CompressionCodec("ENTROPY", bits=config["es_bits"]), calib_x)
        split = attach_codec(split, codec)
        split.eval()
    return split


def run_compression(config: dict) -> ReportBundle:
    spec = train_spec(config["model"])
    base, _ = trained_model(spec)
    ds = dataset_for(spec.dataset, base.input_shape)
    calib_x = ds.train_x[:CALIBRATION_SAMPLES]
    cells = []
    models = {}
    for approach in config["approaches"]:
        split = _compression_pipeline(spec, approach.upper(), config, calib_x)
        acc = accuracy(split, ds.test_x, ds.test_y)
        ev = select_eval_set(split, ds, config["n"], config["eval_seed"])
        models[approach] = {"accuracy": acc, "latent_dim": split.latent_dim, "codec": split.codec.spec() if split.codec else None}
        for attack in config["attacks"]:
            for eps in config["eps_grid"]:
                for space in ("input", "latent"):
                    key = {"approach": approach, "clean_acc": acc, "algo": attack["algo"], "norm": attack["norm"], "eps": float(eps), "space": space}
                    cells.append(Cell(key, (lambda s=split, a=attack, e=eps, sp=space, v=ev: _asr_row(s, a, e, sp, v, config["attack_seed"]))))
    rows = run_cells(cells, config["workers"])
    columns = ["approach", "clean_acc", "algo", "norm", "eps", "space", "asr", "n", "mean_queries", "status", "diagnostics"]
    plots = [PlotSpec(f"compression_{a['algo'].lower()}", "bar", "approach", "asr", ("space",), f"{a['algo']} ASR by compression approach", "ASR", {"algo": a["algo"], "norm": a["norm"]}) for a in config["attacks"]]
    return ReportBundle("compression", columns, rows, _manifest("compression", config, models), plots)


def roster_deltas(rows: list[dict]) -> dict:
    """Per-attack input minus latent ASR (points) and their unweighted mean.

    The unweighted mean over attacks is a reporting convention; the
    aggregate published for ImageNet models does not state its weighting.
    """
    by = {}
    for r in rows:
        if r.get("status") == STATUS_OK:
            by.setdefault((r["algo"], r["norm"], r["eps"]), {})[r["space"]] = r["asr"]
    deltas = {f"{a}-{n}@{e:g}": 100.0 * (v["input"] - v["latent"]) for (a, n, e), v in sorted(by.items()) if {"input", "latent"} <= set(v)}
    mean = statistics.fmean(deltas.values()) if deltas else float("nan")
    return {"per_attack_points": deltas, "unweighted_mean_points": mean, "convention": "unweighted mean over attacks"}


def run_attack_roster(config: dict) -> ReportBundle:
    spec = train_spec(config["model"])
    base, manifest = trained_model(spec)
    split = resplit(base, config["split_index"])
    ds = dataset_for(spec.dataset, base.input_shape)
    ev = select_eval_set(split, ds, config["n"], config["eval_seed"])
    cells = []
    for attack in config["attacks"]:
        if attack["norm"] not in ALLOWED_NORMS[attack["algo"].upper()]:
            raise ExperimentError(f"{attack['algo']} does not run under {attack['norm']}")
        for eps in config["eps_grid"]:
            for space in ("input", "latent"):
                key = {"algo": attack["algo"], "norm": attack["norm"], "eps": float(eps), "space": space}
                cells.append(Cell(key, (lambda a=attack, e=eps, sp=space: _asr_row(split, a, e, sp, ev, config["attack_seed"]))))
    rows = run_cells(cells, config["workers"])
    columns = ["algo", "norm", "eps", "space", "asr", "n", "mean_queries", "status", "diagnostics"]
    plots = [PlotSpec("attack_roster", "bar", "algo", "asr", ("space",), "ASR per attack", "ASR")]
    models = {"base": {"key": spec.key(), "accuracy": manifest.get("accuracy"), "split_index": config["split_index"]}}
    bundle = ReportBundle("attack-roster", columns, rows, _manifest("attack-roster", config, models), plots)
    bundle.manifest["summary"] = roster_deltas(rows)
    return bundle


RUNNERS = {
    "table1": run_table1,
    "depth": run_depth,
    "dimension": run_dimension,
    "compression": run_compression,
    "attack-roster": run_attack_roster,
}


def run_experiment(template: str, config: dict | None = None) -> ReportBundle:
    """Resolve defaults, run every cell and return the report bundle."""
    resolved = resolve_config(template, config)
    torch.set_num_threads(1)
    return RUNNERS[template](resolved)
