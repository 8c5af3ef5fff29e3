"""Trained-model cache, evaluation sets and attack cells shared by experiments and the CLI."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from ..attacks import AttackConfig, AttackResult, Oracle, run_attack
from ..datasets import Dataset, data_root, load_dataset
from ..splitnet import (
    ArchSpec,
    BottleneckTrainingStrategy,
    SplitModel,
    accuracy,
    attach_bottleneck,
    load_package,
    save_package,
    split_model,
    train_bottleneck,
    train_classifier,
)
from ..splitnet.package import config_hash

log = logging.getLogger(__name__)

# latents used to calibrate a codec's value range
CALIBRATION_SAMPLES = 512


class EvalError(ValueError):
    pass


def adapt_inputs(x: torch.Tensor, input_shape) -> torch.Tensor:
    """Zero-pad images (centred) up to a model's input size, e.g. MNIST 28 -> 32."""
    c, h, w = input_shape
    if tuple(x.shape[1:]) == (c, h, w):
        return x
    if x.shape[1] != c or x.shape[2] > h or x.shape[3] > w:
        raise EvalError(f"cannot adapt inputs of shape {tuple(x.shape[1:])} to {tuple(input_shape)}")
    dh, dw = h - x.shape[2], w - x.shape[3]
    return F.pad(x, (dw // 2, dw - dw // 2, dh // 2, dh - dh // 2))


def dataset_for(name: str, input_shape) -> Dataset:
    ds = load_dataset(name)
    return Dataset(ds.name, adapt_inputs(ds.train_x, input_shape), ds.train_y, adapt_inputs(ds.test_x, input_shape), ds.test_y)


def model_cache() -> Path:
    return data_root() / "models"


@dataclass(frozen=True)
class TrainSpec:
    """Everything that determines a trained classifier."""

    arch: str
    dataset: str
    arch_kwargs: dict = field(default_factory=dict)
    epochs: int = 6
    seed: int = 0
    max_lr: float = 5e-3
    batch_size: int = 128

    def key(self) -> str:
        return config_hash(asdict(self))[:16]

    def arch_spec(self) -> ArchSpec:
        return ArchSpec(self.arch, dict(self.arch_kwargs))


def trained_model(spec: TrainSpec, cache: Path | None = None) -> tuple[SplitModel, dict]:
    """Train (or load from cache) the unsplit classifier; returned as a split at index 1."""
    cache = cache or model_cache()
    path = cache / f"{spec.arch}-{spec.dataset}-{spec.key()}.pkg"
    if path.exists():
        split, manifest = load_package(path)
        return split, manifest
    torch.set_num_threads(1)
    graph = spec.arch_spec().build()
    ds = dataset_for(spec.dataset, graph.input_shape)
    log.info("training %s on %s (%d epochs)", spec.arch, spec.dataset, spec.epochs)
    train_classifier(graph, ds.train_x, ds.train_y, spec.epochs, spec.batch_size, spec.max_lr, spec.seed)
    graph.eval()
    acc = accuracy(graph, ds.test_x, ds.test_y)
    split = split_model(graph, 1)
    manifest = save_package(split, path, spec.arch_spec(), extra={"train": asdict(spec), "accuracy": acc, "dataset": spec.dataset})
    split.eval()
    for p in split.parameters():
        p.requires_grad_(False)
    return split, manifest


def resplit(base: SplitModel, split_index: int) -> SplitModel:
    out = split_model(base.graph, split_index)
    out.eval()
    return out


@dataclass(frozen=True)
class BottleneckSpec:
    base: TrainSpec
    split_index: int
    channels: int
    strategy: str = "BF"
    epochs: int = 2
    seed: int = 0

    def key(self) -> str:
        return config_hash({**asdict(self), "base": self.base.key()})[:16]


def trained_bottleneck(spec: BottleneckSpec, cache: Path | None = None) -> tuple[SplitModel, dict]:
    cache = cache or model_cache()
    path = cache / f"{spec.base.arch}-bn{spec.channels}-{spec.strategy.lower()}-{spec.key()}.pkg"
    if path.exists():
        return load_package(path)
    torch.set_num_threads(1)
    base, _ = trained_model(spec.base, cache)
    teacher = resplit(base, spec.split_index)
    student = attach_bottleneck(teacher, spec.channels)
    ds = dataset_for(spec.base.dataset, base.input_shape)
    strategy = BottleneckTrainingStrategy.make(spec.strategy, spec.epochs, seed=spec.seed)
    trained, report = train_bottleneck(student, strategy, ds, teacher)
    save_package(trained, path, spec.base.arch_spec(), extra={"bottleneck": asdict(spec) | {"base": spec.base.key()}, "accuracy": report.accuracy, "report": report.as_dict()})
    return load_package(path)


@dataclass
class EvalSet:
    """Correctly classified test samples, in seeded-shuffle order."""

    dataset: str
    sample_ids: list[int]
    labels: torch.Tensor
    seed: int
    x: torch.Tensor

    def __len__(self) -> int:
        return len(self.sample_ids)


def select_eval_set(model, dataset: Dataset, n: int, seed: int = 0, batch_size: int = 500) -> EvalSet:
    """First ``n`` correctly classified test samples under a seeded shuffle."""
    order = torch.randperm(dataset.test_x.shape[0], generator=torch.Generator().manual_seed(seed))
    chosen: list[int] = []
    with torch.no_grad():
        for i in range(0, order.numel(), batch_size):
            idx = order[i : i + batch_size]
            pred = model(dataset.test_x[idx]).argmax(1)
            chosen += [int(j) for j, ok in zip(idx, pred == dataset.test_y[idx]) if ok]
            if len(chosen) >= n:
                break
    if len(chosen) < n:
        raise EvalError(f"only {len(chosen)} correctly classified samples available, {n} requested")
    ids = chosen[:n]
    return EvalSet(dataset.name, ids, dataset.test_y[ids].clone(), seed, dataset.test_x[ids].clone())


def compute_asr(results: list[AttackResult]) -> float:
    if not results:
        raise EvalError("no attack results")
    return sum(bool(r.success) for r in results) / len(results)


def attack_split(split: SplitModel, config: AttackConfig, eval_set: EvalSet, batch_size: int = 200) -> list[AttackResult]:
    """Attack the input or the transmitted latent of ``split`` for every eval sample."""
    mode = {"gradient": "gradient", "score": "scores", "decision": "labels"}[config.family]
    if config.space == "input":
        oracle, z = Oracle(split, mode), eval_set.x
    else:
        oracle = Oracle(split.forward_local, mode)
        with torch.no_grad():
            z = torch.cat([split.forward_mobile(eval_set.x[i : i + 500]) for i in range(0, len(eval_set), 500)])
    out: list[AttackResult] = []
    for i in range(0, len(eval_set), batch_size):
        ids = eval_set.sample_ids[i : i + batch_size]
        out += run_attack(config, oracle, z[i : i + batch_size], eval_set.labels[i : i + batch_size], ids)
    return out


def eps_grid(text: str) -> list[float]:
    """``"0.01:0.10:0.01"`` (inclusive) or a comma list."""
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(count)]
    return [float(v) for v in text.split(",") if v.strip()]
