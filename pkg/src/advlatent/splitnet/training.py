"""Training loops: the unsplit classifier and the four bottleneck strategies.

SB   cross-entropy, end to end.
DB   mean-squared error between the decoded latent and the teacher's feature
     at the split; the local half stays frozen.
BF   a DB stage, then cross-entropy with the mobile half and encoder frozen.
ES   the DB loss plus a rate term: mean -log2 of each latent element's bin
     probability under a histogram prior fixed at the start of training.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .split import SplitModel

log = logging.getLogger(__name__)

STRATEGIES = ("SB", "DB", "BF", "ES")


class TrainingError(ValueError):
    pass


@torch.no_grad()
def predict_logits(fn, x: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    return torch.cat([fn(x[i : i + batch_size]) for i in range(0, x.shape[0], batch_size)])


def accuracy(fn, x: torch.Tensor, y: torch.Tensor, batch_size: int = 500) -> float:
    return float((predict_logits(fn, x, batch_size).argmax(1) == y).float().mean())


def _batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def _fit(params, modules: nn.Module, loss_of, x: torch.Tensor, epochs: int, batch_size: int, max_lr: float, gen: torch.Generator, tag: str) -> list[float]:
    """Adam with a one-cycle schedule; returns the mean loss per epoch."""
    params = [p for p in params if p.requires_grad]
    if not params or epochs < 1:
        return []
    opt = torch.optim.Adam(params, lr=max_lr / 25)
    steps = epochs * ((x.shape[0] + batch_size - 1) // batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=max_lr, total_steps=steps)
    history = []
    for ep in range(epochs):
        modules.train()
        t0, total, count = time.time(), 0.0, 0
        for idx in _batches(x.shape[0], batch_size, gen):
            loss = loss_of(idx)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        history.append(total / count)
        log.info("%s epoch %d loss %.4f (%.0fs)", tag, ep, history[-1], time.time() - t0)
    modules.eval()
    return history


def train_classifier(model: nn.Module, train_x: torch.Tensor, train_y: torch.Tensor, epochs: int = 6, batch_size: int = 128, max_lr: float = 5e-3, seed: int = 0) -> list[float]:
    """Train an unsplit classifier with cross-entropy."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    return _fit(model.parameters(), model, lambda idx: F.cross_entropy(model(train_x[idx]), train_y[idx]), train_x, epochs, batch_size, max_lr, gen, "classifier")


@dataclass(frozen=True)
class BottleneckTrainingStrategy:
    """Loss recipe and stage schedule for bottleneck training."""

    kind: str
    epochs: tuple[int, ...] = (2,)
    max_lr: float = 5e-3
    batch_size: int = 128
    rate_weight: float = 0.01
    rate_bits: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise TrainingError(f"strategy must be one of {STRATEGIES}, got {self.kind!r}")
        if not self.epochs or any(int(e) < 1 for e in self.epochs):
            raise TrainingError("stage schedule must be nonempty with positive epoch counts")
        if self.kind == "BF" and len(self.epochs) != 2:
            raise TrainingError("BF runs two stages; give two epoch counts")

    @classmethod
    def make(cls, kind: str, epochs: int = 2, **kwargs) -> "BottleneckTrainingStrategy":
        kind = kind.upper()
        stages = (epochs, epochs) if kind == "BF" else (epochs,)
        return cls(kind, stages, **kwargs)


@dataclass
class TrainingReport:
    strategy: str
    accuracy: float
    num_classes: int
    stage_losses: list[list[float]] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.accuracy >= 2.0 / self.num_classes

    def as_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "accuracy": self.accuracy,
            "converged": self.converged,
            "stage_losses": self.stage_losses,
        }


class HistogramRate(nn.Module):
    """Differentiable bits-per-element proxy under a fixed histogram prior."""

    def __init__(self, samples: torch.Tensor, bits: int = 8):
        super().__init__()
        lo, hi = float(samples.min()), float(samples.max())
        if hi <= lo:
            hi = lo + 1.0
        bins = 2**bits
        hist = torch.histc(samples.detach().float().flatten(), bins=bins, min=lo, max=hi) + 1.0
        self.register_buffer("prob", hist / hist.sum())
        self.lo, self.hi, self.bins = lo, hi, bins

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        pos = ((t - self.lo) / (self.hi - self.lo) * (self.bins - 1)).clamp(0, self.bins - 1)
        left = pos.detach().floor().clamp(max=self.bins - 2).long()
        frac = pos - left
        p = self.prob[left] * (1 - frac) + self.prob[left + 1] * frac
        return -torch.log2(p).mean()


def _teacher_features(teacher: SplitModel):
    # computed per batch: caching the whole training set's latents can take gigabytes
    teacher = copy.deepcopy(teacher).eval()

    @torch.no_grad()
    def features(xb: torch.Tensor) -> torch.Tensor:
        return teacher.mobile(xb)

    return features


def train_bottleneck(split: SplitModel, strategy: BottleneckTrainingStrategy, dataset, teacher: SplitModel | None = None) -> tuple[SplitModel, TrainingReport]:
    """Train a bottlenecked split model; returns a trained copy and its report.

    ``split`` should carry pretrained mobile/local weights (the teacher when
    ``teacher`` is omitted). Validation accuracy is measured on the test split.
    """
    if split.bottleneck is None:
        raise TrainingError("attach a bottleneck before training it")
    teacher = teacher if teacher is not None else split
    model = copy.deepcopy(split)
    torch.manual_seed(strategy.seed)
    gen = torch.Generator().manual_seed(strategy.seed)
    x, y = dataset.train_x, dataset.train_y
    kind = strategy.kind
    stages: list[list[float]] = []

    def set_trainable(mods, flag):
        for m in mods:
            for p in m.parameters():
                p.requires_grad_(flag)

    head = [model.mobile, model.bottleneck.encoder, model.bottleneck.decoder]
    bottleneck = model.bottleneck
    fit = dict(batch_size=strategy.batch_size, max_lr=strategy.max_lr, gen=gen)

    if kind == "SB":
        set_trainable([model], True)
        stages.append(_fit(model.parameters(), model, lambda idx: F.cross_entropy(model(x[idx]), y[idx]), x, strategy.epochs[0], tag="SB", **fit))
    else:
        target = _teacher_features(teacher)
        rate = None
        if kind == "ES":
            with torch.no_grad():
                model.eval()
                sample = torch.cat([model.forward_mobile(x[i : i + 500]) for i in range(0, min(len(x), 2000), 500)])
            rate = HistogramRate(sample, strategy.rate_bits)

        def distill(idx):
            enc = bottleneck.encoder(model.mobile(x[idx]))
            loss = F.mse_loss(bottleneck.decoder(enc), target(x[idx]))
            if rate is not None:
                loss = loss + strategy.rate_weight * rate(enc)
            return loss

        set_trainable([model], False)
        set_trainable(head, True)
        stages.append(_fit([p for m in head for p in m.parameters()], model, distill, x, strategy.epochs[0], tag=kind, **fit))
        if kind == "BF":
            set_trainable([model], False)
            tail = [bottleneck.decoder, model.local]
            set_trainable(tail, True)

            def ce(idx):
                with torch.no_grad():
                    enc = bottleneck.encoder(model.mobile(x[idx]))
                return F.cross_entropy(model.local(bottleneck.decoder(enc)), y[idx])

            # frozen BN layers in the encoder keep their running statistics
            model.train()
            stages.append(_fit([p for m in tail for p in m.parameters()], _FrozenHead(model), ce, x, strategy.epochs[1], tag="BF-ce", **fit))

    set_trainable([model], False)
    model.eval()
    acc = accuracy(model, dataset.test_x, dataset.test_y)
    report = TrainingReport(kind, acc, dataset.num_classes, stages)
    if not report.converged:
        log.warning("%s bottleneck did not converge: accuracy %.3f", kind, acc)
    return model, report


class _FrozenHead(nn.Module):
    """Train-mode switch that keeps the frozen mobile half and encoder in eval mode."""

    def __init__(self, model: SplitModel):
        super().__init__()
        self.model = model

    def train(self, mode: bool = True):
        self.model.train(mode)
        self.model.mobile.eval()
        self.model.bottleneck.encoder.eval()
        return self
