"""Budgets, projections, oracles and result records shared by all attacks."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

Norm = str  # "l2" | "linf"

GRADIENT_ATTACKS = ("FGSM", "BIM", "MIM", "PGD")
SCORE_ATTACKS = ("NES", "NATTACK", "SQUARE")
DECISION_ATTACKS = ("EATK", "SIGNOPT", "TRIANGLE")
ALL_ATTACKS = GRADIENT_ATTACKS + SCORE_ATTACKS + DECISION_ATTACKS

ALLOWED_NORMS = {
    "FGSM": ("linf",),
    "BIM": ("linf",),
    "MIM": ("linf",),
    "PGD": ("l2", "linf"),
    "NES": ("linf",),
    "NATTACK": ("linf",),
    "SQUARE": ("linf",),
    "EATK": ("l2",),
    "SIGNOPT": ("l2",),
    "TRIANGLE": ("l2",),
}

NORM_SLACK = 1e-5


class AttackError(ValueError):
    """Invalid attack configuration or precondition."""


class CapabilityError(AttackError):
    """The oracle does not expose what the attack needs (e.g. gradients)."""


@dataclass(frozen=True)
class Budget:
    """l_p budget. ``epsilon`` is MSE-style for l2 and elementwise for linf."""

    norm: Norm
    epsilon: float
    space: str = "input"
    dim: int = 1

    def __post_init__(self):
        if self.norm not in ("l2", "linf"):
            raise AttackError(f"norm must be 'l2' or 'linf', got {self.norm!r}")
        if self.space not in ("input", "latent"):
            raise AttackError(f"space must be 'input' or 'latent', got {self.space!r}")
        if self.epsilon < 0:
            raise AttackError("epsilon must be nonnegative")
        if self.dim < 1:
            raise AttackError("dim must be at least 1")

    @property
    def sigma(self) -> float:
        return budget_to_sigma(self)

    def with_dim(self, dim: int) -> "Budget":
        return Budget(self.norm, self.epsilon, self.space, int(dim))


def budget_to_sigma(budget: Budget) -> float:
    """Radius of the l_p ball: sqrt(eps * dim) for l2, eps for linf."""
    if budget.norm == "l2":
        return math.sqrt(budget.epsilon * budget.dim)
    return float(budget.epsilon)


def lp_norm(delta: torch.Tensor, norm: Norm) -> torch.Tensor:
    """Per-sample norm over all but the first axis."""
    flat = delta.reshape(delta.shape[0], -1)
    if norm == "l2":
        return flat.norm(dim=1)
    return flat.abs().amax(dim=1)


def project_lp(delta, sigma: float, norm: Norm):
    """Project a single perturbation onto the l_p ball of radius ``sigma``.

    Accepts numpy arrays or tensors and returns the same type. l2 only
    rescales when the norm exceeds ``sigma``, so the map is idempotent.
    """
    if sigma < 0:
        raise AttackError("sigma must be nonnegative")
    is_np = isinstance(delta, np.ndarray) or not isinstance(delta, torch.Tensor)
    t = torch.as_tensor(np.asarray(delta) if is_np else delta)
    out = project_batch(t.unsqueeze(0), sigma, norm)[0]
    return out.numpy() if is_np else out


def project_batch(delta: torch.Tensor, sigma, norm: Norm) -> torch.Tensor:
    """Project each row of a batch; ``sigma`` may be a scalar or per-sample tensor."""
    if norm == "linf":
        s = torch.as_tensor(sigma, dtype=delta.dtype)
        if s.ndim:
            s = s.reshape(-1, *([1] * (delta.ndim - 1)))
        return torch.maximum(torch.minimum(delta, s), -s)
    if norm != "l2":
        raise AttackError(f"unknown norm {norm!r}")
    n = lp_norm(delta, "l2")
    s = torch.as_tensor(sigma, dtype=delta.dtype).expand_as(n)
    over = n > s
    if not torch.any(over):
        return delta
    factor = torch.where(over, s / torch.clamp(n, min=1e-30), torch.ones_like(n))
    out = delta * factor.reshape(-1, *([1] * (delta.ndim - 1)))
    # rescaling can land a hair above the radius in floating point; shrink
    # until inside so a second projection is the identity
    for _ in range(64):
        n2 = lp_norm(out, "l2")
        still = n2 > s
        if not torch.any(still):
            break
        shrink = torch.where(still, torch.nextafter(s / n2, torch.zeros_like(s)), torch.ones_like(s))
        out = out * shrink.reshape(-1, *([1] * (delta.ndim - 1)))
    return out


@dataclass
class AttackConfig:
    """What to run and with which budget; ``params`` holds algorithm extras."""

    algorithm: str
    norm: Norm
    epsilon: float
    space: str = "input"
    steps: int = 40
    query_budget: int = 10_000
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.algorithm = self.algorithm.upper()
        if self.algorithm not in ALL_ATTACKS:
            raise AttackError(f"unknown attack {self.algorithm!r}; expected one of {ALL_ATTACKS}")
        if self.norm not in ALLOWED_NORMS[self.algorithm]:
            raise AttackError(f"{self.algorithm} runs under {ALLOWED_NORMS[self.algorithm]}, not {self.norm}")
        Budget(self.norm, self.epsilon, self.space)
        if int(self.query_budget) < 1:
            raise AttackError("query_budget must be at least 1")
        if int(self.steps) < 0:
            raise AttackError("steps must be nonnegative")

    def budget(self, dim: int) -> Budget:
        return Budget(self.norm, self.epsilon, self.space, dim)

    @property
    def family(self) -> str:
        if self.algorithm in GRADIENT_ATTACKS:
            return "gradient"
        if self.algorithm in SCORE_ATTACKS:
            return "score"
        return "decision"

    def as_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "norm": self.norm,
            "epsilon": self.epsilon,
            "space": self.space,
            "steps": self.steps,
            "query_budget": self.query_budget,
            "seed": self.seed,
            **{f"param_{k}": v for k, v in sorted(self.params.items())},
        }


@dataclass
class AttackResult:
    sample_id: int
    success: bool
    queries_used: int
    achieved_norm: float
    perturbed: torch.Tensor
    algorithm: str = ""
    space: str = ""
    norm: str = ""
    epsilon: float = 0.0

    def row(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "algo": self.algorithm.lower(),
            "space": self.space,
            "norm": self.norm,
            "eps": self.epsilon,
            "success": int(self.success),
            "queries": self.queries_used,
            "achieved_norm": self.achieved_norm,
        }


def sample_generator(global_seed: int, sample_id: int) -> torch.Generator:
    """Private generator per sample, seeded from hash(global_seed, sample_id)."""
    digest = hashlib.sha256(f"{global_seed}:{sample_id}".encode()).digest()
    g = torch.Generator()
    g.manual_seed(int.from_bytes(digest[:8], "little"))
    return g


def predict(logits: torch.Tensor) -> torch.Tensor:
    """Argmax with ties broken towards the lowest class index."""
    return torch.argmax(logits, dim=-1)


class Oracle:
    """Query access to a classifier over the attacked tensor.

    ``forward`` maps a batch of attacked tensors to logits. ``mode`` limits
    what an attack may see: ``"gradient"`` (white box), ``"scores"`` or
    ``"labels"``. Every evaluated row is charged to its sample.
    """

    def __init__(self, forward: Callable[[torch.Tensor], torch.Tensor], mode: str = "gradient", batch_size: int = 512):
        if mode not in ("gradient", "scores", "labels"):
            raise AttackError(f"unknown oracle mode {mode!r}")
        self.forward = forward
        self.mode = mode
        self.batch_size = batch_size
        self.calls = 0

    @property
    def has_gradients(self) -> bool:
        return self.mode == "gradient"

    @property
    def has_scores(self) -> bool:
        return self.mode in ("gradient", "scores")

    def _run(self, z: torch.Tensor) -> torch.Tensor:
        self.calls += 1
        with torch.no_grad():
            if z.shape[0] <= self.batch_size:
                return self.forward(z)
            return torch.cat([self.forward(z[i : i + self.batch_size]) for i in range(0, z.shape[0], self.batch_size)])

    def scores(self, z: torch.Tensor) -> torch.Tensor:
        if not self.has_scores:
            raise CapabilityError("oracle exposes hard labels only")
        return self._run(z)

    def labels(self, z: torch.Tensor) -> torch.Tensor:
        return predict(self._run(z))

    def loss_and_grad(self, z: torch.Tensor, y: torch.Tensor, loss_fn) -> tuple[torch.Tensor, torch.Tensor]:
        if not self.has_gradients:
            raise CapabilityError("gradient attacks need a white-box oracle")
        z = z.detach().requires_grad_(True)
        with torch.enable_grad():
            logits = self.forward(z)
            losses = loss_fn(logits, y)
            (grad,) = torch.autograd.grad(losses.sum(), z)
        self.calls += 1
        return logits.detach(), grad.detach()


def box_clip(z0: torch.Tensor, delta: torch.Tensor, space: str) -> torch.Tensor:
    """Shrink ``delta`` so that ``z0 + delta`` stays in [0, 1] for input-space attacks."""
    if space == "input":
        return torch.clamp(z0 + delta, 0.0, 1.0) - z0
    return delta


def perturbed_point(z0: torch.Tensor, delta: torch.Tensor, space: str) -> torch.Tensor:
    out = (z0 + delta).detach()
    return out.clamp(0.0, 1.0) if space == "input" else out


def margin_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Correct-class logit minus best other logit; negative means misclassified."""
    correct = logits.gather(1, y[:, None])[:, 0]
    other = logits.clone()
    other.scatter_(1, y[:, None], -torch.inf)
    return correct - other.amax(dim=1)


def cross_entropy(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.cross_entropy(logits, y, reduction="none")


def adversarial_loss(name: str):
    """Loss the attacker maximizes: ``"ce"`` or negated ``"margin"``."""
    if name == "ce":
        return cross_entropy
    if name == "margin":
        return lambda logits, y: -margin_loss(logits, y)
    raise AttackError(f"unknown attack loss {name!r}")
