"""Neural estimators of I(Y; T): MINE, NWJ, CPC (lower bounds), CLUB and DoE (upper).

Samples are pairs ``(t, y)``. ``y`` is either integer class labels (one-hot
inside the critic) or a float matrix of continuous values.

The pair critic is a two-hidden-layer MLP on the concatenation ``[t, y]``.
Its first layer splits into a ``t`` part and a ``y`` part. So with labels,
one pass scores every sample against every class, and marginal terms use
the label prior exactly instead of shuffled pairs.
"""

from __future__ import annotations

import logging
import math
import statistics
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

BOUND_DIRECTION = {"MINE": "lower", "NWJ": "lower", "CPC": "lower", "CLUB": "upper", "DoE": "upper"}
KINDS = tuple(BOUND_DIRECTION)
MIN_SAMPLES = 512


class EstimatorError(ValueError):
    pass


def canonical_kind(kind: str) -> str:
    for k in KINDS:
        if k.lower() == str(kind).lower():
            return k
    raise EstimatorError(f"unknown estimator {kind!r}; expected one of {KINDS}")


@dataclass(frozen=True)
class Schedule:
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    hidden: int = 256
    ema_rate: float = 0.01


@dataclass(frozen=True)
class MIEstimate:
    kind: str
    value: float
    sample_count: int
    training_steps: int
    seed: int

    @property
    def bound_direction(self) -> str:
        return BOUND_DIRECTION[self.kind]


class PairCritic(nn.Module):
    """f(t, y) = MLP([t, y]) with the first layer split into t and y parts."""

    def __init__(self, t_dim: int, y_dim: int, hidden: int = 256):
        super().__init__()
        self.t_in = nn.Linear(t_dim, hidden)
        self.y_in = nn.Linear(y_dim, hidden, bias=False)
        self.body = nn.Sequential(nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def joint(self, t: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return self.body(self.t_in(t) + self.y_in(y)).squeeze(-1)

    def pairwise(self, t: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
        """Scores for every (t_i, ys_j) combination, shape (len(t), len(ys))."""
        return self.body(self.t_in(t)[:, None, :] + self.y_in(ys)[None, :, :]).squeeze(-1)


class VariationalConditional(nn.Module):
    """q(y | t): softmax over classes, or a diagonal Gaussian for continuous y."""

    def __init__(self, t_dim: int, y_dim: int, discrete: bool, hidden: int = 256):
        super().__init__()
        self.discrete = discrete
        out = y_dim if discrete else 2 * y_dim
        self.net = nn.Sequential(nn.Linear(t_dim, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, out))

    def log_prob_all(self, t: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
        """log q(ys_j | t_i) for all pairs, shape (len(t), len(ys))."""
        out = self.net(t)
        if self.discrete:
            return F.log_softmax(out, dim=1) @ ys.T
        mu, logvar = out.chunk(2, dim=1)
        diff = ys[None, :, :] - mu[:, None, :]
        return (-0.5 * (diff**2 / logvar.exp()[:, None, :] + logvar[:, None, :] + math.log(2 * math.pi))).sum(-1)

    def log_prob(self, t: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        out = self.net(t)
        if self.discrete:
            return (F.log_softmax(out, dim=1) * y).sum(1)
        mu, logvar = out.chunk(2, dim=1)
        return (-0.5 * ((y - mu) ** 2 / logvar.exp() + logvar + math.log(2 * math.pi))).sum(1)


class _Marginal(nn.Module):
    """q(y) for DoE: fixed empirical prior (labels) or a learned Gaussian."""

    def __init__(self, y_dim: int, discrete: bool, prior: torch.Tensor | None):
        super().__init__()
        self.discrete = discrete
        if discrete:
            self.register_buffer("log_prior", prior.clamp(min=1e-12).log())
        else:
            self.mu = nn.Parameter(torch.zeros(y_dim))
            self.logvar = nn.Parameter(torch.zeros(y_dim))

    def log_prob(self, y: torch.Tensor) -> torch.Tensor:
        if self.discrete:
            return y @ self.log_prior
        return (-0.5 * ((y - self.mu) ** 2 / self.logvar.exp() + self.logvar + math.log(2 * math.pi))).sum(1)


@dataclass
class EstimatorState:
    kind: str
    discrete: bool
    num_classes: int  # label count, or the width of continuous y
    t_mean: torch.Tensor
    t_std: torch.Tensor
    prior: torch.Tensor | None
    modules: nn.ModuleDict
    schedule: Schedule
    seed: int
    trained_on: int
    losses: list = field(default_factory=list)

    def features(self, t: torch.Tensor) -> torch.Tensor:
        t = t.reshape(t.shape[0], -1).float()
        if t.shape[1] != self.t_mean.numel():
            raise EstimatorError(f"t has {t.shape[1]} features, estimator expects {self.t_mean.numel()}")
        return (t - self.t_mean) / self.t_std

    def labels(self, y: torch.Tensor) -> torch.Tensor:
        if self.discrete:
            if y.ndim != 1 or y.dtype.is_floating_point:
                raise EstimatorError("estimator was fit on class labels")
            return F.one_hot(y.long(), self.num_classes).float()
        y = y.float().reshape(y.shape[0], -1)
        if y.shape[1] != self.num_classes:
            raise EstimatorError(f"y has {y.shape[1]} features, estimator expects {self.num_classes}")
        return y


def _prepare(t: torch.Tensor, y: torch.Tensor):
    if t.shape[0] != y.shape[0]:
        raise EstimatorError(f"{t.shape[0]} t samples but {y.shape[0]} y samples")
    discrete = not y.dtype.is_floating_point
    t = t.reshape(t.shape[0], -1).float()
    return t, discrete


def _bound(kind: str, mods: nn.ModuleDict, t: torch.Tensor, y1h: torch.Tensor, discrete: bool, prior, gen=None) -> torch.Tensor:
    """Value of the kind's bound on a batch (differentiable)."""
    n = t.shape[0]
    if kind in ("MINE", "NWJ", "CPC"):
        critic = mods["critic"]
        joint = critic.joint(t, y1h)
        if kind == "CPC":
            # negatives are the batch's own y; with labels, score each class once and gather
            if discrete:
                scores = critic.pairwise(t, torch.eye(y1h.shape[1]))[:, y1h.argmax(1)]
            else:
                scores = critic.pairwise(t, y1h)
            return (joint - (torch.logsumexp(scores, dim=1) - math.log(n))).mean()
        if discrete:
            scores = critic.pairwise(t, torch.eye(y1h.shape[1]))
            log_marg = torch.logsumexp(scores + prior.clamp(min=1e-12).log()[None, :], dim=1)
        else:
            perm = torch.randperm(n, generator=gen) if gen is not None else torch.arange(n).roll(1)
            log_marg = critic.joint(t, y1h[perm])
        if kind == "MINE":
            return joint.mean() - (torch.logsumexp(log_marg, dim=0) - math.log(n))
        return joint.mean() - torch.exp(torch.logsumexp(log_marg, dim=0) - math.log(n) - 1.0)
    q = mods["conditional"]
    if kind == "CLUB":
        pos = q.log_prob(t, y1h)
        if discrete:
            neg = q.log_prob_all(t, torch.eye(y1h.shape[1])) @ prior
        else:
            neg = q.log_prob_all(t, y1h).mean(dim=1)
        return (pos - neg).mean()
    # DoE: cross-entropy estimate of H(Y) minus that of H(Y|T)
    return (q.log_prob(t, y1h) - mods["marginal"].log_prob(y1h)).mean()


def _train_loss(kind, mods, t, y1h, discrete, prior, gen, ema: dict, rate: float):
    if kind == "MINE":
        critic = mods["critic"]
        joint = critic.joint(t, y1h)
        if discrete:
            scores = critic.pairwise(t, torch.eye(y1h.shape[1]))
            marg = (scores.exp() * prior[None, :]).sum(1)
        else:
            perm = torch.randperm(t.shape[0], generator=gen)
            marg = critic.joint(t, y1h[perm]).exp()
        et = marg.mean()
        ema["value"] = float(et.detach()) if ema.get("value") is None else (1 - rate) * ema["value"] + rate * float(et.detach())
        # bias-corrected gradient of log E[e^f]: grad(E[e^f]) / EMA(E[e^f])
        return -(joint.mean() - et / ema["value"])
    if kind in ("CLUB", "DoE"):
        # fit the variational densities by maximum likelihood
        loss = -mods["conditional"].log_prob(t, y1h).mean()
        if kind == "DoE" and not discrete:
            loss = loss - mods["marginal"].log_prob(y1h).mean()
        return loss
    return -_bound(kind, mods, t, y1h, discrete, prior, gen)


def _build(kind: str, t_dim: int, y_dim: int, discrete: bool, prior, hidden: int) -> nn.ModuleDict:
    if kind in ("MINE", "NWJ", "CPC"):
        return nn.ModuleDict({"critic": PairCritic(t_dim, y_dim, hidden)})
    mods = {"conditional": VariationalConditional(t_dim, y_dim, discrete, hidden)}
    if kind == "DoE":
        mods["marginal"] = _Marginal(y_dim, discrete, prior)
    return nn.ModuleDict(mods)


def _fit_once(kind, t, y1h, discrete, prior, schedule: Schedule, seed: int, lr: float):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    mods = _build(kind, t.shape[1], y1h.shape[1], discrete, prior, schedule.hidden)
    opt = torch.optim.Adam(mods.parameters(), lr=lr)
    ema: dict = {"value": None}
    losses = []
    n = t.shape[0]
    bs = min(schedule.batch_size, n)
    for step in range(schedule.steps):
        idx = torch.randint(0, n, (bs,), generator=gen)
        loss = _train_loss(kind, mods, t[idx], y1h[idx], discrete, prior, gen, ema, schedule.ema_rate)
        if not torch.isfinite(loss):
            return None, losses
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0:
            losses.append(float(loss.detach()))
    mods.eval()
    for p in mods.parameters():
        p.requires_grad_(False)
    return mods, losses


def fit_estimator(kind: str, t: torch.Tensor, y: torch.Tensor, schedule: Schedule | None = None, seed: int = 0, num_classes: int | None = None) -> EstimatorState:
    """Train the kind-specific critic on paired samples and freeze it.

    A non-finite loss triggers one retry at a 10x smaller learning rate.
    """
    kind = canonical_kind(kind)
    schedule = schedule or Schedule()
    t, discrete = _prepare(t, y)
    if t.shape[0] < MIN_SAMPLES:
        raise EstimatorError(f"need at least {MIN_SAMPLES} paired samples, got {t.shape[0]}")
    mean, std = t.mean(0), t.std(0).clamp(min=1e-6)
    tz = (t - mean) / std
    if discrete:
        k = int(num_classes or int(y.max()) + 1)
        y1h = F.one_hot(y.long(), k).float()
        prior = y1h.mean(0)
    else:
        y1h = y.float().reshape(y.shape[0], -1)
        k, prior = y1h.shape[1], None
    lr = schedule.lr
    for attempt in range(2):
        mods, losses = _fit_once(kind, tz, y1h, discrete, prior, schedule, seed, lr)
        if mods is not None:
            return EstimatorState(kind, discrete, k, mean, std, prior, mods, schedule, seed, t.shape[0], losses)
        log.warning("%s diverged at lr %g (attempt %d)", kind, lr, attempt + 1)
        lr /= 10
    raise EstimatorError(f"{kind} diverged twice (last losses {losses[-3:]}); lower the learning rate")


@torch.no_grad()
def estimate_mi(state: EstimatorState, t: torch.Tensor, y: torch.Tensor) -> MIEstimate:
    """Evaluate the frozen bound on (held-out) samples; deterministic."""
    if t.shape[0] != y.shape[0]:
        raise EstimatorError(f"{t.shape[0]} t samples but {y.shape[0]} y samples")
    if t.shape[0] < 2:
        raise EstimatorError("need at least 2 samples")
    tz = state.features(t)
    y1h = state.labels(y)
    gen = torch.Generator().manual_seed(state.seed)
    if state.kind == "CPC":
        # average the batch-level bound over fixed-size chunks, as in training
        bs = min(state.schedule.batch_size, tz.shape[0])
        vals, weights = [], []
        for i in range(0, tz.shape[0] - bs + 1, bs):
            vals.append(float(_bound("CPC", state.modules, tz[i : i + bs], y1h[i : i + bs], state.discrete, state.prior)))
            weights.append(bs)
        value = sum(v * w for v, w in zip(vals, weights)) / sum(weights)
    else:
        value = float(_bound(state.kind, state.modules, tz, y1h, state.discrete, state.prior, gen))
    if not math.isfinite(value):
        raise EstimatorError(f"{state.kind} produced a non-finite estimate")
    return MIEstimate(state.kind, value, int(t.shape[0]), state.schedule.steps, state.seed)


def split_holdout(n: int, holdout: float, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    cut = n - max(2, int(round(n * holdout)))
    return perm[:cut], perm[cut:]


def estimate(kind: str, t: torch.Tensor, y: torch.Tensor, seeds=(0, 1, 2), holdout: float = 0.3, schedule: Schedule | None = None) -> MIEstimate:
    """Median over seeds of fit-on-train / evaluate-on-held-out estimates."""
    kind = canonical_kind(kind)
    values = []
    num_classes = None if y.dtype.is_floating_point else int(y.max()) + 1
    for seed in seeds:
        tr, te = split_holdout(t.shape[0], holdout, seed)
        state = fit_estimator(kind, t[tr], y[tr], schedule, seed, num_classes)
        values.append(estimate_mi(state, t[te], y[te]).value)
    return MIEstimate(kind, float(statistics.median(values)), int(t.shape[0]), (schedule or Schedule()).steps, int(seeds[0]))


def pooled_latent(t: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Average-pool spatial latents before estimation to keep critics small."""
    if t.ndim == 4 and factor > 1 and min(t.shape[-2:]) >= factor:
        t = F.avg_pool2d(t, factor)
    return t.reshape(t.shape[0], -1)


def mi_under_attack(split, x: torch.Tensor, y: torch.Tensor, eps_grid, kinds=KINDS, seeds=(0, 1, 2), steps: int = 40, attack_seed: int = 0, schedule: Schedule | None = None, pool: int = 2, holdout: float = 0.3, fit_on: str = "attacked", frozen: dict | None = None) -> list[dict]:
    """Rows per epsilon and estimator, input / latent estimates and accuracies.

    Each space is attacked with PGD-l_inf; the (T, Y) pairs are the latent
    seen by the local half (the attacked latent, or the latent of the
    attacked input) and the true labels.

    ``fit_on="attacked"`` fits a fresh estimator per cell on attacked pairs.
    ``fit_on="clean"`` fits once per kind and seed on clean pairs and
    evaluates the frozen estimator on the attacked held-out pairs; pass
    ``frozen`` from :func:`fit_clean_estimators` to reuse those fits.
    """
    from .attacks import AttackConfig, Oracle, gradient_attack

    kinds = [canonical_kind(k) for k in kinds]
    if fit_on not in ("attacked", "clean"):
        raise EstimatorError(f"fit_on must be 'attacked' or 'clean', got {fit_on!r}")
    split.eval()
    with torch.no_grad():
        t_clean = split.forward_mobile(x)
    if fit_on == "clean" and frozen is None:
        frozen = fit_clean_estimators(split, x, y, kinds, seeds, schedule, pool, holdout)
    rows = []
    for eps in eps_grid:
        cells = {}
        for space in ("input", "latent"):
            if eps == 0:
                t_adv = t_clean
            elif space == "input":
                cfg = AttackConfig("PGD", "linf", float(eps), "input", steps=steps, seed=attack_seed)
                res = _run_batched(gradient_attack, cfg, Oracle(split), x, y)
                with torch.no_grad():
                    t_adv = split.forward_mobile(torch.stack([r.perturbed for r in res]))
            else:
                cfg = AttackConfig("PGD", "linf", float(eps), "latent", steps=steps, seed=attack_seed)
                res = _run_batched(gradient_attack, cfg, Oracle(split.forward_local), t_clean, y)
                t_adv = torch.stack([r.perturbed for r in res])
            with torch.no_grad():
                acc = float((predict_batches(split.forward_local, t_adv).argmax(1) == y).float().mean())
            feats = pooled_latent(t_adv, pool)
            vals = {}
            for kind in kinds:
                try:
                    if fit_on == "clean":
                        vals[kind] = _frozen_median(frozen, kind, seeds, feats, y, holdout)
                    else:
                        vals[kind] = estimate(kind, feats, y, seeds, holdout, schedule).value
                except EstimatorError as exc:
                    log.error("eps %s %s %s failed: %s", eps, space, kind, exc)
                    vals[kind] = float("nan")
            cells[space] = (vals, acc)
        for kind in kinds:
            rows.append(
                {
                    "eps": float(eps),
                    "estimator": kind,
                    "input_value": cells["input"][0][kind],
                    "latent_value": cells["latent"][0][kind],
                    "input_acc": cells["input"][1],
                    "latent_acc": cells["latent"][1],
                }
            )
    return rows


def fit_clean_estimators(split, x: torch.Tensor, y: torch.Tensor, kinds=KINDS, seeds=(0, 1, 2), schedule: Schedule | None = None, pool: int = 2, holdout: float = 0.3) -> dict:
    """Estimators fit on clean (latent, label) pairs, keyed by (kind, seed)."""
    with torch.no_grad():
        feats = pooled_latent(split.forward_mobile(x), pool)
    frozen = {}
    for kind in [canonical_kind(k) for k in kinds]:
        for seed in seeds:
            tr, _ = split_holdout(feats.shape[0], holdout, seed)
            try:
                frozen[kind, seed] = fit_estimator(kind, feats[tr], y[tr], schedule, seed, int(y.max()) + 1)
            except EstimatorError as exc:
                log.error("clean fit of %s (seed %d) failed: %s", kind, seed, exc)
    return frozen


def _frozen_median(frozen: dict, kind: str, seeds, feats: torch.Tensor, y: torch.Tensor, holdout: float) -> float:
    values = []
    for seed in seeds:
        if (kind, seed) not in frozen:
            raise EstimatorError(f"no clean fit for {kind} seed {seed}")
        _, te = split_holdout(feats.shape[0], holdout, seed)
        values.append(estimate_mi(frozen[kind, seed], feats[te], y[te]).value)
    return float(statistics.median(values))


def predict_batches(fn, t: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([fn(t[i : i + batch_size]) for i in range(0, t.shape[0], batch_size)])


def _run_batched(attack, cfg, oracle, z, y, batch_size: int = 250):
    out = []
    for i in range(0, z.shape[0], batch_size):
        out += attack(cfg, oracle, z[i : i + batch_size], y[i : i + batch_size], range(i, min(i + batch_size, z.shape[0])))
    return out
