"""Score-based black-box attacks (l_inf): NES, NATTACK and SQUARE.

All three are batched across samples but every sample draws from its own
generator and is charged its own queries, so results do not depend on how
samples are grouped.
"""

from __future__ import annotations

import math

import torch

from .base import (
    SCORE_ATTACKS,
    AttackConfig,
    AttackError,
    AttackResult,
    CapabilityError,
    Oracle,
    adversarial_loss,
    box_clip,
    lp_norm,
    perturbed_point,
    predict,
    project_batch,
    sample_generator,
)

MAX_ROWS = 4096


class _State:
    """Per-sample bookkeeping shared by the score attacks."""

    def __init__(self, config: AttackConfig, oracle: Oracle, z: torch.Tensor, y: torch.Tensor, ids):
        self.z0 = z.detach()
        self.y = y
        self.n = self.z0.shape[0]
        self.ids = list(range(self.n)) if ids is None else list(ids)
        self.gens = [sample_generator(config.seed, i) for i in self.ids]
        self.oracle = oracle
        self.space = config.space
        self.norm = config.norm
        self.budget = int(config.query_budget)
        self.sigma = config.budget(self.z0[0].numel()).sigma
        self.loss_fn = adversarial_loss(config.params.get("loss", "ce"))
        self.queries = torch.zeros(self.n, dtype=torch.long)
        self.done = torch.zeros(self.n, dtype=torch.bool)
        self.best = torch.zeros_like(self.z0)

    def evaluate(self, idx: torch.Tensor, delta: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Score ``z0[idx] + delta`` (one query per row); returns (loss, success)."""
        logits = self.oracle.scores(perturbed_point(self.z0[idx], delta, self.space))
        self.queries[idx] += 1
        y = self.y[idx]
        return self.loss_fn(logits, y), predict(logits) != y

    def evaluate_many(self, idx: torch.Tensor, deltas: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Score ``k`` candidates per sample; ``deltas`` has shape (len(idx), k, *S)."""
        m, k = deltas.shape[:2]
        rep = idx.repeat_interleave(k)
        points = perturbed_point(self.z0[rep], deltas.reshape(m * k, *deltas.shape[2:]), self.space)
        logits = self.oracle.scores(points)
        self.queries[idx] += k
        y = self.y[rep]
        return self.loss_fn(logits, y).reshape(m, k), (predict(logits) != y).reshape(m, k)

    def mark(self, idx: torch.Tensor, hit: torch.Tensor, delta: torch.Tensor) -> None:
        if torch.any(hit):
            self.best[idx[hit]] = delta[hit]
            self.done[idx[hit]] = True

    def active(self, cost: int) -> torch.Tensor:
        """Unfinished samples that can still afford ``cost`` more queries."""
        ok = ~self.done & (self.queries + cost <= self.budget)
        return torch.nonzero(ok)[:, 0]

    def randn(self, i: int, shape) -> torch.Tensor:
        return torch.randn(shape, generator=self.gens[i], dtype=self.z0.dtype)

    def results(self, config: AttackConfig, fallback: torch.Tensor) -> list[AttackResult]:
        # successful rows keep exactly the tensor that was queried
        fallback = box_clip(self.z0, project_batch(fallback, self.sigma, self.norm), self.space)
        delta = torch.where(self.done.reshape(-1, *([1] * (self.z0.ndim - 1))), self.best, fallback)
        points = perturbed_point(self.z0, delta, self.space)
        achieved = lp_norm(points - self.z0, self.norm)
        return [
            AttackResult(
                sample_id=self.ids[i],
                success=bool(self.done[i]),
                queries_used=int(self.queries[i]),
                achieved_norm=float(achieved[i]),
                perturbed=points[i],
                algorithm=config.algorithm,
                space=config.space,
                norm=config.norm,
                epsilon=config.epsilon,
            )
            for i in range(self.n)
        ]


def _chunks(idx: torch.Tensor, rows_per_sample: int):
    step = max(1, MAX_ROWS // max(rows_per_sample, 1))
    for s in range(0, idx.numel(), step):
        yield idx[s : s + step]


def _initial_check(st: _State) -> None:
    idx = torch.arange(st.n)
    for part in _chunks(idx, 1):
        _, hit = st.evaluate(part, torch.zeros_like(st.z0[part]))
        st.mark(part, hit, torch.zeros_like(st.z0[part]))


def _nes(config: AttackConfig, st: _State) -> torch.Tensor:
    p = config.params
    pairs = int(p.get("population", 50))
    fd = float(p.get("fd_sigma", 0.1 * st.sigma))
    lr = float(p.get("step_size", 0.2 * st.sigma))
    delta = torch.zeros_like(st.z0)
    if st.sigma == 0:
        return delta
    cost = 2 * pairs + 1
    while True:
        idx = st.active(cost)
        if idx.numel() == 0:
            break
        for part in _chunks(idx, 2 * pairs):
            u = torch.stack([st.randn(int(i), (pairs, *st.z0.shape[1:])) for i in part])
            d = delta[part].unsqueeze(1)
            probes = torch.cat([d + fd * u, d - fd * u], dim=1)
            loss, _ = st.evaluate_many(part, probes)
            diff = (loss[:, :pairs] - loss[:, pairs:]).reshape(len(part), pairs, *([1] * (u.ndim - 2)))
            grad = (diff * u).sum(dim=1)
            step = delta[part] + lr * grad.sign()
            delta[part] = box_clip(st.z0[part], project_batch(step, st.sigma, "linf"), st.space)
            _, hit = st.evaluate(part, delta[part])
            st.mark(part, hit, delta[part])
    return delta


def _nattack(config: AttackConfig, st: _State) -> torch.Tensor:
    p = config.params
    pop = int(p.get("population", 50))
    s = float(p.get("search_sigma", 0.1))
    lr = float(p.get("learning_rate", 0.2))
    shape = st.z0.shape[1:]
    mu = torch.stack([0.001 * st.randn(i, shape) for i in range(st.n)])
    if st.sigma == 0:
        return torch.zeros_like(st.z0)
    while True:
        idx = st.active(pop)
        if idx.numel() == 0:
            break
        for part in _chunks(idx, pop):
            eps = torch.stack([st.randn(int(i), (pop, *shape)) for i in part])
            cand = st.sigma * torch.tanh(mu[part].unsqueeze(1) + s * eps)
            if st.space == "input":
                cand = box_clip(st.z0[part].unsqueeze(1), cand, st.space)
            loss, hit = st.evaluate_many(part, cand)
            won = hit.any(dim=1)
            if torch.any(won):
                first = hit.float().argmax(dim=1)
                chosen = cand[torch.arange(len(part)), first]
                st.mark(part, won, chosen)
            z = (loss - loss.mean(dim=1, keepdim=True)) / (loss.std(dim=1, keepdim=True) + 1e-7)
            z = z.reshape(len(part), pop, *([1] * len(shape)))
            mu[part] += lr / (pop * s) * (z * eps).sum(dim=1)
    return box_clip(st.z0, st.sigma * torch.tanh(mu), st.space)


def square_fraction(it: int, n_iters: int, p_init: float) -> float:
    """Piecewise-constant, geometrically decaying patch fraction."""
    it = int(it / max(n_iters, 1) * 10_000)
    for bound, div in ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16), (2000, 32), (4000, 64), (6000, 128), (8000, 256)):
        if it <= bound:
            return p_init / div
    return p_init / 512


def as_chw(shape) -> tuple[int, int, int]:
    """View an attacked tensor shape as (channels, height, width) for patches."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 1:
        return 1, 1, shape[0]
    if len(shape) == 2:
        return 1, shape[0], shape[1]
    return math.prod(shape[:-2]), shape[-2], shape[-1]


def _square(config: AttackConfig, st: _State) -> torch.Tensor:
    p_init = float(config.params.get("p_init", 0.05))
    shape = st.z0.shape[1:]
    c, h, w = as_chw(shape)
    sig = st.sigma
    if sig == 0:
        return torch.zeros_like(st.z0)
    # vertical stripes initialisation
    rows = []
    for i in range(st.n):
        signs = torch.randint(0, 2, (c, 1, w), generator=st.gens[i]).to(st.z0.dtype) * 2 - 1
        rows.append((sig * signs).expand(c, h, w).reshape(shape))
    delta = box_clip(st.z0, torch.stack(rows), st.space)
    best_loss = torch.full((st.n,), -torch.inf, dtype=st.z0.dtype)
    idx = st.active(1)
    for part in _chunks(idx, 1):
        loss, hit = st.evaluate(part, delta[part])
        best_loss[part] = loss
        st.mark(part, hit, delta[part])
    it = 0
    while True:
        idx = st.active(1)
        if idx.numel() == 0:
            break
        frac = square_fraction(it, st.budget, p_init)
        side = int(round(math.sqrt(frac * h * w)))
        side = min(max(side, 1), min(h, w))
        for part in _chunks(idx, 1):
            new = delta[part].reshape(len(part), c, h, w).clone()
            for k, i in enumerate(part.tolist()):
                g = st.gens[i]
                r = int(torch.randint(0, h - side + 1, (1,), generator=g))
                q = int(torch.randint(0, w - side + 1, (1,), generator=g))
                signs = torch.randint(0, 2, (c, 1, 1), generator=g).to(new.dtype) * 2 - 1
                new[k, :, r : r + side, q : q + side] = sig * signs
            new = box_clip(st.z0[part], new.reshape(len(part), *shape), st.space)
            loss, hit = st.evaluate(part, new)
            st.mark(part, hit, new)
            better = (loss > best_loss[part]) | hit
            upd = part[better]
            delta[upd] = new[better]
            best_loss[upd] = loss[better]
        it += 1
    return delta


_ALGOS = {"NES": _nes, "NATTACK": _nattack, "SQUARE": _square}


def score_attack(config: AttackConfig, oracle: Oracle, z: torch.Tensor, y: torch.Tensor, sample_ids=None) -> list[AttackResult]:
    """Run NES / NATTACK / SQUARE with per-sample query accounting.

    Every sample first spends one query on the unperturbed tensor, so an
    input that is already misclassified succeeds with a single query.
    """
    if config.algorithm not in SCORE_ATTACKS:
        raise AttackError(f"{config.algorithm} is not a score-based attack")
    if not oracle.has_scores:
        raise CapabilityError(f"{config.algorithm} needs score vectors from the oracle")
    st = _State(config, oracle, z, y, sample_ids)
    _initial_check(st)
    last = _ALGOS[config.algorithm](config, st)
    return st.results(config, last)
