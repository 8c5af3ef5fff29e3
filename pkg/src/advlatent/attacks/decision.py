"""Decision-based black-box attacks (l2): EATK, SIGNOPT and TRIANGLE.

Each attack only sees hard labels. It searches for the adversarial point
closest to the clean tensor and stops as soon as that distance fits the
budget or the queries run out. Samples are processed one at a time.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from scipy.fft import idctn

from .base import (
    DECISION_ATTACKS,
    AttackConfig,
    AttackError,
    AttackResult,
    Oracle,
    box_clip,
    perturbed_point,
    project_batch,
    sample_generator,
)


class _Stop(Exception):
    pass


class Search:
    """Label queries for one sample, with budget accounting and best-point tracking.

    Every adversarial query is compared against the best point so far. The
    search ends (by raising ``_Stop``) once the best distance is at most
    ``stop_at`` or the query budget is spent.
    """

    def __init__(self, labels, z0: torch.Tensor, y: int, budget: int, space: str, stop_at: float, gen: torch.Generator):
        self.labels = labels
        self.z0 = z0
        self.y = int(y)
        self.budget = int(budget)
        self.space = space
        self.stop_at = float(stop_at)
        self.gen = gen
        self.queries = 0
        self.best_point: torch.Tensor | None = None
        self.best_dist = math.inf

    def point(self, delta: torch.Tensor) -> torch.Tensor:
        return perturbed_point(self.z0, delta, self.space)

    def _record(self, points: torch.Tensor, adv: torch.Tensor) -> None:
        for p in points[adv]:
            d = float(torch.linalg.vector_norm(p - self.z0))
            if d < self.best_dist:
                self.best_dist, self.best_point = d, p.clone()
        if self.best_dist <= self.stop_at:
            raise _Stop

    def is_adv(self, delta: torch.Tensor) -> bool:
        return bool(self.is_adv_batch(delta.unsqueeze(0))[0])

    def is_adv_batch(self, deltas: torch.Tensor) -> torch.Tensor:
        left = self.budget - self.queries
        if left <= 0:
            raise _Stop
        points = self.point(deltas[:left])
        adv = self.labels(points) != self.y
        self.queries += points.shape[0]
        self._record(points, adv)
        if points.shape[0] < deltas.shape[0]:
            raise _Stop
        return adv

    def randn(self, shape) -> torch.Tensor:
        return torch.randn(tuple(shape), generator=self.gen, dtype=self.z0.dtype)

    def rand(self, shape) -> torch.Tensor:
        return torch.rand(tuple(shape), generator=self.gen, dtype=self.z0.dtype)


def _unit(v: torch.Tensor) -> torch.Tensor:
    return v / torch.linalg.vector_norm(v).clamp(min=1e-30)


def _line_search(s: Search, direction: torch.Tensor, lo: float, hi: float, tol: float) -> float:
    """Smallest adversarial radius along a unit direction, given hi is adversarial."""
    while hi - lo > tol * max(hi, 1e-12):
        mid = 0.5 * (lo + hi)
        if s.is_adv(mid * direction):
            hi = mid
        else:
            lo = mid
    return hi


def _random_start(s: Search, tries: int) -> torch.Tensor | None:
    """Find some adversarial perturbation: noise images for inputs, growing rays for latents."""
    scale = float(torch.linalg.vector_norm(s.z0)) or 1.0
    for k in range(tries):
        if s.space == "input":
            delta = s.rand(s.z0.shape) - s.z0
        else:
            delta = _unit(s.randn(s.z0.shape)) * scale * 2.0 ** (k % 10)
        if s.is_adv(delta):
            return delta
    return None


def _shrink_start(s: Search, delta: torch.Tensor, tol: float = 1e-3) -> torch.Tensor:
    """Binary search on the segment from the clean tensor to an adversarial point."""
    n = float(torch.linalg.vector_norm(delta))
    r = _line_search(s, delta / n, 0.0, n, tol)
    return delta / n * r


def _signopt(s: Search, params: dict) -> None:
    k = int(params.get("sign_queries", 200))
    beta = float(params.get("beta", 0.005))
    alpha = float(params.get("alpha", 0.2))
    tries = int(params.get("init_tries", 100))
    tol = float(params.get("tol", 1e-4))

    theta, g = None, math.inf
    for _ in range(tries):
        cand = s.rand(s.z0.shape) - s.z0 if s.space == "input" else s.randn(s.z0.shape)
        if not s.is_adv(cand):
            continue
        n = float(torch.linalg.vector_norm(cand))
        u = cand / n
        if theta is not None and not s.is_adv(g * u):
            continue
        g = _line_search(s, u, 0.0, min(n, g), tol)
        theta = u
    if theta is None:
        return

    def g_of(direction: torch.Tensor, bound: float) -> float:
        if not s.is_adv(bound * direction):
            return math.inf
        return _line_search(s, direction, 0.0, bound, tol)

    while True:
        u = torch.randn((k, *s.z0.shape), generator=s.gen, dtype=s.z0.dtype)
        probe = theta.unsqueeze(0) + beta * u
        probe = probe / torch.linalg.vector_norm(probe.reshape(k, -1), dim=1).reshape(-1, *([1] * s.z0.ndim))
        adv = s.is_adv_batch(g * probe)
        signs = torch.where(adv, -1.0, 1.0).to(s.z0.dtype)
        grad = (signs.reshape(-1, *([1] * s.z0.ndim)) * u).mean(dim=0)

        best_theta, best_g = theta, g
        step = alpha
        for _ in range(15):
            cand = _unit(theta - step * grad)
            cg = g_of(cand, best_g)
            if cg < best_g:
                best_theta, best_g = cand, cg
                step *= 2.0
            else:
                break
        if best_g >= g:
            step = alpha
            for _ in range(15):
                step *= 0.25
                cand = _unit(theta - step * grad)
                cg = g_of(cand, best_g)
                if cg < best_g:
                    best_theta, best_g = cand, cg
                    break
        if best_g < g:
            theta, g = best_theta, best_g
            alpha = step
        else:
            alpha, beta = 1.0, beta * 0.1
            if beta < 5e-8:
                return


def _subspace_shape(shape, factor: int) -> tuple[int, ...]:
    if len(shape) == 3 and shape[1] >= 2 * factor and shape[2] >= 2 * factor:
        return (shape[0], shape[1] // factor, shape[2] // factor)
    return tuple(shape)


def _upsample(z: torch.Tensor, shape) -> torch.Tensor:
    if tuple(z.shape) == tuple(shape):
        return z
    return F.interpolate(z.unsqueeze(0), size=tuple(shape[1:]), mode="bilinear", align_corners=False)[0]


def _eatk(s: Search, params: dict) -> None:
    start = _random_start(s, int(params.get("init_tries", 100)))
    if start is None:
        return
    current = _shrink_start(s, start)
    sub = _subspace_shape(s.z0.shape, int(params.get("downsample", 2)))
    cov = torch.ones(sub, dtype=s.z0.dtype)
    path = torch.zeros(sub, dtype=s.z0.dtype)
    cc, ccov = float(params.get("cc", 0.01)), float(params.get("ccov", 0.001))
    mu = float(params.get("mu", 0.01))
    window, wins = 30, []
    while True:
        dist = float(torch.linalg.vector_norm(current))
        sigma = 0.01 * dist
        noise = s.randn(sub) * cov.sqrt() * sigma
        cand = current + mu * (-current) + _upsample(noise, s.z0.shape)
        cand = box_clip(s.z0, cand, s.space)
        ok = s.is_adv(cand) and float(torch.linalg.vector_norm(cand)) < dist
        if ok:
            current = cand
            path = (1 - cc) * path + math.sqrt(cc * (2 - cc)) * noise / max(sigma, 1e-30)
            cov = (1 - ccov) * cov + ccov * path**2
        wins.append(ok)
        if len(wins) == window:
            mu *= math.exp(sum(wins) / window - 0.2)
            wins = []


def _low_frequency(s: Search, ratio: float) -> torch.Tensor:
    shape = tuple(s.z0.shape)
    if len(shape) < 2 or min(shape[-2:]) < 4:
        return s.randn(shape)
    coef = np.zeros(shape, dtype=np.float64)
    h = max(1, int(shape[-2] * ratio))
    w = max(1, int(shape[-1] * ratio))
    coef[..., :h, :w] = s.randn((*shape[:-2], h, w)).double().numpy()
    return torch.from_numpy(idctn(coef, axes=(-2, -1), norm="ortho")).to(s.z0.dtype)


def _triangle(s: Search, params: dict) -> None:
    start = _random_start(s, int(params.get("init_tries", 100)))
    if start is None:
        return
    current = _shrink_start(s, start)
    alpha = float(params.get("alpha", math.pi / 8))
    alpha_min, alpha_max = 1e-4, math.pi / 2
    ratio = float(params.get("low_frequency", 0.5))
    bs_steps = int(params.get("beta_steps", 5))
    while True:
        d = float(torch.linalg.vector_norm(current))
        e1 = current / d
        u = _low_frequency(s, ratio)
        u = _unit(u - (u * e1).sum() * e1)
        found = None
        for sign in (1.0, -1.0):
            v = math.cos(alpha) * e1 + sign * math.sin(alpha) * u
            beta_hi = 0.999 * (math.pi - alpha) / 2

            def side(beta: float) -> float:
                # law of sines: the new side opposite beta
                return d * math.sin(beta) / math.sin(alpha + beta)

            if not s.is_adv(side(beta_hi) * v):
                continue
            lo, hi = 0.0, beta_hi
            for _ in range(bs_steps):
                mid = 0.5 * (lo + hi)
                if s.is_adv(side(mid) * v):
                    hi = mid
                else:
                    lo = mid
            found = box_clip(s.z0, side(hi) * v, s.space)
            break
        if found is not None and float(torch.linalg.vector_norm(found)) < d:
            current = found
            alpha = min(alpha * 1.5, alpha_max)
        else:
            alpha = max(alpha * 0.7, alpha_min)


_ALGOS = {"EATK": _eatk, "SIGNOPT": _signopt, "TRIANGLE": _triangle}


def minimize_distortion(algorithm: str, search: Search, params: dict | None = None) -> Search:
    """Run one decision attack to completion; the best point lives on ``search``."""
    algorithm = algorithm.upper()
    if algorithm not in _ALGOS:
        raise AttackError(f"{algorithm} is not a decision-based attack")
    try:
        if search.is_adv(torch.zeros_like(search.z0)):
            return search
        _ALGOS[algorithm](search, params or {})
    except _Stop:
        pass
    return search


def decision_attack(config: AttackConfig, oracle: Oracle, z: torch.Tensor, y: torch.Tensor, sample_ids=None) -> list[AttackResult]:
    """Run EATK / SIGNOPT / TRIANGLE per sample.

    Success means an adversarial point within the l2 radius was found. A
    failed sample returns its closest adversarial point projected into the
    budget (no longer adversarial), or the clean tensor if none was found.
    """
    if config.algorithm not in DECISION_ATTACKS:
        raise AttackError(f"{config.algorithm} is not a decision-based attack")
    z0 = z.detach()
    ids = list(range(z0.shape[0])) if sample_ids is None else list(sample_ids)
    sigma = config.budget(z0[0].numel()).sigma
    out = []
    for i, sid in enumerate(ids):
        s = Search(oracle.labels, z0[i], int(y[i]), config.query_budget, config.space, sigma, sample_generator(config.seed, sid))
        minimize_distortion(config.algorithm, s, config.params)
        success = s.best_point is not None and s.best_dist <= sigma
        if success:
            point = s.best_point
        elif s.best_point is not None:
            delta = project_batch((s.best_point - z0[i]).unsqueeze(0), sigma, "l2")[0]
            point = s.point(box_clip(z0[i], delta, config.space))
        else:
            point = z0[i].clone()
        out.append(
            AttackResult(
                sample_id=sid,
                success=success,
                queries_used=s.queries,
                achieved_norm=float(torch.linalg.vector_norm(point - z0[i])),
                perturbed=point,
                algorithm=config.algorithm,
                space=config.space,
                norm=config.norm,
                epsilon=config.epsilon,
            )
        )
    return out
