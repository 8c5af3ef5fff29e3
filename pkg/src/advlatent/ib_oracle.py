"""Exact information quantities over small discrete distributions.

Everything here works in nats on dense probability tables. The functions are
the ground truth used to check the information-bottleneck identities (data
processing, conditional-MI as expected KL, the residual-information chain
rule) and the input-vs-latent robustness inequality on Markov chains
``Y -> X -> T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

MAX_SUPPORT = 16
PROB_TOL = 1e-12
IDENTITY_TOL = 1e-9

__all__ = [
    "ValidationError",
    "FiniteDistribution",
    "FiniteMarkovChain",
    "FourStageChain",
    "PerturbationKernel",
    "BoundIndex",
    "symmetric_kernel",
    "shift_kernel",
    "erasure_kernel",
    "mutual_information",
    "conditional_mutual_information",
    "joint_mutual_information",
    "expected_kl",
    "verify_dpi",
    "residual_information",
    "theorem1_bound_index",
    "ib_objective",
    "theorem2_check",
    "corollary1_check",
    "random_chain",
    "random_four_stage_chain",
    "run_campaign",
    "CAMPAIGNS",
    "to_bits",
]


class ValidationError(ValueError):
    """Raised for malformed probability tables, channels or arguments."""


def _xlogy_ratio(p, num, den):
    """Sum of p * ln(num/den) with the 0 ln 0 = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    mask = p > 0
    if not np.any(mask):
        return 0.0
    num = np.broadcast_to(num, p.shape)[mask]
    den = np.broadcast_to(den, p.shape)[mask]
    with np.errstate(divide="ignore"):
        return float(np.sum(p[mask] * (np.log(num) - np.log(den))))


def _check_table(probs: np.ndarray, ndim: int | None = None) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if ndim is not None and probs.ndim != ndim:
        raise ValidationError(f"expected a {ndim}-variable table, got ndim={probs.ndim}")
    if probs.size == 0:
        raise ValidationError("empty probability table")
    if np.any(~np.isfinite(probs)):
        raise ValidationError("probability table contains non-finite entries")
    if np.any(probs < 0):
        raise ValidationError("probability table has negative mass")
    total = probs.sum()
    if abs(total - 1.0) > PROB_TOL * max(1, probs.size):
        raise ValidationError(f"probabilities sum to {total!r}, not 1")
    return probs


def _check_stochastic(matrix, name: str) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValidationError(f"{name} must be a 2-D row-stochastic matrix")
    if np.any(m < 0) or np.any(~np.isfinite(m)):
        raise ValidationError(f"{name} has negative or non-finite entries")
    if np.any(np.abs(m.sum(axis=1) - 1.0) > PROB_TOL * max(1, m.shape[1])):
        raise ValidationError(f"{name} rows do not sum to 1")
    if max(m.shape) > MAX_SUPPORT:
        raise ValidationError(f"{name} exceeds the support cap of {MAX_SUPPORT}")
    return m


@dataclass(frozen=True)
class FiniteDistribution:
    """Joint pmf over a few discrete variables, one table axis per variable."""

    probabilities: np.ndarray

    def __post_init__(self):
        probs = _check_table(self.probabilities)
        probs.setflags(write=False)
        object.__setattr__(self, "probabilities", probs)

    @property
    def support_sizes(self) -> tuple[int, ...]:
        return tuple(self.probabilities.shape)

    def marginal(self, *axes: int) -> np.ndarray:
        drop = tuple(i for i in range(self.probabilities.ndim) if i not in axes)
        return self.probabilities.sum(axis=drop)

    def transpose(self, *axes: int) -> "FiniteDistribution":
        return FiniteDistribution(np.transpose(self.probabilities, axes))


def _as_table(joint, ndim: int) -> np.ndarray:
    if isinstance(joint, FiniteDistribution):
        probs = joint.probabilities
        if probs.ndim != ndim:
            raise ValidationError(f"expected a {ndim}-variable table, got ndim={probs.ndim}")
        return probs
    return _check_table(joint, ndim)


@dataclass(frozen=True)
class FiniteMarkovChain:
    """Y -> X -> T given by a prior on Y and two row-stochastic channels."""

    prior_y: np.ndarray
    channel_x_given_y: np.ndarray
    channel_t_given_x: np.ndarray

    def __post_init__(self):
        prior = _check_table(self.prior_y, 1)
        pxy = _check_stochastic(self.channel_x_given_y, "channel_x_given_y")
        ptx = _check_stochastic(self.channel_t_given_x, "channel_t_given_x")
        if pxy.shape[0] != prior.shape[0]:
            raise ValidationError("channel_x_given_y rows must match |Y|")
        if ptx.shape[0] != pxy.shape[1]:
            raise ValidationError("channel_t_given_x rows must match |X|")
        if prior.shape[0] > MAX_SUPPORT:
            raise ValidationError(f"|Y| exceeds the support cap of {MAX_SUPPORT}")
        for name, arr in (("prior_y", prior), ("channel_x_given_y", pxy), ("channel_t_given_x", ptx)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def sizes(self) -> tuple[int, int, int]:
        """(|X|, |Y|, |T|)."""
        return self.channel_x_given_y.shape[1], self.prior_y.shape[0], self.channel_t_given_x.shape[1]

    def joint(self) -> FiniteDistribution:
        """P(X, Y, T) with axes ordered (X, Y, T)."""
        pyx = self.prior_y[:, None] * self.channel_x_given_y  # (y, x)
        p = pyx.T[:, :, None] * self.channel_t_given_x[:, None, :]
        return FiniteDistribution(p / p.sum())

    def joint_xy(self) -> FiniteDistribution:
        return FiniteDistribution(self.joint().marginal(0, 1))

    def joint_yt(self) -> FiniteDistribution:
        return FiniteDistribution(self.joint().marginal(1, 2))

    def perturb_x(self, kernel: "PerturbationKernel") -> "FiniteMarkovChain":
        """Chain Y -> X_adv -> T' where X_adv = kernel(X)."""
        return FiniteMarkovChain(
            self.prior_y, self.channel_x_given_y @ kernel.transition, self.channel_t_given_x
        )

    def perturb_t(self, kernel: "PerturbationKernel") -> "FiniteMarkovChain":
        """Chain Y -> X -> T_adv where T_adv = kernel(T)."""
        return FiniteMarkovChain(
            self.prior_y, self.channel_x_given_y, self.channel_t_given_x @ kernel.transition
        )


@dataclass(frozen=True)
class FourStageChain:
    """Y -> X -> T1 -> T2; used to compare perturbing T1 against perturbing T2."""

    prior_y: np.ndarray
    channel_x_given_y: np.ndarray
    channel_t1_given_x: np.ndarray
    channel_t2_given_t1: np.ndarray

    def as_chain(self) -> FiniteMarkovChain:
        """Collapse X away: the chain Y -> T1 -> T2."""
        t1_given_y = np.asarray(self.channel_x_given_y) @ np.asarray(self.channel_t1_given_x)
        return FiniteMarkovChain(self.prior_y, t1_given_y, self.channel_t2_given_t1)


@dataclass(frozen=True)
class PerturbationKernel:
    target: str
    noise_level: float
    transition: np.ndarray

    def __post_init__(self):
        if self.target not in ("X", "T"):
            raise ValidationError("kernel target must be 'X' or 'T'")
        if self.noise_level < 0:
            raise ValidationError("noise_level must be nonnegative")
        m = _check_stochastic(self.transition, "transition")
        if m.shape[0] != m.shape[1]:
            raise ValidationError("perturbation transition must be square")
        if self.noise_level == 0 and not np.array_equal(m, np.eye(m.shape[0])):
            raise ValidationError("noise_level 0 requires the identity transition")
        m.setflags(write=False)
        object.__setattr__(self, "transition", m)


KernelFamily = Callable[[int, float, str], PerturbationKernel]


def symmetric_kernel(size: int, noise_level: float, target: str = "X") -> PerturbationKernel:
    """With probability ``noise_level`` resample the symbol uniformly."""
    lam = float(min(max(noise_level, 0.0), 1.0))
    if lam == 0.0:
        return PerturbationKernel(target, 0.0, np.eye(size))
    m = (1.0 - lam) * np.eye(size) + lam / size
    return PerturbationKernel(target, lam, m)


def shift_kernel(size: int, noise_level: float, target: str = "X", step: int = 1) -> PerturbationKernel:
    """With probability ``noise_level`` move the symbol ``step`` places along a cycle.

    The shift is a bijection, so it keeps what the perturbed variable knows
    about Y while misaligning it with the downstream channel.
    """
    lam = float(min(max(noise_level, 0.0), 1.0))
    if lam == 0.0:
        return PerturbationKernel(target, 0.0, np.eye(size))
    m = (1.0 - lam) * np.eye(size) + lam * np.roll(np.eye(size), step, axis=1)
    return PerturbationKernel(target, lam, m)


def erasure_kernel(size: int, target: str = "T") -> PerturbationKernel:
    """Total erasure: every symbol is mapped to symbol 0."""
    m = np.zeros((size, size))
    m[:, 0] = 1.0
    return PerturbationKernel(target, 1.0, m)


@dataclass(frozen=True)
class BoundIndex:
    card_t: int
    card_y: int
    n: int
    value: float


def mutual_information(joint) -> float:
    """I(A;B) in nats for a 2-variable joint table."""
    p = _as_table(joint, 2)
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    return max(_xlogy_ratio(p, p, pa * pb), 0.0)


def conditional_mutual_information(joint) -> float:
    """I(X;Y|T) in nats for a joint with axes (X, Y, T)."""
    p = _as_table(joint, 3)
    pt = p.sum(axis=(0, 1), keepdims=True)
    pxt = p.sum(axis=1, keepdims=True)
    pyt = p.sum(axis=0, keepdims=True)
    # p(x,y|t) / (p(x|t) p(y|t)) = p(x,y,t) p(t) / (p(x,t) p(y,t))
    return max(_xlogy_ratio(p, p * pt, pxt * pyt), 0.0)


def joint_mutual_information(joint) -> float:
    """I((X,T);Y) for a joint with axes (X, Y, T)."""
    p = _as_table(joint, 3)
    nx, ny, nt = p.shape
    return mutual_information(np.transpose(p, (0, 2, 1)).reshape(nx * nt, ny))


def expected_kl(chain: FiniteMarkovChain) -> float:
    """E_{P(X,T)} KL[P(Y|X) || P(Y|T)] in nats."""
    p = chain.joint().probabilities
    pxy = p.sum(axis=2)
    px = pxy.sum(axis=1)
    pyt = p.sum(axis=0)
    pt = pyt.sum(axis=0)
    pxt = p.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        y_given_x = np.where(px[:, None] > 0, pxy / px[:, None], 0.0)  # (x, y)
        y_given_t = np.where(pt[None, :] > 0, pyt / pt[None, :], 0.0)  # (y, t)
    total = 0.0
    for x in range(p.shape[0]):
        for t in range(p.shape[2]):
            w = pxt[x, t]
            if w <= 0:
                continue
            q = y_given_x[x]
            r = y_given_t[:, t]
            mask = q > 0
            if np.any(r[mask] == 0):
                return math.inf
            total += w * float(np.sum(q[mask] * (np.log(q[mask]) - np.log(r[mask]))))
    return total


def verify_dpi(chain: FiniteMarkovChain) -> dict:
    i_xy = mutual_information(chain.joint_xy())
    i_yt = mutual_information(chain.joint_yt())
    return {"i_xy": i_xy, "i_yt": i_yt, "holds": i_xy >= i_yt - IDENTITY_TOL}


def residual_information(chain: FiniteMarkovChain) -> float:
    """I(X;Y) - I(Y;T), the relevance lost between X and T."""
    return mutual_information(chain.joint_xy()) - mutual_information(chain.joint_yt())


def theorem1_bound_index(card_t: int, card_y: int, n: int) -> BoundIndex:
    """Dimensionless |T||Y|/sqrt(n) comparator; the hidden constant is not estimated."""
    for name, v in (("card_t", card_t), ("card_y", card_y), ("n", n)):
        if int(v) != v or v < 1:
            raise ValidationError(f"{name} must be a positive integer, got {v!r}")
    return BoundIndex(int(card_t), int(card_y), int(n), card_t * card_y / math.sqrt(n))


def ib_objective(i_xt: float, i_yt: float, beta: float) -> float:
    return i_xt - beta * i_yt


def _input_distortion(chain: FiniteMarkovChain, kernel: PerturbationKernel) -> tuple[float, float]:
    adv = chain.perturb_x(kernel)
    joint = adv.joint()
    return conditional_mutual_information(joint), mutual_information(adv.joint_yt())


def _latent_distortion(chain: FiniteMarkovChain, kernel: PerturbationKernel) -> tuple[float, float]:
    adv = chain.perturb_t(kernel)
    joint = adv.joint()
    return conditional_mutual_information(joint), mutual_information(adv.joint_yt())


def _calibrate(fn, target: float, tol: float, max_iter: int, grid: int = 64):
    """Find lam in [0, 1] with fn(lam)[0] == target within tol.

    A grid scan brackets the first crossing (the distortion curve need not be
    monotone), then bisection runs to machine precision so the matched pair is
    far tighter than ``tol`` whenever a crossing exists.
    """
    lams = np.linspace(0.0, 1.0, grid + 1)
    vals = [fn(lam) for lam in lams]
    gaps = np.array([v[0] - target for v in vals])
    exact = np.flatnonzero(np.abs(gaps) <= 1e-13)
    if exact.size:
        i = int(exact[0])
        return float(lams[i]), vals[i], True
    cross = np.flatnonzero(gaps[:-1] * gaps[1:] < 0)
    if cross.size:
        i = int(cross[0])
        lo, hi, lo_gap = float(lams[i]), float(lams[i + 1]), gaps[i]
        best = (abs(lo_gap), lo, vals[i])
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            mval = fn(mid)
            mgap = mval[0] - target
            if abs(mgap) < best[0]:
                best = (abs(mgap), mid, mval)
            if mgap == 0 or hi - lo <= 1e-15:
                break
            if mgap * lo_gap < 0:
                hi = mid
            else:
                lo, lo_gap = mid, mgap
        return best[1], best[2], best[0] <= tol
    i = int(np.argmin(np.abs(gaps)))
    if abs(gaps[i]) <= tol:
        return float(lams[i]), vals[i], True
    return None, None, False


def theorem2_check(
    chain: FiniteMarkovChain,
    input_kernel_family: KernelFamily = shift_kernel,
    latent_kernel_family: KernelFamily = symmetric_kernel,
    distortion_tol: float = 1e-6,
    *,
    noise_level: float = 0.5,
    calibrate: str = "latent",
    max_iter: int = 200,
) -> dict:
    """Compare input and latent perturbation at matched information distortion.

    One side is perturbed at ``noise_level``; the other side's noise level is
    searched so that I(X_adv;Y|T') and I(X;Y|T_adv) agree within
    ``distortion_tol``. When calibrated, ``holds`` reports
    I(Y;T') <= I(Y;T_adv) + 1e-9.
    """
    nx, _, nt = chain.sizes

    def inp(lam):
        return _input_distortion(chain, input_kernel_family(nx, lam, "X"))

    def lat(lam):
        return _latent_distortion(chain, latent_kernel_family(nt, lam, "T"))

    if calibrate == "input":
        fixed, search = lat, inp
    elif calibrate == "latent":
        fixed, search = inp, lat
    else:
        raise ValidationError("calibrate must be 'input' or 'latent'")

    target, fixed_i_yt = fixed(noise_level)
    lam, found, ok = _calibrate(search, target, distortion_tol, max_iter)
    report = {"distortion": target, "calibrated": ok, "i_yt_prime": None, "i_yt_adv": None, "holds": None}
    if not ok:
        return report
    if calibrate == "input":
        report.update(input_noise=lam, latent_noise=noise_level, i_yt_prime=found[1], i_yt_adv=fixed_i_yt)
    else:
        report.update(input_noise=noise_level, latent_noise=lam, i_yt_prime=fixed_i_yt, i_yt_adv=found[1])
    report["distortion_gap"] = abs(found[0] - target)
    report["holds"] = report["i_yt_prime"] <= report["i_yt_adv"] + IDENTITY_TOL
    return report


def corollary1_check(
    four_stage_chain: FourStageChain,
    kernel_family: KernelFamily = symmetric_kernel,
    distortion_tol: float = 1e-6,
    **kwargs,
) -> dict:
    """Perturbing T1 versus perturbing T2 at matched distortion.

    ``i_yt_prime`` is I(Y;T2') with T1 perturbed and propagated,
    ``i_yt_adv`` is I(Y;T2_adv) with T2 perturbed directly.
    """
    return theorem2_check(four_stage_chain.as_chain(), kernel_family, kernel_family, distortion_tol, **kwargs)


def _random_stochastic(rng: np.random.Generator, rows: int, cols: int, sparsity: float) -> np.ndarray:
    alpha = rng.choice([0.1, 0.5, 1.0, 5.0])
    m = rng.dirichlet(np.full(cols, alpha), size=rows)
    if sparsity > 0:
        mask = rng.random((rows, cols)) < sparsity
        mask[np.arange(rows), rng.integers(0, cols, rows)] = False
        m = np.where(mask, 0.0, m)
        m /= m.sum(axis=1, keepdims=True)
    return m


def random_chain(rng: np.random.Generator, max_support: int = 8, sparsity: float | None = None) -> FiniteMarkovChain:
    """Random chain with supports in [2, max_support]; some channels get exact zeros."""
    if not 2 <= max_support <= MAX_SUPPORT:
        raise ValidationError(f"max_support must be in [2, {MAX_SUPPORT}]")
    ny, nx, nt = rng.integers(2, max_support + 1, size=3)
    sp = rng.choice([0.0, 0.0, 0.3]) if sparsity is None else sparsity
    return FiniteMarkovChain(
        rng.dirichlet(np.ones(ny)),
        _random_stochastic(rng, ny, nx, sp),
        _random_stochastic(rng, nx, nt, sp),
    )


def random_four_stage_chain(rng: np.random.Generator, max_support: int = 8) -> FourStageChain:
    base = random_chain(rng, max_support)
    nt = base.sizes[2]
    n2 = int(rng.integers(2, max_support + 1))
    return FourStageChain(
        base.prior_y, base.channel_x_given_y, base.channel_t_given_x, _random_stochastic(rng, nt, n2, 0.0)
    )


def to_bits(nats: float) -> float:
    return nats / math.log(2)


def _campaign_dpi(chain, rng):
    r = verify_dpi(chain)
    return r["i_yt"] - r["i_xy"], not r["holds"]


def _campaign_lemma2(chain, rng):
    joint = chain.joint()
    cmi = conditional_mutual_information(joint)
    gaps = [
        abs(expected_kl(chain) - cmi),
        abs(residual_information(chain) - cmi),
        abs(joint_mutual_information(joint) - mutual_information(chain.joint_xy())),
    ]
    gap = max(gaps)
    return gap, gap > IDENTITY_TOL


def _matched_input_perturbation(chain: FiniteMarkovChain, rng: np.random.Generator, candidates: int = 64):
    """Random (shift step, noise level) whose input distortion a latent kernel can match.

    Symmetric latent noise spans distortions [I(X;Y|T), I(X;Y)], so the input
    distortion has to land in that interval for calibration to exist.
    """
    nx = chain.sizes[0]
    lo = residual_information(chain)
    hi = mutual_information(chain.joint_xy())
    for _ in range(candidates):
        step = int(rng.integers(1, nx))
        lam = float(rng.uniform(0.0, 1.0))
        d, _ = _input_distortion(chain, shift_kernel(nx, lam, "X", step))
        if lo - 1e-12 <= d <= hi:
            return step, lam
    return None


def _campaign_thm2(chain: FiniteMarkovChain, rng, distortion_tol: float):
    pick = _matched_input_perturbation(chain, rng)
    if pick is None:
        return None, False
    step, lam = pick
    family = lambda size, level, target: shift_kernel(size, level, target, step)  # noqa: E731
    r = theorem2_check(chain, family, symmetric_kernel, distortion_tol, noise_level=lam, calibrate="latent")
    if not r["calibrated"]:
        return None, False
    return r["i_yt_prime"] - r["i_yt_adv"], not r["holds"]


CAMPAIGNS = ("dpi", "lemma2", "thm2", "cor1")


def run_campaign(
    kind: str,
    trials: int,
    seed: int = 0,
    max_support: int = 8,
    distortion_tol: float = 1e-6,
    max_attempts: int | None = None,
) -> dict:
    """Randomized identity/inequality campaign over random chains.

    For ``thm2``/``cor1`` a trial counts only once a matched-distortion pair is
    calibrated; chains that admit none are redrawn, up to ``max_attempts``.
    ``worst_gap`` is the largest violation margin seen (negative is good for
    inequalities, it is an absolute error for identities).
    """
    if kind not in CAMPAIGNS:
        raise ValidationError(f"unknown campaign {kind!r}; expected one of {CAMPAIGNS}")
    rng = np.random.default_rng(seed)
    if max_attempts is None:
        max_attempts = trials if kind in ("dpi", "lemma2") else 50 * trials
    violations = done = attempts = 0
    worst = -math.inf
    while done < trials and attempts < max_attempts:
        attempts += 1
        if kind == "cor1":
            chain = random_four_stage_chain(rng, max_support).as_chain()
        else:
            chain = random_chain(rng, max_support)
        if kind == "dpi":
            gap, bad = _campaign_dpi(chain, rng)
        elif kind == "lemma2":
            gap, bad = _campaign_lemma2(chain, rng)
        else:
            gap, bad = _campaign_thm2(chain, rng, distortion_tol)
        if gap is None:
            continue
        done += 1
        violations += int(bad)
        worst = max(worst, gap)
    return {
        "campaign": kind,
        "trials": done,
        "attempts": attempts,
        "violations": violations,
        "worst_gap": worst if done else None,
    }
