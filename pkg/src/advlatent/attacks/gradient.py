"""White-box gradient attacks: FGSM, BIM, MIM and PGD (l2 / linf)."""

from __future__ import annotations

import torch

from .base import (
    GRADIENT_ATTACKS,
    AttackConfig,
    AttackError,
    AttackResult,
    CapabilityError,
    Oracle,
    box_clip,
    cross_entropy,
    lp_norm,
    perturbed_point,
    predict,
    project_batch,
    sample_generator,
)


def _random_start(z0: torch.Tensor, sigma: float, norm: str, gens: list[torch.Generator]) -> torch.Tensor:
    rows = []
    for i, g in enumerate(gens):
        shape = z0[i].shape
        if norm == "linf":
            rows.append((torch.rand(shape, generator=g, dtype=z0.dtype) * 2 - 1) * sigma)
        else:
            d = torch.randn(shape, generator=g, dtype=z0.dtype)
            n = z0[i].numel()
            r = torch.rand((), generator=g, dtype=z0.dtype) ** (1.0 / n)
            rows.append(d / d.norm().clamp(min=1e-30) * r * sigma)
    return torch.stack(rows)


def _ascent_direction(grad: torch.Tensor, norm: str) -> torch.Tensor:
    if norm == "linf":
        return grad.sign()
    n = grad.reshape(grad.shape[0], -1).norm(dim=1).clamp(min=1e-30)
    return grad / n.reshape(-1, *([1] * (grad.ndim - 1)))


def gradient_attack(
    config: AttackConfig,
    oracle: Oracle,
    z: torch.Tensor,
    y: torch.Tensor,
    sample_ids=None,
) -> list[AttackResult]:
    """Run FGSM / BIM / MIM / PGD on a batch of attacked tensors ``z``.

    Samples stop being updated once misclassified; the first successful
    iterate is kept. Input-space iterates are clipped to [0, 1].
    """
    algo = config.algorithm
    if algo not in GRADIENT_ATTACKS:
        raise AttackError(f"{algo} is not a gradient attack")
    if not oracle.has_gradients:
        raise CapabilityError(f"{algo} needs gradients from the oracle")
    z0 = z.detach()
    n = z0.shape[0]
    ids = list(range(n)) if sample_ids is None else list(sample_ids)
    budget = config.budget(z0[0].numel())
    sigma, norm, space = budget.sigma, config.norm, config.space
    steps = 1 if algo == "FGSM" else max(int(config.steps), 1)
    # one query per step plus a final check must fit the query budget
    steps = max(min(steps, int(config.query_budget) - 1), 0)
    step = sigma if algo == "FGSM" else config.params.get("step_size", 2.5 * sigma / steps)
    mu = config.params.get("momentum", 1.0)
    loss_fn = cross_entropy

    if algo == "PGD" and sigma > 0:
        gens = [sample_generator(config.seed, i) for i in ids]
        delta = box_clip(z0, project_batch(_random_start(z0, sigma, norm, gens), sigma, norm), space)
    else:
        delta = torch.zeros_like(z0)
    momentum = torch.zeros_like(z0)
    done = torch.zeros(n, dtype=torch.bool)
    best = delta.clone()
    queries = torch.zeros(n, dtype=torch.long)

    for _ in range(steps):
        active = ~done
        if not torch.any(active):
            break
        idx = torch.nonzero(active)[:, 0]
        logits, grad = oracle.loss_and_grad(z0[idx] + delta[idx], y[idx], loss_fn)
        queries[idx] += 1
        hit = predict(logits) != y[idx]
        if torch.any(hit):
            best[idx[hit]] = delta[idx[hit]]
            done[idx[hit]] = True
        move = idx[~hit]
        if move.numel() == 0:
            continue
        g = grad[~hit]
        if algo == "MIM":
            l1 = g.reshape(g.shape[0], -1).abs().sum(dim=1).clamp(min=1e-30)
            momentum[move] = mu * momentum[move] + g / l1.reshape(-1, *([1] * (g.ndim - 1)))
            g = momentum[move]
        d = delta[move] + step * _ascent_direction(g, norm)
        delta[move] = box_clip(z0[move], project_batch(d, sigma, norm), space)

    rest = torch.nonzero(~done)[:, 0]
    if rest.numel():
        with torch.no_grad():
            final = predict(oracle.forward(z0[rest] + delta[rest]))
        queries[rest] += 1
        best[rest] = delta[rest]
        done[rest] = final != y[rest]

    perturbed = perturbed_point(z0, best, space)
    achieved = lp_norm(perturbed - z0, norm)
    out = []
    for i in range(n):
        out.append(
            AttackResult(
                sample_id=ids[i],
                success=bool(done[i]),
                queries_used=int(queries[i]),
                achieved_norm=float(achieved[i]),
                perturbed=perturbed[i],
                algorithm=algo,
                space=space,
                norm=norm,
                epsilon=config.epsilon,
            )
        )
    return out
