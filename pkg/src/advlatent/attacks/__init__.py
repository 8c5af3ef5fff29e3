"""Input-space and latent-space adversarial attacks under l2 / l_inf budgets."""

from .base import (
    ALL_ATTACKS,
    ALLOWED_NORMS,
    DECISION_ATTACKS,
    GRADIENT_ATTACKS,
    NORM_SLACK,
    SCORE_ATTACKS,
    AttackConfig,
    AttackError,
    AttackResult,
    Budget,
    CapabilityError,
    Oracle,
    budget_to_sigma,
    lp_norm,
    margin_loss,
    predict,
    project_batch,
    project_lp,
    sample_generator,
)
from .decision import Search, decision_attack, minimize_distortion
from .gradient import gradient_attack
from .score import score_attack


def run_attack(config: AttackConfig, oracle: Oracle, z, y, sample_ids=None) -> list[AttackResult]:
    """Dispatch to the gradient, score or decision family of ``config.algorithm``."""
    fn = {"gradient": gradient_attack, "score": score_attack, "decision": decision_attack}[config.family]
    return fn(config, oracle, z, y, sample_ids)


__all__ = [
    "ALL_ATTACKS",
    "ALLOWED_NORMS",
    "DECISION_ATTACKS",
    "GRADIENT_ATTACKS",
    "NORM_SLACK",
    "SCORE_ATTACKS",
    "AttackConfig",
    "AttackError",
    "AttackResult",
    "Budget",
    "CapabilityError",
    "Oracle",
    "Search",
    "budget_to_sigma",
    "decision_attack",
    "gradient_attack",
    "lp_norm",
    "margin_loss",
    "minimize_distortion",
    "predict",
    "project_batch",
    "project_lp",
    "run_attack",
    "sample_generator",
    "score_attack",
]
