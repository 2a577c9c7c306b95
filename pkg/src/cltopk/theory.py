"""Closed-form evaluators for the compression scheme's analytical results:
contraction coefficients, the admissible filter-factor range, the memory
recursion constants, the explicit convergence bound, and the rate guidance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


def contraction_from_overlap(d: int | float, k: int, gamma0: float) -> float:
    """Contraction coefficient of sparsifying on a support at normalized
    distance d/k from the exact top-k:  gamma = d/k + (1 - d/k) * gamma0.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    if not 0 <= d <= k:
        raise ValueError(f"d={d} out of range for k={k}")
    if not 0.0 <= gamma0 <= 1.0:
        raise ValueError(f"gamma0={gamma0} outside [0, 1]")
    ratio = d / k
    return ratio + (1.0 - ratio) * gamma0


def combined_contraction(
    gammas: Sequence[float], kappa: float, n: int | None = None
) -> float | None:
    """Contraction of the worker-averaged vector from per-worker coefficients
    and a positive-correlation floor kappa.

    Returns None (infeasible) unless kappa > (n * sum(gammas) - 1) / (n(n-1)),
    in which case the result  n * sum(gammas) / (1 + kappa * n * (n-1))  is
    guaranteed < 1.
    """
    gammas = list(gammas)
    if n is None:
        n = len(gammas)
    if n != len(gammas):
        raise ValueError(f"n={n} does not match {len(gammas)} coefficients")
    if n < 2:
        raise ValueError("combined contraction needs at least 2 workers")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    for g in gammas:
        if not 0.0 <= g <= 1.0:
            raise ValueError(f"per-worker coefficient {g} outside [0, 1]")
    total = float(sum(gammas))
    threshold = (n * total - 1.0) / (n * (n - 1.0))
    if not kappa > threshold:
        return None
    return n * total / (1.0 + kappa * n * (n - 1.0))


def admissible_beta_range(gamma: float) -> tuple[float, float]:
    """Open interval of filter factors for which the averaged-memory
    recursion contracts:

        (1 + g -/+ sqrt(1 - g^2)) / (2 (1 + g))

    Collapses toward {1/2} as gamma -> 1; infeasible for gamma >= 1.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma={gamma} must lie in [0, 1)")
    root = math.sqrt(1.0 - gamma * gamma)
    denom = 2.0 * (1.0 + gamma)
    return ((1.0 + gamma - root) / denom, (1.0 + gamma + root) / denom)


def lambda_factor(beta: float, gamma: float, eps: float) -> float:
    """Per-step factor of the memory-gap recursion:

        lambda = (1 + eps)(1 + gamma) beta^2 + (1 + gamma)(1 - beta)^2

    The recursion is summable iff lambda < 1.
    """
    return (1.0 + eps) * (1.0 + gamma) * beta * beta + (1.0 + gamma) * (1.0 - beta) ** 2


def epsilon_ceiling(beta: float, gamma: float) -> float:
    """Largest slack admissible in the Young-inequality split:

        C_eps = (1 - (1 + gamma)(beta - 1)^2) / ((1 + gamma) beta^2) - 1

    Positive exactly when beta lies strictly inside admissible_beta_range.
    """
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    g1 = 1.0 + gamma
    return (1.0 - g1 * (beta - 1.0) ** 2) / (g1 * beta * beta) - 1.0


def mean_memory_norm_bound(
    beta: float, gamma: float, g_bound: float, sigma: float, n: int, eps: float
) -> float:
    """Steady-state bound on the squared norm of the averaged memory:

        beta^2 (1 + gamma) G^2 (1 + 1/eps) (G^2 + sigma^2 / n) * lambda / (1 - lambda)

    Raises if the recursion factor lambda is not < 1.
    """
    lam = lambda_factor(beta, gamma, eps)
    if not lam < 1.0:
        raise ValueError(f"recursion factor lambda={lam} >= 1: bound infeasible")
    return (
        beta * beta
        * (1.0 + gamma)
        * g_bound * g_bound
        * (1.0 + 1.0 / eps)
        * (g_bound * g_bound + sigma * sigma / n)
        * lam / (1.0 - lam)
    )


@dataclass(frozen=True)
class BoundInputs:
    """Constants for the explicit convergence bound.

    gap       : f(theta_1) - f_star
    g_bound   : gradient-norm bound G along the trajectory
    lipschitz : gradient Lipschitz constant L
    sigma     : gradient-noise level (E||noise||^2 <= sigma^2)
    gamma     : contraction coefficient, in [0, 1)
    beta      : filter factor, strictly inside admissible_beta_range(gamma)
    eps       : Young slack, in (0, epsilon_ceiling(beta, gamma))
    workers   : worker count n
    lr_scale  : c in the step-size rule alpha = c * sqrt(n) / (sigma * sqrt(T))
    """

    gap: float
    g_bound: float
    lipschitz: float
    sigma: float
    gamma: float
    beta: float
    eps: float
    workers: int
    lr_scale: float = 1.0


def convergence_bound(inputs: BoundInputs, t_grid: Sequence[int]) -> np.ndarray:
    """Evaluate the explicit right-hand side of the stationarity bound for
    each horizon T, with alpha = lr_scale * sqrt(n) / (sigma * sqrt(T)):

        gap / (2 T alpha)
        + 3 alpha^2 (1+gamma) L^2 G^2 (1 + 1/eps) (G^2 + sigma^2/n) lambda/(1-lambda)
        + 2 alpha L sigma^2 / n

    The first and last terms carry the 1/sqrt(nT) decay; the middle term is
    the O(1/T) residual of the memory recursion.
    """
    if inputs.sigma <= 0:
        raise ValueError("sigma must be positive")
    lam = lambda_factor(inputs.beta, inputs.gamma, inputs.eps)
    if not lam < 1.0:
        raise ValueError(f"recursion factor lambda={lam} >= 1: bound infeasible")
    n = inputs.workers
    g2 = inputs.g_bound * inputs.g_bound
    residual_coeff = (
        3.0
        * (1.0 + inputs.gamma)
        * inputs.lipschitz**2
        * g2
        * (1.0 + 1.0 / inputs.eps)
        * (g2 + inputs.sigma**2 / n)
        * lam / (1.0 - lam)
    )
    out = np.empty(len(t_grid), dtype=np.float64)
    for i, t in enumerate(t_grid):
        if t <= 0:
            raise ValueError("horizons must be positive")
        alpha = inputs.lr_scale * math.sqrt(n) / (inputs.sigma * math.sqrt(t))
        out[i] = (
            inputs.gap / (2.0 * t * alpha)
            + alpha * alpha * residual_coeff
            + 2.0 * alpha * inputs.lipschitz * inputs.sigma**2 / n
        )
    return out


def recommend_compression_rate(flops_per_gradient_ratio: float) -> int:
    """Conservative per-layer rate guidance keyed on the FLOPs-per-gradient
    ratio: heavy-compute layers tolerate little compression overheadwise,
    so they get the milder rates.

    [196, inf) -> 25x, [128, 196) -> 50x, (0, 128) -> 400x.
    """
    r = float(flops_per_gradient_ratio)
    if r <= 0:
        raise ValueError("ratio must be positive")
    if r >= 196:
        return 25
    if r >= 128:
        return 50
    return 400
