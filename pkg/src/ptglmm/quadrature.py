"""Gauss-Hermite rules and adaptive (mode-recentered) quadrature.

A Gauss-Hermite rule integrates q against the kernel exp(-v^2):

    integral q(v) exp(-v^2) dv  ~=  sum_r w_r q(u_r)

exactly for polynomials q of degree <= 2k-1.  The adaptive variant
recenters the rule at the mode v_hat of a log-concave integrand h and
rescales by the curvature s_hat^2 = -1 / (log h)''(v_hat):

    integral h(v) dv  ~=  s_hat sqrt(2) sum_r w_r exp(u_r^2) h(v_hat + s_hat sqrt(2) u_r)

With k = 1 this is the Laplace approximation, and the approximation is
exact for Gaussian integrands at any k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

__all__ = [
    "QuadratureRule",
    "AdaptiveState",
    "AdaptationError",
    "IntegrationError",
    "gh_rule",
    "adapt",
    "aghq_log_integral",
]

S_MIN = 1e-4  # floor for the adaptive scale
V_MAX = 50.0  # mode-search escape bound


class AdaptationError(RuntimeError):
    """Mode search failed (non-finite curvature or maximizer escape)."""


class IntegrationError(RuntimeError):
    """Every shifted integrand evaluation was -inf."""


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite nodes and weights for the exp(-v^2) kernel."""

    npoints: int
    nodes: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class AdaptiveState:
    """Per-subject recentering: mode v_hat and scale s_hat > 0."""

    v_hat: float
    s_hat: float


def gh_rule(k: int) -> QuadratureRule:
    """Gauss-Hermite rule with k points via the Golub-Welsch construction.

    The nodes are the eigenvalues of the symmetric tridiagonal Jacobi
    matrix with off-diagonal sqrt(i/2).  The weights use the equivalent
    Christoffel form of the first-eigenvector-component formula,
    w_i = 1 / sum_j ptilde_j(x_i)^2 over the orthonormal Hermite
    polynomials: the recurrence values grow like exp(x^2/2), so extreme
    weights stay positive where squared eigenvector components would
    underflow.  Nodes and weights are symmetrized so the rule is exactly
    even about 0.

    Args:
        k: node count, 1 <= k <= 100.
    """
    if not 1 <= k <= 100:
        raise ValueError(f"node count must be in [1, 100], got {k}")
    if k == 1:
        return QuadratureRule(1, np.zeros(1), np.array([math.sqrt(math.pi)]))
    diag = np.zeros(k)
    off = np.sqrt(np.arange(1, k) / 2.0)
    nodes = eigh_tridiagonal(diag, off, eigvals_only=True)
    # orthonormal recurrence: b_{j+1} ptilde_{j+1} = x ptilde_j - b_j ptilde_{j-1}
    p_prev = np.zeros(k)
    p_cur = np.full(k, math.pi ** -0.25)
    total = p_cur * p_cur
    for j in range(k - 1):
        b_j = off[j - 1] if j > 0 else 0.0
        p_next = (nodes * p_cur - b_j * p_prev) / off[j]
        p_prev, p_cur = p_cur, p_next
        total += p_cur * p_cur
    weights = 1.0 / total
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return QuadratureRule(k, nodes, weights)


def adapt(log_h, init: float = 0.0, *, step: float = 1e-4, tol: float = 1e-8,
          max_iter: int = 50, s_min: float = S_MIN) -> AdaptiveState:
    """Locate the mode and curvature scale of a log-integrand.

    Safeguarded Newton iteration on numeric central first/second
    differences of log_h, starting from init and falling back to step
    halving whenever the proposed point does not improve log_h.

    Args:
        log_h: callable returning log h(v) for scalar v.
        init: starting point; log_h(init) must be finite.
        step: central-difference step.
        tol: stop when the accepted Newton step is below this.
        max_iter: Newton iteration cap.
        s_min: floor for the returned scale.

    Returns:
        AdaptiveState with v_hat the located maximizer and
        s_hat = sqrt(max(s_min^2, -1 / (log h)''(v_hat))).

    Raises:
        AdaptationError: non-finite values at init, non-finite curvature,
            or the iterate escaping beyond |v| > 50.
    """
    v = float(init)
    g0 = log_h(v)
    if not np.isfinite(g0):
        raise AdaptationError(f"log integrand not finite at init {v}")
    d2 = np.nan
    for _ in range(max_iter):
        gp = log_h(v + step)
        gm = log_h(v - step)
        if not (np.isfinite(gp) and np.isfinite(gm)):
            raise AdaptationError(f"log integrand not finite near v = {v}")
        d1 = (gp - gm) / (2.0 * step)
        d2 = (gp - 2.0 * g0 + gm) / (step * step)
        if not np.isfinite(d2):
            raise AdaptationError(f"non-finite curvature at v = {v}")
        if d2 < 0.0:
            delta = -d1 / d2
        else:
            delta = math.copysign(2.0, d1)  # non-concave: probe uphill
        if abs(delta) > 10.0:
            delta = math.copysign(10.0, delta)
        # halve until the step improves log h (safeguard)
        accepted = False
        for _ in range(30):
            cand = v + delta
            gc = log_h(cand)
            if np.isfinite(gc) and gc >= g0 - 1e-13:
                accepted = True
                break
            delta *= 0.5
        if not accepted:
            break
        v, g0 = cand, gc
        if abs(v) > V_MAX:
            raise AdaptationError(f"mode search escaped to |v| = {abs(v):.2f} > {V_MAX}")
        if abs(delta) < tol:
            break
    gp = log_h(v + step)
    gm = log_h(v - step)
    d2 = (gp - 2.0 * g0 + gm) / (step * step)
    if not np.isfinite(d2):
        raise AdaptationError(f"non-finite curvature at mode {v}")
    s2 = max(s_min * s_min, -1.0 / d2 if d2 < 0.0 else 0.0)
    return AdaptiveState(v_hat=v, s_hat=math.sqrt(s2))


def aghq_log_integral(log_h, rule: QuadratureRule, state: AdaptiveState) -> float:
    """Log of the adaptive Gauss-Hermite approximation of integral h.

    Evaluates log[s_hat sqrt(2) sum_r w_r exp(u_r^2) h(v_hat + s_hat
    sqrt(2) u_r)] by log-sum-exp.  With a 1-point rule this equals the
    Laplace approximation log h(v_hat) + 0.5 log(2 pi s_hat^2).

    Raises:
        IntegrationError: if h is zero (log h = -inf) at every node.
    """
    if state.s_hat <= 0 or not np.isfinite(state.v_hat):
        raise ValueError("invalid adaptive state")
    shift = state.v_hat + state.s_hat * math.sqrt(2.0) * rule.nodes
    terms = np.array([log_h(v) for v in shift])
    terms = terms + np.log(rule.weights) + rule.nodes ** 2
    m = terms.max()
    if not np.isfinite(m):
        raise IntegrationError("integrand vanished at every quadrature node")
    return float(
        math.log(state.s_hat * math.sqrt(2.0))
        + m
        + math.log(np.exp(terms - m).sum())
    )
