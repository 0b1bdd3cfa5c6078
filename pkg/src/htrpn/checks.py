"""Self-checks for the contrastive loss: naive oracle, finite differences,
and the loss-decomposition identities.
"""

from __future__ import annotations

import math

import numpy as np

from htrpn.losses import (
    FEATURE_DIM,
    ContrastiveBatch,
    LossWeights,
    sup_con_grad,
    tcon_loss,
    total_loss,
)


def naive_tcon_loss(features, labels, ious, tau: float, phi: float) -> float:
    """Direct triple loop over the loss definition, plain Python floats."""
    n = len(labels)
    unit = []
    for f in features:
        norm = math.sqrt(sum(float(v) * float(v) for v in f))
        unit.append([float(v) / norm for v in f])

    def dot(a, b):
        return sum(x * y for x, y in zip(a, b))

    total = 0.0
    for i in range(n):
        if not ious[i] >= phi:
            continue
        same = sum(1 for j in range(n) if labels[j] == labels[i])
        if same < 2:
            continue
        denom = sum(math.exp(dot(unit[i], unit[k]) / tau) for k in range(n) if k != i)
        acc = 0.0
        for j in range(n):
            if j != i and labels[j] == labels[i]:
                acc += math.log(math.exp(dot(unit[i], unit[j]) / tau) / denom)
        total += -acc / (same - 1)
    return total / n


def numerical_grad(batch: ContrastiveBatch, tau: float, phi: float, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of :func:`tcon_loss` in every feature entry."""
    z = batch.features
    grad = np.zeros_like(z)
    for idx in np.ndindex(*z.shape):
        zp = z.copy()
        zm = z.copy()
        zp[idx] += h
        zm[idx] -= h
        lp = tcon_loss(ContrastiveBatch(zp, batch.labels, batch.ious), tau, phi)
        lm = tcon_loss(ContrastiveBatch(zm, batch.labels, batch.ious), tau, phi)
        grad[idx] = (lp - lm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``max|a - n| / max(max|a|, max|n|)``; 0 when both vanish."""
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    diff = float(np.abs(analytic - numeric).max(initial=0.0))
    if scale == 0.0:
        return diff
    return diff / scale


def random_batch(
    rng: np.random.Generator,
    max_n: int,
    dim: int = FEATURE_DIM,
    phi: float = 0.7,
    min_n: int = 2,
) -> ContrastiveBatch:
    n = int(rng.integers(min_n, max_n + 1))
    features = rng.normal(size=(n, dim))
    labels = rng.integers(0, 3, size=n)
    # about a quarter fall below phi so zero weights occur too
    ious = np.where(rng.random(n) < 0.75, rng.uniform(phi, 1.0, n), rng.uniform(0.0, phi, n))
    return ContrastiveBatch(features, labels, ious)


def run_losscheck(
    weights: LossWeights,
    seed: int = 0,
    grad_batches: int = 100,
    oracle_batches: int = 1000,
    perturb: float = 0.0,
    grad_tol: float = 1e-5,
    oracle_tol: float = 1e-12,
) -> dict:
    """Gradient check, oracle equivalence and decomposition residuals.

    ``perturb`` scales the analytic gradient by ``1 + perturb``, a negative
    control that must make the check fail.
    """
    rng = np.random.default_rng(seed)
    tau, phi = weights.tau, weights.phi

    worst_grad = 0.0
    for _ in range(grad_batches):
        batch = random_batch(rng, 6, phi=phi)
        analytic = sup_con_grad(batch, tau, phi) * (1.0 + perturb)
        worst_grad = max(worst_grad, relative_error(analytic, numerical_grad(batch, tau, phi)))

    worst_oracle = 0.0
    for _ in range(oracle_batches):
        batch = random_batch(rng, 8, phi=phi, min_n=1)
        fast = tcon_loss(batch, tau, phi)
        slow = naive_tcon_loss(batch.features, batch.labels.tolist(), batch.ious.tolist(), tau, phi)
        worst_oracle = max(worst_oracle, abs(fast - slow))

    worst_tobj = worst_total = 0.0
    for _ in range(100):
        parts = rng.uniform(0.0, 5.0, size=5)
        b = total_loss(
            l_cls=parts[0], l_bbox=parts[1], l_obj=parts[2], l_tcon=parts[3], l_contra=parts[4],
            weights=weights,
        )
        worst_tobj = max(worst_tobj, abs(b.l_tobj - (parts[2] + weights.lam * parts[3])))
        worst_total = max(
            worst_total, abs(b.total - (parts[0] + parts[1] + b.l_tobj + weights.alpha * parts[4]))
        )

    checks = {
        "gradient": worst_grad < grad_tol,
        "oracle": worst_oracle <= oracle_tol,
        "decomposition": worst_tobj <= 1e-12 and worst_total <= 1e-12,
    }
    return {
        "status": "PASS" if all(checks.values()) else "FAIL",
        "checks": checks,
        "max_grad_rel_error": worst_grad,
        "grad_tolerance": grad_tol,
        "grad_batches": grad_batches,
        "max_oracle_abs_error": worst_oracle,
        "oracle_tolerance": oracle_tol,
        "oracle_batches": oracle_batches,
        "tobj_identity_residual": worst_tobj,
        "total_identity_residual": worst_total,
        "perturb": perturb,
        "weights": weights.to_dict(),
    }
