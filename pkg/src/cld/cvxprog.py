"""The convex training objective: squared loss plus a group-norm penalty.

The fit term couples the gated operator to one-hot targets; the penalty is
either the column-wise group norm (``l21``: sum of per-class column norms
over all blocks) or the blockwise Frobenius norm (``frobenius``). Both admit
closed-form proximal maps (group soft-thresholding), which is what both
solvers lean on. In split mode the weight stack carries two signed copies per
pattern and each column is additionally constrained to its pattern cone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gates import ConeSpec, cone_violation
from .linops import GatedOperator

PENALTY_KINDS = ("l21", "frobenius")
MODES = ("relaxed", "exact")


def loss(pred: np.ndarray, Y: np.ndarray) -> float:
    """Squared loss (1/2) ||pred - Y||_F^2."""
    pred = np.asarray(pred, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if pred.shape != Y.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {Y.shape}")
    diff = pred - Y
    return 0.5 * float(np.vdot(diff, diff))


def loss_grad(pred: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return np.asarray(pred, dtype=np.float64) - np.asarray(Y, dtype=np.float64)


def _group_norms(S: np.ndarray, kind: str) -> np.ndarray:
    """Norm of every penalty group; columns for l21, whole blocks for frobenius."""
    if kind == "l21":
        return np.linalg.norm(S, axis=1)          # (B, K)
    if kind == "frobenius":
        return np.linalg.norm(S.reshape(S.shape[0], -1), axis=1)  # (B,)
    raise ValueError(f"unknown penalty kind {kind!r}")


def penalty(S: np.ndarray, kind: str) -> float:
    """Group-norm penalty of a (B, d, K) weight stack."""
    return float(_group_norms(np.asarray(S, dtype=np.float64), kind).sum())


def group_prox(Z: np.ndarray, threshold: float, kind: str) -> np.ndarray:
    """Proximal map of ``threshold * penalty``: shrink each group toward zero.

    A group g becomes max(0, 1 - threshold/||g||) * g; groups inside the
    shrinkage ball vanish exactly, and zero groups stay zero.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    Z = np.asarray(Z, dtype=np.float64)
    norms = _group_norms(Z, kind)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > threshold, 1.0 - threshold / norms, 0.0)
    if kind == "l21":
        return scale[:, None, :] * Z
    return scale[:, None, None] * Z


@dataclass(frozen=True)
class ConvexProblem:
    """One training instance: operator, targets, penalty, and mode."""

    op: GatedOperator
    Y: np.ndarray
    beta: float
    penalty_kind: str = "l21"
    mode: str = "relaxed"
    cones: tuple[ConeSpec, ...] = ()

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.penalty_kind not in PENALTY_KINDS:
            raise ValueError(f"penalty_kind must be one of {PENALTY_KINDS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        Y = np.asarray(self.Y, dtype=np.float64)
        if Y.shape != (self.op.n, self.op.K):
            raise ValueError(f"targets must have shape {(self.op.n, self.op.K)}, got {Y.shape}")
        object.__setattr__(self, "Y", Y)
        if self.mode == "exact":
            if len(self.cones) * 2 != self.op.B:
                raise ValueError("exact mode needs one cone per pattern (operator has 2P blocks)")
        object.__setattr__(self, "cones", tuple(self.cones))

    @property
    def P(self) -> int:
        return self.op.B // 2 if self.mode == "exact" else self.op.B


@dataclass(frozen=True)
class ObjectiveValue:
    total: float
    fit: float
    penalty: float
    cone_violation: float = 0.0


def max_cone_violation(prob: ConvexProblem, S: np.ndarray) -> float:
    """Worst half-space violation over all blocks and class columns."""
    worst = 0.0
    for b in range(S.shape[0]):
        cone = prob.cones[b % len(prob.cones)]
        for k in range(S.shape[2]):
            worst = max(worst, cone_violation(cone, S[b, :, k]))
    return worst


def objective(prob: ConvexProblem, S: np.ndarray) -> ObjectiveValue:
    """Evaluate fit, penalty, and (in split mode) cone violation at S."""
    S = np.asarray(S, dtype=np.float64)
    fit = loss(prob.op.apply(S), prob.Y)
    pen = penalty(S, prob.penalty_kind)
    viol = 0.0
    if prob.mode == "exact" and prob.cones:
        viol = max_cone_violation(prob, S)
    return ObjectiveValue(fit + prob.beta * pen, fit, pen, viol)
