"""Consensus ADMM trainer for the convex detection-head program.

The smooth fit variable u is coupled to consensus copies through scaled
duals: z1 receives the group-norm penalty via its proximal map, and (in split
mode) z2 receives the pattern-cone constraints via projection. One iteration
performs

    1. u    <- solve (F^T F + c rho I) u = F^T Y + rho sum_copies (z - lam)
              by preconditioned conjugate gradients (c = number of copies),
    2. z1   <- group_prox(u + lam1, beta / rho),
    3. z2   <- project_cone(u + lam2) blockwise (split mode only),
    4. lam  <- lam + (u - z),

with primal residual ||u - z||_F and dual residual rho ||z - z_prev||_F.
Fixed points are exactly the minimisers of the convex objective.

Final weights are read from z1, whose prox step produces exact group
sparsity; in split mode the kept columns get one tight cone projection so the
stored weights are feasible to projection tolerance.

Note on defaults: rho = 1e-4 and beta = 1e-3 give a prox threshold beta/rho
of 10, far above the weight scale of unit-scale embedding problems, so short
default runs leave z1 at zero. Runs that must reach the optimum (oracle
comparisons, benchmarks) should pass a larger rho and iteration budget, e.g.
rho ~ 0.1 with a few hundred iterations and ``stop_tol`` set.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import cert as _cert
from . import head as _head
from .cvxprog import ConvexProblem, ObjectiveValue, group_prox, objective
from .dataio import FeatureMatrix, LabelSet
from .gates import ConeSpec, enumerate_patterns, exact_cone_project, sample_gates
from .linops import GatedOperator, PcgConfig, nystrom_precond, pcg_solve


@dataclass(frozen=True)
class GateConfig:
    """How to obtain the activation patterns for training."""

    count: int = 32
    seed: int = 0
    dedup: bool = True
    enumerate_all: bool = False


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 1e-4
    beta: float = 1e-3
    admm_iters: int = 6
    pcg: PcgConfig = field(default_factory=PcgConfig)
    mode: str = "relaxed"
    penalty_kind: str = "l21"
    seed: int = 0
    stop_tol: float | None = None     # set (e.g. 1e-6) to stop on small residuals
    project_tol: float = 1e-10        # final cone cleanup of stored weights

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.admm_iters < 1:
            raise ValueError("admm_iters must be >= 1")


@dataclass(frozen=True)
class IterationRecord:
    objective: ObjectiveValue
    primal: float
    dual: float
    pcg_iters: int


@dataclass(frozen=True)
class AdmmState:
    u: np.ndarray
    z1: np.ndarray
    lam1: np.ndarray
    z2: np.ndarray | None = None
    lam2: np.ndarray | None = None
    history: tuple[IterationRecord, ...] = ()
    projection_failures: int = 0

    @property
    def primal_res(self) -> float:
        return self.history[-1].primal if self.history else float("inf")

    @property
    def dual_res(self) -> float:
        return self.history[-1].dual if self.history else float("inf")


class TrainingError(ValueError):
    """Degenerate training input."""


class ConeProjectorBatch:
    """Project every consensus column onto its pattern cone in one shot.

    Works in the dual: the projection of x onto {v : a_i . v >= 0} is
    x + A^T mu* with mu* >= 0 minimising ||A^T mu + x||. All blocks share the
    data rows (only the signs differ), so one accelerated projected-gradient
    run updates the whole (B, n, m) dual stack; the dual state persists
    between calls, which makes successive consensus projections cheap once
    the targets settle. Convergence is judged on worst half-space violation
    plus complementarity slackness of the primal iterate.
    """

    def __init__(self, X: np.ndarray, active: np.ndarray, tol: float = 1e-8,
                 max_iters: int = 2000):
        self.X = np.asarray(X, dtype=np.float64)
        self.signs = np.where(np.asarray(active, dtype=bool), 1.0, -1.0)  # (B, n)
        gram = self.X.T @ self.X
        self.L = max(float(np.linalg.eigvalsh(gram).max()), np.finfo(np.float64).tiny)
        self.tol = tol
        self.max_iters = max_iters
        self.mu: np.ndarray | None = None

    def _primal(self, target: np.ndarray, mu: np.ndarray) -> np.ndarray:
        return target + np.einsum("nd,bnm->bdm", self.X, self.signs[:, :, None] * mu)

    def _slack(self, v: np.ndarray) -> np.ndarray:
        return self.signs[:, :, None] * np.einsum("nd,bdm->bnm", self.X, v)

    def project(self, target: np.ndarray) -> tuple[np.ndarray, bool]:
        target = np.asarray(target, dtype=np.float64)
        B, _, m = target.shape
        n = self.X.shape[0]
        if self.mu is None or self.mu.shape != (B, n, m):
            self.mu = np.zeros((B, n, m))
        mu = self.mu
        mom = mu.copy()
        t = 1.0
        scale = max(1.0, float(np.abs(target).max()))
        prev_obj = np.inf
        for it in range(self.max_iters):
            v = self._primal(target, mom)
            slack = self._slack(v)
            grad = slack  # d/dmu (1/2)||A^T mu + x||^2 = A v
            cand = np.maximum(0.0, mom - grad / self.L)
            v_cand = self._primal(target, cand)
            obj = 0.5 * float(np.vdot(v_cand, v_cand))
            if obj > prev_obj:
                mom, t = mu, 1.0  # momentum restart
                v = self._primal(target, mom)
                cand = np.maximum(0.0, mom - self._slack(v) / self.L)
                v_cand = self._primal(target, cand)
                obj = 0.5 * float(np.vdot(v_cand, v_cand))
            t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
            mom = cand + ((t - 1.0) / t_next) * (cand - mu)
            mu, t, prev_obj = cand, t_next, obj
            if it % 4 == 0 or it == self.max_iters - 1:
                slack_c = self._slack(v_cand)
                viol = max(0.0, -float(slack_c.min()))
                comp = float(np.abs(mu * slack_c).max())
                if viol <= self.tol * scale and comp <= np.sqrt(self.tol) * scale:
                    self.mu = mu
                    return v_cand, True
        self.mu = mu
        return self._primal(target, mu), False


def init_state(prob: ConvexProblem) -> AdmmState:
    shape = prob.op.block_shape
    zeros = np.zeros(shape)
    if prob.mode == "exact":
        return AdmmState(zeros, zeros.copy(), zeros.copy(), zeros.copy(), zeros.copy())
    return AdmmState(zeros, zeros.copy(), zeros.copy())


def _fit_matvec(prob: ConvexProblem):
    op = prob.op
    return lambda S: op.adjoint(op.apply(S))


def build_preconditioner(prob: ConvexProblem, cfg: AdmmConfig):
    """Preconditioner for F^T F + c rho I per the pcg config (or None)."""
    copies = 2 if prob.mode == "exact" else 1
    sigma = copies * cfg.rho
    if cfg.pcg.preconditioner == "identity":
        return None
    if cfg.pcg.preconditioner == "jacobi":
        diag = prob.op.gram_diag() + sigma
        return lambda r: r / diag
    dim = int(np.prod(prob.op.block_shape))
    rank = min(cfg.pcg.rank, dim)
    return nystrom_precond(_fit_matvec(prob), dim, rank, sigma=sigma,
                           seed=cfg.seed, shape=prob.op.block_shape)


def admm_step(prob: ConvexProblem, cfg: AdmmConfig, state: AdmmState,
              precond=None, projector=None) -> AdmmState:
    """One consensus iteration; returns the advanced state."""
    if prob.mode != cfg.mode:
        raise ValueError(f"problem mode {prob.mode!r} != config mode {cfg.mode!r}")
    op = prob.op
    copies = 2 if prob.mode == "exact" else 1
    rho = cfg.rho
    fit_mv = _fit_matvec(prob)
    matvec = lambda S: fit_mv(S) + copies * rho * S

    rhs = op.adjoint(prob.Y) + rho * (state.z1 - state.lam1)
    if copies == 2:
        rhs = rhs + rho * (state.z2 - state.lam2)
    if precond is None and cfg.pcg.preconditioner != "identity":
        precond = build_preconditioner(prob, cfg)
    sol = pcg_solve(matvec, rhs, cfg.pcg, precond=precond, x0=state.u)
    u = sol.x

    z1 = group_prox(u + state.lam1, cfg.beta / rho, prob.penalty_kind)
    lam1 = state.lam1 + u - z1

    z2 = lam2 = None
    failures = state.projection_failures
    if copies == 2:
        if projector is None:
            projector = ConeProjectorBatch(op.X, op.masks.astype(bool))
        z2, ok = projector.project(u + state.lam2)
        failures += 0 if ok else 1
        lam2 = state.lam2 + u - z2

    primal_sq = float(np.vdot(u - z1, u - z1))
    dual_sq = float(np.vdot(z1 - state.z1, z1 - state.z1))
    if copies == 2:
        primal_sq += float(np.vdot(u - z2, u - z2))
        dual_sq += float(np.vdot(z2 - state.z2, z2 - state.z2))
    record = IterationRecord(
        objective=objective(prob, z1),
        primal=float(np.sqrt(primal_sq)),
        dual=rho * float(np.sqrt(dual_sq)),
        pcg_iters=sol.iters,
    )
    return AdmmState(u, z1, lam1, z2, lam2, state.history + (record,), failures)


def residuals(state: AdmmState) -> tuple[float, float]:
    """Latest (primal, dual) residual pair."""
    return state.primal_res, state.dual_res


def admm_solve(prob: ConvexProblem, cfg: AdmmConfig, log=None) -> AdmmState:
    """Run the configured number of iterations (or stop on small residuals)."""
    state = init_state(prob)
    precond = build_preconditioner(prob, cfg)
    projector = None
    if prob.mode == "exact":
        projector = ConeProjectorBatch(prob.op.X, prob.op.masks.astype(bool))
    for it in range(cfg.admm_iters):
        tick = time.perf_counter()
        state = admm_step(prob, cfg, state, precond=precond, projector=projector)
        if log is not None:
            rec = state.history[-1]
            log({
                "iter": it,
                "objective": rec.objective.total,
                "fit": rec.objective.fit,
                "penalty": rec.objective.penalty,
                "cone_violation": rec.objective.cone_violation,
                "primal_residual": rec.primal,
                "dual_residual": rec.dual,
                "pcg_iters": rec.pcg_iters,
                "seconds": time.perf_counter() - tick,
            })
        if cfg.stop_tol is not None and max(residuals(state)) <= cfg.stop_tol:
            break
    if state.projection_failures:
        warnings.warn(
            f"{state.projection_failures} cone projections hit the iteration cap",
            stacklevel=2,
        )
    return state


def _as_array(X) -> np.ndarray:
    return X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)


def train(X, labels: LabelSet, gate_cfg: GateConfig, cfg: AdmmConfig,
          log=None) -> "_head.TrainedHead":
    """Train a head end to end: gates, ADMM, weight extraction, certificates."""
    X = _as_array(X)
    n, d = X.shape
    K = labels.K
    if labels.n != n:
        raise TrainingError(f"{n} feature rows but {labels.n} labels")
    if n < K:
        raise TrainingError(f"need at least K={K} examples, got {n}")
    counts = np.bincount(labels.class_ids, minlength=K)
    if np.any(counts == 0):
        missing = [labels.names[k] for k in np.flatnonzero(counts == 0)]
        raise TrainingError(f"classes with no training examples: {missing}")
    if np.any(counts < 2):
        thin = [labels.names[k] for k in np.flatnonzero(counts < 2)]
        warnings.warn(f"classes with fewer than 2 examples: {thin}", stacklevel=2)

    if gate_cfg.enumerate_all:
        gates = enumerate_patterns(X)
    else:
        gates = sample_gates(X, gate_cfg.count, seed=gate_cfg.seed, dedup=gate_cfg.dedup)

    Y = labels.one_hot()
    if cfg.mode == "exact":
        op = GatedOperator.split(X, gates, K)
        cones = tuple(ConeSpec(p, X) for p in gates.patterns)
    else:
        op = GatedOperator.relaxed(X, gates, K)
        cones = ()
    prob = ConvexProblem(op, Y, cfg.beta, cfg.penalty_kind, cfg.mode, cones)

    state = admm_solve(prob, cfg, log=log)

    P = gates.P
    if cfg.mode == "exact":
        # exact final projection: zero columns are cone fixed points, so the
        # prox sparsity survives while the kept columns become feasible to
        # linear-algebra precision
        projected = state.z1.copy()
        for b in range(projected.shape[0]):
            cone = cones[b % P]
            for k in range(K):
                if np.any(projected[b, :, k] != 0.0):
                    projected[b, :, k] = exact_cone_project(cone, projected[b, :, k])
        V, W = projected[:P].copy(), projected[P:].copy()
    else:
        V = state.z1.copy()
        W = np.zeros_like(V)

    bundle = _cert.bundle_from_weights(V, W, K, cfg.penalty_kind)
    meta = {
        "admm": {
            "rho": cfg.rho, "beta": cfg.beta, "admm_iters": cfg.admm_iters,
            "mode": cfg.mode, "penalty_kind": cfg.penalty_kind, "seed": cfg.seed,
            "stop_tol": cfg.stop_tol,
            "pcg": {"max_iters": cfg.pcg.max_iters, "rel_tol": cfg.pcg.rel_tol,
                    "preconditioner": cfg.pcg.preconditioner, "rank": cfg.pcg.rank},
        },
        "gates": {"count": gate_cfg.count, "seed": gate_cfg.seed,
                  "dedup": gate_cfg.dedup, "enumerate_all": gate_cfg.enumerate_all,
                  "shortfall": gates.shortfall},
        "history": [
            {"objective": r.objective.total, "fit": r.objective.fit,
             "penalty": r.objective.penalty, "cone_violation": r.objective.cone_violation,
             "primal_residual": r.primal, "dual_residual": r.dual, "pcg_iters": r.pcg_iters}
            for r in state.history
        ],
        "n_train": n,
    }
    return _head.TrainedHead(
        gates=gates, V=V, W=W, penalty_kind=cfg.penalty_kind, mode=cfg.mode,
        label_map=dict(labels.label_map), cert=bundle, train_meta=meta,
    )
