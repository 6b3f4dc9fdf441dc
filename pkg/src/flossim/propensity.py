"""Response-propensity estimation from moment conditions.

The response model is logistic in the sign-up covariates and satisfaction:
``p_beta(R=1 | d, s) = expit(beta_0 + beta_d . d + beta_s * s)``.  Because
satisfaction is only observed for responding users, beta cannot be fit by
ordinary likelihood methods.  Instead, it solves the moment system

    mean over users of (R / p_beta(d, s) - 1) * f_i(d, z) = 0,   i = 1..q

where the instruments f_i are functions of the always-observed covariates
and the shadow variable z only.  Non-responders contribute exactly
``-f_i(d, z)`` (their satisfaction never enters), so the system is
computable from observed data alone.

The default instrument set is (1, each covariate coordinate, z), which
makes the system exactly identified.  The solver is a damped Newton
iteration with an analytic Jacobian and a derivative-free fallback when
the Jacobian degenerates.  Everything here is deterministic; no random
numbers are consumed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from flossim.synth import UserRecord

__all__ = [
    "DEFAULT_WEIGHT_CAP",
    "PI_FLOOR",
    "PropensityBasis",
    "PropensityModel",
    "SolveDiagnostics",
    "WeightTable",
    "FloorUnderflowError",
    "MissingSatisfactionError",
    "RankDeficientBasisError",
    "default_basis",
    "propensity_scores",
    "moment_residuals",
    "solve_shadow_equations",
    "compute_weights",
    "oracle_weights",
]

# Reciprocal-propensity weights are capped here to bound sampler variance.
DEFAULT_WEIGHT_CAP = 50.0

# Hard floor inside p_beta evaluation; hitting it for a responding user is
# reported, never silently absorbed.
PI_FLOOR = 1e-12

_SOLVER_TOL = 1e-8
_SOLVER_MAX_ITER = 200


class FloorUnderflowError(ArithmeticError):
    """p_beta underflowed the floor for at least one responding user."""

    def __init__(self, count: int):
        super().__init__(f"propensity underflow below {PI_FLOOR} for {count} responding user(s)")
        self.count = count


class MissingSatisfactionError(ValueError):
    """A responding user contributing to the moments has no recorded satisfaction."""


class RankDeficientBasisError(ValueError):
    """Instrument evaluations are collinear on the data at hand."""


@dataclass(frozen=True)
class PropensityBasis:
    """Instrument functions f_1..f_q of (covariates, shadow value).

    Each function maps arrays ``d`` of shape (n, dim_d) and ``z`` of shape
    (n,) to an (n,) array.
    """

    functions: tuple[Callable[[np.ndarray, np.ndarray], np.ndarray], ...]
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.functions) != len(self.labels):
            raise ValueError("functions and labels must have equal length")
        if len(self.functions) == 0:
            raise ValueError("basis must contain at least one function")

    @property
    def q(self) -> int:
        return len(self.functions)

    def evaluate(self, d: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Design matrix of instrument evaluations, shape (n, q)."""
        cols = [np.asarray(f(d, z), dtype=float) for f in self.functions]
        return np.column_stack(cols)


def default_basis(dim_d: int) -> PropensityBasis:
    """(1, d_1, ..., d_dim_d, z): exactly identifies the logistic response model."""
    functions: list[Callable[[np.ndarray, np.ndarray], np.ndarray]] = [
        lambda d, z: np.ones(d.shape[0])
    ]
    labels = ["const"]
    for j in range(dim_d):
        functions.append(lambda d, z, j=j: d[:, j])
        labels.append(f"d{j}")
    functions.append(lambda d, z: z)
    labels.append("z")
    return PropensityBasis(tuple(functions), tuple(labels))


@dataclass(frozen=True)
class SolveDiagnostics:
    iterations: int
    residual_norms: tuple[float, ...]
    condition_estimate: float
    floor_hits: int
    fallback_used: bool


@dataclass(frozen=True)
class PropensityModel:
    """Fitted response model.

    ``pi_is_one`` marks the degenerate no-missingness short circuit (every
    user responded), in which case beta is not meaningful and all
    propensities are taken as one.
    """

    beta: np.ndarray
    converged: bool
    final_residual_norm: float
    diagnostics: SolveDiagnostics
    pi_is_one: bool = False

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if self.converged and not self.pi_is_one and not np.all(np.isfinite(beta)):
            raise ValueError("converged fit must carry finite beta")
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True)
class WeightTable:
    """Estimated propensities and capped reciprocal weights for responders.

    Arrays are aligned with the order responders appear in the input user
    sequence; ``n_clipped`` counts weights that hit the cap.
    """

    user_ids: np.ndarray
    pi: np.ndarray
    weights: np.ndarray
    w_max: float
    n_clipped: int

    @property
    def weight_map(self) -> dict[int, float]:
        return {int(i): float(w) for i, w in zip(self.user_ids, self.weights)}


def _response_arrays(users: Sequence[UserRecord]):
    """Stack (d, z, r, s_filled); satisfaction of non-responders is never
    used, and a responder without recorded satisfaction is an error."""
    d = np.array([u.d_rest for u in users], dtype=float)
    z = np.array([u.z for u in users], dtype=float)
    r = np.array([u.r for u in users], dtype=bool)
    s = np.zeros(len(users))
    missing = []
    for i, u in enumerate(users):
        if u.r:
            if u.s is None:
                missing.append(u.id)
            else:
                s[i] = u.s
    if missing:
        raise MissingSatisfactionError(
            f"{len(missing)} responding user(s) have no recorded satisfaction, e.g. id {missing[0]}"
        )
    return d, z, r, s


def propensity_scores(beta: np.ndarray, d: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, int]:
    """p_beta evaluated rowwise, floored at PI_FLOOR; returns the floor-hit count."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape[0] != d.shape[1] + 2:
        raise ValueError("beta must have length dim_d + 2 (intercept, covariates, satisfaction)")
    pi = expit(beta[0] + d @ beta[1:-1] + beta[-1] * np.asarray(s, dtype=float))
    n_floored = int(np.count_nonzero(pi < PI_FLOOR))
    if n_floored:
        pi = np.maximum(pi, PI_FLOOR)
    return pi, n_floored


def _residuals_arrays(
    beta: np.ndarray, d: np.ndarray, s: np.ndarray, r: np.ndarray, F: np.ndarray
) -> tuple[np.ndarray, int]:
    pi, _ = propensity_scores(beta, d, s)
    n_floored = int(np.count_nonzero(r & (pi <= PI_FLOOR)))
    w = np.where(r, 1.0 / pi, 0.0) - 1.0
    return F.T @ w / len(w), n_floored


def _jacobian_arrays(
    beta: np.ndarray, d: np.ndarray, s: np.ndarray, r: np.ndarray, F: np.ndarray
) -> np.ndarray:
    pi, _ = propensity_scores(beta, d, s)
    G = np.column_stack([np.ones(len(s)), d, s])
    coeff = np.where(r, (1.0 - pi) / pi, 0.0)
    return -(F.T @ (G * coeff[:, None])) / len(s)


def moment_residuals(
    beta: np.ndarray, users: Sequence[UserRecord], basis: PropensityBasis
) -> np.ndarray:
    """Empirical moment vector at beta, one entry per instrument.

    Raises FloorUnderflowError when p_beta hits the floor for a responding
    user (the moment would be dominated by the floored reciprocal) and
    RankDeficientBasisError when the instrument design is collinear.
    """
    d, z, r, s = _response_arrays(users)
    F = basis.evaluate(d, z)
    resid, n_floored = _residuals_arrays(np.asarray(beta, dtype=float), d, s, r, F)
    if n_floored:
        raise FloorUnderflowError(n_floored)
    return resid


def solve_shadow_equations(
    users: Sequence[UserRecord],
    basis: PropensityBasis,
    init_beta: np.ndarray | None = None,
    tol: float = _SOLVER_TOL,
    max_iter: int = _SOLVER_MAX_ITER,
) -> PropensityModel:
    """Solve the moment system for beta by damped Newton iteration.

    Newton steps use the analytic Jacobian; each step is halved until the
    sup-norm of the residual decreases, and candidate points where the
    propensity floors out for a responder are rejected.  When the Jacobian
    is singular (or damping stalls), a Nelder-Mead minimization of the
    residual norm takes over.  Non-convergence is reported through the
    returned record, not raised.
    """
    if len(users) == 0:
        raise ValueError("no users")
    d, z, r, s = _response_arrays(users)
    n_param = d.shape[1] + 2
    if basis.q != n_param:
        raise ValueError(
            f"exactly identified system required: {n_param} parameters need {n_param} instruments, got {basis.q}"
        )

    if bool(np.all(r)):
        # Nobody is missing: the propensity is identically one and no
        # estimation is needed (or possible).
        diag = SolveDiagnostics(0, (0.0,), 1.0, 0, False)
        return PropensityModel(np.zeros(n_param), True, 0.0, diag, pi_is_one=True)

    F = basis.evaluate(d, z)
    if np.linalg.matrix_rank(F) < basis.q:
        raise RankDeficientBasisError(
            f"instrument design has rank < {basis.q} on these {len(users)} users"
        )

    beta = np.zeros(n_param) if init_beta is None else np.asarray(init_beta, dtype=float).copy()
    if beta.shape != (n_param,):
        raise ValueError(f"init_beta must have shape ({n_param},)")

    floor_hits = 0
    fallback_used = False
    resid, nf = _residuals_arrays(beta, d, s, r, F)
    floor_hits += nf
    norm = float(np.max(np.abs(resid)))
    trajectory = [norm]
    iterations = 0

    for iterations in range(1, max_iter + 1):
        if norm <= tol:
            break
        J = _jacobian_arrays(beta, d, s, r, F)
        try:
            step = np.linalg.solve(J, -resid)
        except np.linalg.LinAlgError:
            fallback_used = True
            beta, resid, norm, nf = _fallback_minimize(beta, d, s, r, F)
            floor_hits += nf
            trajectory.append(norm)
            break
        accepted = False
        alpha = 1.0
        for _ in range(40):
            candidate = beta + alpha * step
            cand_resid, nf = _residuals_arrays(candidate, d, s, r, F)
            floor_hits += nf
            cand_norm = float(np.max(np.abs(cand_resid)))
            if nf == 0 and cand_norm < norm:
                beta, resid, norm = candidate, cand_resid, cand_norm
                accepted = True
                break
            alpha *= 0.5
        trajectory.append(norm)
        if not accepted:
            fallback_used = True
            beta, resid, norm, nf = _fallback_minimize(beta, d, s, r, F)
            floor_hits += nf
            trajectory.append(norm)
            break
    else:
        iterations = max_iter

    converged = norm <= tol
    J = _jacobian_arrays(beta, d, s, r, F)
    with np.errstate(all="ignore"):
        cond = float(np.linalg.cond(J))
    diag = SolveDiagnostics(iterations, tuple(trajectory), cond, floor_hits, fallback_used)
    return PropensityModel(beta, converged, norm, diag)


def _fallback_minimize(beta, d, s, r, F):
    def objective(b):
        resid, _ = _residuals_arrays(b, d, s, r, F)
        return float(np.linalg.norm(resid))

    result = minimize(
        objective,
        beta,
        method="Nelder-Mead",
        options={"maxiter": 4000, "xatol": 1e-12, "fatol": 1e-14},
    )
    resid, nf = _residuals_arrays(result.x, d, s, r, F)
    return result.x, resid, float(np.max(np.abs(resid))), nf


def compute_weights(
    fit: PropensityModel,
    users: Sequence[UserRecord],
    w_max: float = DEFAULT_WEIGHT_CAP,
) -> WeightTable:
    """Estimated propensities and capped 1/pi weights for responding users."""
    if not fit.converged:
        raise ValueError("weights require a converged propensity fit")
    if w_max < 1:
        raise ValueError("w_max must be at least 1")
    responders = [u for u in users if u.r]
    ids = np.array([u.id for u in responders], dtype=int)
    if fit.pi_is_one:
        ones = np.ones(len(responders))
        return WeightTable(ids, ones, ones.copy(), w_max, 0)
    for u in responders:
        if u.s is None:
            raise MissingSatisfactionError(f"responding user {u.id} has no recorded satisfaction")
    d = np.array([u.d_rest for u in responders], dtype=float)
    s = np.array([u.s for u in responders], dtype=float)
    pi, _ = propensity_scores(fit.beta, d, s)
    raw = 1.0 / pi
    weights = np.minimum(raw, w_max)
    return WeightTable(ids, pi, weights, w_max, int(np.count_nonzero(raw > w_max)))


def oracle_weights(
    users: Sequence[UserRecord], w_max: float = DEFAULT_WEIGHT_CAP
) -> WeightTable:
    """Weights from the exact generation-time response probabilities."""
    if w_max < 1:
        raise ValueError("w_max must be at least 1")
    responders = [u for u in users if u.r]
    ids = np.array([u.id for u in responders], dtype=int)
    pi = np.array([u.true_pi for u in responders], dtype=float)
    if np.any(pi <= 0):
        raise ValueError("responding user with nonpositive true_pi")
    raw = 1.0 / pi
    weights = np.minimum(raw, w_max)
    return WeightTable(ids, pi, weights, w_max, int(np.count_nonzero(raw > w_max)))
