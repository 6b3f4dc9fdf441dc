"""Round-by-round execution of the federated protocol in four modes.

A round does, in order: refresh participation and satisfaction against the
current model, fit the response propensities when the mode calls for it,
freeze the responder pool, then run a fixed number of server iterations.
Each iteration samples k clients with replacement (uniformly or by
reciprocal-propensity weights, depending on mode), collects their local
gradients through the privatizing release, times out stragglers against
the cutoff, averages the surviving uploads, and applies one SGD step.

Modes:

* ``FULL_PARTICIPATION``: every user is always available; no timeouts.
  The ceiling the corrections are measured against.
* ``UNCORRECTED_MNAR``: only responders are sampled, uniformly.
* ``ORACLE_CORRECTION``: responders sampled with 1/pi weights from the
  exact generation-time propensities.
* ``FLOSS_CORRECTION``: responders sampled with 1/pi weights from the
  propensities estimated by the moment solver each round.

Within one round, every random draw comes from one of four child streams
(refresh, sampling, latency, privacy noise) spawned from the round
generator in a fixed order, so modes that skip a concern (e.g. full
participation never draws latencies) stay aligned with modes that do not.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from flossim import model, propensity, synth
from flossim.model import DpConfig, ModelParams, TrainConfig
from flossim.propensity import (
    DEFAULT_WEIGHT_CAP,
    SolveDiagnostics,
    WeightTable,
    default_basis,
)
from flossim.synth import PopulationConfig, UserRecord

__all__ = [
    "Mode",
    "RoundLog",
    "OrchestratorError",
    "weighted_sample",
    "run_round",
    "run_training",
    "empirical_risk_gap",
]

logger = logging.getLogger(__name__)


class OrchestratorError(RuntimeError):
    """A round could not be executed (e.g. nobody responded)."""


class Mode(Enum):
    FULL_PARTICIPATION = "full"
    UNCORRECTED_MNAR = "uncorrected"
    ORACLE_CORRECTION = "oracle"
    FLOSS_CORRECTION = "floss"

    @classmethod
    def from_token(cls, token: str) -> "Mode":
        for mode in cls:
            if mode.value == token:
                return mode
        raise ValueError(f"unknown mode {token!r}; expected one of " + ", ".join(m.value for m in cls))


@dataclass
class RoundLog:
    """Everything observable about one round."""

    round_index: int
    mode: Mode
    m_responsive: int
    sampled_ids: list[list[int]]
    dropped_ids: list[list[int]]
    skipped_iterations: int
    mean_gradient_norm: float
    accuracy: float
    full_risk: float
    observed_risk: float
    solver_converged: bool | None = None
    solver_diagnostics: SolveDiagnostics | None = None
    weights_clipped: int | None = None
    min_pi_hat: float | None = None
    fell_back_to_uniform: bool = False


def weighted_sample(
    candidates: Sequence[int],
    weights: np.ndarray,
    k: int,
    rng: np.random.Generator,
) -> list[int]:
    """k independent draws with replacement, probability proportional to weight."""
    if len(candidates) == 0:
        raise ValueError("no candidates to sample from")
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(candidates),):
        raise ValueError("weights must align with candidates")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be positive and finite")
    cum = np.cumsum(w)
    picks = np.searchsorted(cum, rng.random(k) * cum[-1], side="right")
    return [candidates[int(i)] for i in picks]


@dataclass
class _PopArrays:
    """Stacked immutable per-user data, built once per training run."""

    xs: np.ndarray   # (n, m, dim_x)
    ys: np.ndarray   # (n, m)
    lat_loc: np.ndarray
    lat_scale: np.ndarray

    @classmethod
    def from_users(cls, users: Sequence[UserRecord]) -> "_PopArrays":
        return cls(
            xs=np.stack([u.xs for u in users]),
            ys=np.stack([u.ys for u in users]),
            lat_loc=np.array([u.latency_location for u in users]),
            lat_scale=np.array([u.latency_scale for u in users]),
        )


def _round_weights(
    mode: Mode,
    users: Sequence[UserRecord],
    round_index: int,
    w_max: float,
) -> tuple[list[int], np.ndarray, RoundLog]:
    """Candidate pool and sampling weights for the round; partially fills a log."""
    log = RoundLog(
        round_index=round_index,
        mode=mode,
        m_responsive=sum(1 for u in users if u.r),
        sampled_ids=[],
        dropped_ids=[],
        skipped_iterations=0,
        mean_gradient_norm=0.0,
        accuracy=0.0,
        full_risk=0.0,
        observed_risk=0.0,
    )

    if mode is Mode.FULL_PARTICIPATION:
        ids = [u.id for u in users]
        return ids, np.ones(len(ids)), log

    responders = [u for u in users if u.r]
    if not responders:
        raise OrchestratorError(f"round {round_index}: zero responsive users")
    ids = [u.id for u in responders]

    if mode is Mode.UNCORRECTED_MNAR:
        return ids, np.ones(len(ids)), log

    if mode is Mode.ORACLE_CORRECTION:
        table = propensity.oracle_weights(users, w_max)
        log.weights_clipped = table.n_clipped
        log.min_pi_hat = float(table.pi.min())
        return ids, table.weights, log

    # FLOSS_CORRECTION: fit the response model on this round's prompts.
    basis = default_basis(users[0].d_rest.shape[0])
    fit = propensity.solve_shadow_equations(users, basis)
    log.solver_converged = fit.converged
    log.solver_diagnostics = fit.diagnostics
    if not fit.converged:
        logger.warning(
            "round %d: propensity solver did not converge (residual %.3g); "
            "falling back to uniform sampling over responders",
            round_index,
            fit.final_residual_norm,
        )
        log.fell_back_to_uniform = True
        return ids, np.ones(len(ids)), log
    table = propensity.compute_weights(fit, users, w_max)
    log.weights_clipped = table.n_clipped
    log.min_pi_hat = float(table.pi.min())
    return ids, table.weights, log


def run_round(
    users: Sequence[UserRecord],
    pop_cfg: PopulationConfig,
    theta: np.ndarray,
    mode: Mode,
    train_cfg: TrainConfig,
    dp_cfg: DpConfig,
    rng: np.random.Generator,
    test_set: tuple[np.ndarray, np.ndarray],
    round_index: int = 1,
    w_max: float = DEFAULT_WEIGHT_CAP,
    _arrays: _PopArrays | None = None,
) -> tuple[np.ndarray, RoundLog]:
    """Execute one round; returns the updated parameters and the round log.

    ``users`` must be ordered by id with ``users[i].id == i``.  The test
    set is a pooled (features, labels) pair from a held-out population.
    """
    rng_refresh, rng_sample, rng_latency, rng_dp = rng.spawn(4)
    arrays = _arrays if _arrays is not None else _PopArrays.from_users(users)

    synth.refresh_round_state(
        users, theta, pop_cfg, rng_refresh, straggler_cutoff=train_cfg.straggler_cutoff
    )
    candidates, weights, log = _round_weights(mode, users, round_index, w_max)

    theta = np.asarray(theta, dtype=float)
    norms: list[float] = []
    for _ in range(train_cfg.max_iterations):
        sampled = weighted_sample(candidates, weights, train_cfg.k, rng_sample)
        log.sampled_ids.append(list(sampled))
        grads = [
            model.privatize(model.local_gradient(theta, arrays.xs[i], arrays.ys[i]), dp_cfg, rng_dp)
            for i in sampled
        ]
        if mode is Mode.FULL_PARTICIPATION:
            survivors = list(range(len(sampled)))
            log.dropped_ids.append([])
        else:
            eps = rng_latency.standard_normal(len(sampled))
            durations = np.exp(
                arrays.lat_loc[sampled] + arrays.lat_scale[sampled] * eps
            )
            survivors = [j for j, dur in enumerate(durations) if dur <= train_cfg.straggler_cutoff]
            log.dropped_ids.append([sampled[j] for j in range(len(sampled)) if j not in survivors])
        if not survivors:
            log.skipped_iterations += 1
            continue
        g_bar = model.aggregate([grads[j] for j in survivors])
        norms.append(float(np.linalg.norm(g_bar)))
        theta = model.sgd_step(theta, g_bar, train_cfg.eta)

    log.mean_gradient_norm = float(np.mean(norms)) if norms else 0.0
    log.accuracy = model.evaluate_accuracy(theta, test_set[0], test_set[1])
    observed, full = empirical_risk_gap(users, theta)
    log.observed_risk = observed
    log.full_risk = full
    return theta, log


def run_training(
    users: Sequence[UserRecord],
    pop_cfg: PopulationConfig,
    mode: Mode,
    train_cfg: TrainConfig,
    dp_cfg: DpConfig,
    rng: np.random.Generator,
    test_set: tuple[np.ndarray, np.ndarray],
    w_max: float = DEFAULT_WEIGHT_CAP,
) -> tuple[ModelParams, list[RoundLog]]:
    """Run the configured number of rounds from a zero-initialized model."""
    if len(users) == 0:
        raise ValueError("empty population")
    arrays = _PopArrays.from_users(users)
    theta = np.zeros(arrays.xs.shape[-1] + 1)
    round_rngs = rng.spawn(train_cfg.rounds)
    logs: list[RoundLog] = []
    for t in range(1, train_cfg.rounds + 1):
        theta, log = run_round(
            users,
            pop_cfg,
            theta,
            mode,
            train_cfg,
            dp_cfg,
            round_rngs[t - 1],
            test_set,
            round_index=t,
            w_max=w_max,
            _arrays=arrays,
        )
        logs.append(log)
    return ModelParams(theta), logs


def empirical_risk_gap(
    users: Sequence[UserRecord],
    theta: np.ndarray,
    weight_table: WeightTable | None = None,
) -> tuple[float, float]:
    """(risk over responders, risk over everyone) at the given parameters.

    Without weights, the first component is the plain mean loss of
    responding users.  With a weight table it is the reciprocal-propensity
    estimator sum(w_u * loss_u for responders) / n, which targets the
    full-population mean.
    """
    losses = synth.user_mean_losses(users, theta)
    r = np.array([u.r for u in users], dtype=bool)
    full = float(losses.mean())
    if not np.any(r):
        return float("nan"), full
    if weight_table is None:
        observed = float(losses[r].mean())
    else:
        wmap = weight_table.weight_map
        total = 0.0
        for u, loss in zip(users, losses):
            if u.r:
                total += wmap[u.id] * float(loss)
        observed = total / len(users)
    return observed, full
