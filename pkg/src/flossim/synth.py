"""Synthetic client populations with a known response mechanism.

The data-generating process follows the shadow-variable graph shipped with
the package: sign-up covariates drive a shadow covariate, both drive the
features each device processes, outcomes follow the logistic ground truth
on the features alone, satisfaction responds to how well the current model
fits the user's private samples, and the response indicator depends only
on satisfaction and the sign-up covariates.  Because the response draw is
an explicit logistic in (covariates, satisfaction), every user carries the
exact probability used for their draw, which is what the oracle arm of the
simulator consumes.

Satisfaction is transient: it is redrawn against the current model every
round, while covariates, private samples, and latency profiles are fixed
at sign-up.  All draws flow through one generator in a fixed, documented
order, so populations are reproducible from the config seed alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "PopulationConfig",
    "UserRecord",
    "default_population_config",
    "generate_population",
    "refresh_round_state",
    "draw_latency",
    "user_mean_losses",
    "pooled_dataset",
    "dump_population",
    "load_population",
]

_LN2 = math.log(2.0)


@dataclass(frozen=True, eq=False)
class PopulationConfig:
    """Structural coefficients and sizes of one synthetic population.

    Satisfaction decreases piecewise-linearly in how badly the current
    model handles the user's private samples.  With ``m`` the misfit and
    ``mc = min(m, s_misfit_cap)``:

    ``s = s_intercept + s_on_d . d
          - s_loss_scale * (min(mc, s_misfit_knee) - center)
          - s_loss_scale2 * max(0, mc - s_misfit_knee) + noise``

    The misfit measure depends on ``s_metric``: the model's
    misclassification rate on the user's samples (``error_rate``, centered
    at the coin-flip rate 0.5) or its mean cross-entropy (``log_loss``,
    centered at ln 2).  The default is the error rate: it tracks what a
    user actually sees and stays depressed until the model classifies
    their data well, whereas the cross-entropy recovers long before
    predictions flip the right way.  The knee lets dissatisfaction react
    sharply once the model is outright failing a user while staying gentle
    in the well-served regime, and the cap saturates it entirely for users
    the model fits arbitrarily badly (keeping response probabilities
    bounded away from zero during early training).  The response draw is
    ``R ~ Bernoulli(expit(r_intercept + r_on_d . d + r_on_s * s))``.
    """

    n_users: int
    dim_d: int
    dim_x: int
    samples_per_user: int
    true_theta: np.ndarray            # (dim_x + 1,), intercept first
    z_intercept: float
    z_on_d: np.ndarray                # (dim_d,)
    z_noise: float
    x_intercept: np.ndarray           # (dim_x,)
    x_on_d: np.ndarray                # (dim_x, dim_d)
    x_on_z: np.ndarray                # (dim_x,)
    x_noise: np.ndarray               # (dim_x,) per-dimension sample noise
    s_intercept: float
    s_on_d: np.ndarray                # (dim_d,)
    s_loss_scale: float
    s_misfit_cap: float               # dissatisfaction saturates past this misfit
    s_noise: float
    r_intercept: float
    r_on_d: np.ndarray                # (dim_d,)
    r_on_s: float
    latency_location: float
    latency_location_spread: float
    latency_scale: float
    s_nonresponse_prob: float = 0.0
    seed: int = 0
    # Shadow-gated noise inflation: device capability modulates how diverse
    # the data a device processes is.  The per-user noise scale of feature j is
    # x_noise[j] * sqrt(1 + x_noise_z_gain[j] * expit(x_noise_z_sharp * (x_noise_z_knee - z))).
    # All-zero gains recover homoscedastic features.
    x_noise_z_gain: np.ndarray = 0.0  # scalar or (dim_x,)
    x_noise_z_knee: float = 0.0
    x_noise_z_sharp: float = 1.0
    s_metric: str = "error_rate"      # "error_rate" or "log_loss"
    s_misfit_knee: float = math.inf   # knee of the piecewise response; inf = single slope
    s_loss_scale2: float = 0.0        # extra slope past the knee

    def __post_init__(self):
        for name in ("true_theta", "z_on_d", "x_intercept", "x_on_d", "x_on_z", "s_on_d", "r_on_d"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        for name in ("x_noise", "x_noise_z_gain"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim == 0:
                arr = np.full(self.dim_x, float(arr))
            object.__setattr__(self, name, arr)
        self.validate()

    def validate(self) -> None:
        if self.n_users < 1:
            raise ValueError("n_users must be positive")
        if self.dim_d < 1 or self.dim_x < 1:
            raise ValueError("dim_d and dim_x must be positive")
        if self.samples_per_user < 1:
            raise ValueError("samples_per_user must be positive")
        if self.true_theta.shape != (self.dim_x + 1,):
            raise ValueError("true_theta must have length dim_x + 1 (intercept first)")
        if self.z_on_d.shape != (self.dim_d,):
            raise ValueError("z_on_d must have shape (dim_d,)")
        if self.x_intercept.shape != (self.dim_x,):
            raise ValueError("x_intercept must have shape (dim_x,)")
        if self.x_on_d.shape != (self.dim_x, self.dim_d):
            raise ValueError("x_on_d must have shape (dim_x, dim_d)")
        if self.x_on_z.shape != (self.dim_x,):
            raise ValueError("x_on_z must have shape (dim_x,)")
        if self.s_on_d.shape != (self.dim_d,):
            raise ValueError("s_on_d must have shape (dim_d,)")
        if self.r_on_d.shape != (self.dim_d,):
            raise ValueError("r_on_d must have shape (dim_d,)")
        if self.x_noise.shape != (self.dim_x,):
            raise ValueError("x_noise must be a scalar or have shape (dim_x,)")
        if np.any(self.x_noise < 0):
            raise ValueError("x_noise must be nonnegative")
        if self.x_noise_z_gain.shape != (self.dim_x,):
            raise ValueError("x_noise_z_gain must be a scalar or have shape (dim_x,)")
        if np.any(self.x_noise_z_gain < 0):
            raise ValueError("x_noise_z_gain must be nonnegative")
        if self.x_noise_z_sharp < 0:
            raise ValueError("x_noise_z_sharp must be nonnegative")
        for name in ("z_noise", "s_noise", "latency_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.s_loss_scale < 0:
            raise ValueError("s_loss_scale must be nonnegative")
        if not self.s_misfit_cap > 0:
            raise ValueError("s_misfit_cap must be positive")
        if self.s_metric not in ("error_rate", "log_loss"):
            raise ValueError("s_metric must be 'error_rate' or 'log_loss'")
        if not self.s_misfit_knee > 0:
            raise ValueError("s_misfit_knee must be positive")
        if self.s_loss_scale2 < 0:
            raise ValueError("s_loss_scale2 must be nonnegative")
        if not 0.0 <= self.s_nonresponse_prob <= 1.0:
            raise ValueError("s_nonresponse_prob must be in [0, 1]")
        if self.latency_location_spread < 0:
            raise ValueError("latency_location_spread must be nonnegative")


@dataclass
class UserRecord:
    """One simulated client.

    ``s_latent`` is the ground-truth satisfaction that drives the response
    draw; ``s`` is the server-visible value (None when the user skipped the
    satisfaction prompt).  ``true_pi`` is the exact conditional probability
    used for the most recent response draw; it is 0.0 only for users whose
    expected latency exceeds a chronic-straggler cutoff.
    """

    id: int
    d_rest: np.ndarray
    z: float
    xs: np.ndarray                 # (samples_per_user, dim_x)
    ys: np.ndarray                 # (samples_per_user,)
    s_latent: float
    s: float | None
    s_responded: bool
    r: bool
    latency_location: float
    latency_scale: float
    true_pi: float

    @property
    def dataset(self) -> tuple[np.ndarray, np.ndarray]:
        return self.xs, self.ys

    @property
    def latency_profile(self) -> tuple[float, float]:
        return self.latency_location, self.latency_scale


def default_population_config(n_users: int = 500, seed: int = 0) -> PopulationConfig:
    """The shipped default configuration.

    Calibrated so that response probabilities stay well above the weight
    cap's reciprocal, dissatisfaction tracks model misfit strongly, and the
    shadow covariate shifts the features enough to identify the response
    model.
    """
    n_weak = 8
    return PopulationConfig(
        n_users=n_users,
        dim_d=2,
        dim_x=2 + n_weak,
        samples_per_user=100,
        true_theta=np.array(
            [0.1, 1.3, -1.0] + [3.7 * (1 if i % 2 == 0 else -1) for i in range(n_weak)]
        ),
        z_intercept=0.0,
        z_on_d=np.array([0.45, -0.30]),
        z_noise=0.9,
        x_intercept=np.array([0.55, -0.28] + [0.0] * n_weak),
        x_on_d=np.array([[0.70, -0.45], [-0.55, 0.50]] + [[0.0, 0.0]] * n_weak),
        x_on_z=np.array([1.30, -0.80] + [0.0] * n_weak),
        x_noise=np.array([0.35, 0.35] + [0.0286] * n_weak),
        s_intercept=-20.0,
        s_on_d=np.array([0.10, -0.10]),
        s_loss_scale=50.0,
        s_misfit_cap=0.40,
        s_noise=0.10,
        r_intercept=0.42,
        r_on_d=np.array([-0.05, 0.04]),
        r_on_s=0.16,
        latency_location=0.0,
        latency_location_spread=0.2,
        latency_scale=0.4,
        s_nonresponse_prob=0.0,
        seed=seed,
        x_noise_z_gain=np.array([0.0, 0.0] + [100.0] * n_weak),
        x_noise_z_knee=0.5,
        x_noise_z_sharp=4.0,
        s_misfit_knee=0.25,
        s_loss_scale2=88.0,
    )


def _stack(users: Sequence[UserRecord]):
    d = np.array([u.d_rest for u in users], dtype=float)
    z = np.array([u.z for u in users], dtype=float)
    xs = np.stack([u.xs for u in users])
    ys = np.stack([u.ys for u in users])
    return d, z, xs, ys


def _mean_losses_from_arrays(xs: np.ndarray, ys: np.ndarray, theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if xs.shape[-1] + 1 != theta.shape[0]:
        raise ValueError("theta dimension does not match feature dimension")
    logits = theta[0] + xs @ theta[1:]
    return np.mean(np.logaddexp(0.0, logits) - ys * logits, axis=-1)


def user_mean_losses(users: Sequence[UserRecord], theta: np.ndarray) -> np.ndarray:
    """Per-user mean cross-entropy of the model on each private dataset."""
    _, _, xs, ys = _stack(users)
    return _mean_losses_from_arrays(xs, ys, theta)


def _misfit_response(cfg: PopulationConfig, xs: np.ndarray, ys: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Dissatisfaction term of the satisfaction equation (the part the
    satisfaction decreases by), piecewise linear in the capped misfit."""
    theta = np.asarray(theta, dtype=float)
    if xs.shape[-1] + 1 != theta.shape[0]:
        raise ValueError("theta dimension does not match feature dimension")
    if cfg.s_metric == "error_rate":
        logits = theta[0] + xs @ theta[1:]
        misfit = np.mean((logits >= 0.0) != (ys >= 0.5), axis=-1)
        center = 0.5
    else:
        misfit = _mean_losses_from_arrays(xs, ys, theta)
        center = _LN2
    capped = np.minimum(misfit, cfg.s_misfit_cap)
    base = cfg.s_loss_scale * (np.minimum(capped, cfg.s_misfit_knee) - center)
    steep = cfg.s_loss_scale2 * np.maximum(0.0, capped - cfg.s_misfit_knee)
    return base + steep


def _draw_state(
    cfg: PopulationConfig,
    d: np.ndarray,
    misfit_response: np.ndarray,
    rng: np.random.Generator,
    expected_latency: np.ndarray | None = None,
    straggler_cutoff: float | None = None,
):
    """Draw (satisfaction, prompt response, participation, exact propensity).

    Consumes exactly three n-sized batches from the generator regardless of
    parameter values, so different configurations stay stream-aligned.
    """
    n = d.shape[0]
    s_latent = (
        cfg.s_intercept
        + d @ cfg.s_on_d
        - misfit_response
        + cfg.s_noise * rng.standard_normal(n)
    )
    responded = rng.random(n) >= cfg.s_nonresponse_prob
    pi = expit(cfg.r_intercept + d @ cfg.r_on_d + cfg.r_on_s * s_latent)
    r = rng.random(n) < pi
    if straggler_cutoff is not None and expected_latency is not None:
        # Chronic stragglers: devices whose expected round-trip exceeds the
        # cutoff never answer the participation prompt.
        chronic = expected_latency > straggler_cutoff
        r = r & ~chronic
        pi = np.where(chronic, 0.0, pi)
    return s_latent, responded, r, pi


def generate_population(cfg: PopulationConfig) -> list[UserRecord]:
    """Generate a population, deterministic given ``cfg.seed``.

    Draw order: covariates, shadow values, feature noise, label uniforms,
    latency locations, then the satisfaction/response block.  The initial
    satisfaction block is evaluated against the ground-truth model, so the
    generated joint distribution already carries the full dependence
    structure the estimators rely on.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    n, m = cfg.n_users, cfg.samples_per_user

    d = rng.standard_normal((n, cfg.dim_d))
    z = cfg.z_intercept + d @ cfg.z_on_d + cfg.z_noise * rng.standard_normal(n)
    x_mean = cfg.x_intercept + d @ cfg.x_on_d.T + z[:, None] * cfg.x_on_z
    gate = expit(cfg.x_noise_z_sharp * (cfg.x_noise_z_knee - z))
    noise_scale = cfg.x_noise * np.sqrt(1.0 + cfg.x_noise_z_gain * gate[:, None])
    xs = x_mean[:, None, :] + noise_scale[:, None, :] * rng.standard_normal((n, m, cfg.dim_x))
    p_y = expit(cfg.true_theta[0] + xs @ cfg.true_theta[1:])
    ys = (rng.random((n, m)) < p_y).astype(float)
    lat_loc = cfg.latency_location + cfg.latency_location_spread * rng.standard_normal(n)

    misfit = _misfit_response(cfg, xs, ys, cfg.true_theta)
    s_latent, responded, r, pi = _draw_state(cfg, d, misfit, rng)

    users = []
    for i in range(n):
        users.append(
            UserRecord(
                id=i,
                d_rest=d[i],
                z=float(z[i]),
                xs=xs[i],
                ys=ys[i],
                s_latent=float(s_latent[i]),
                s=float(s_latent[i]) if responded[i] else None,
                s_responded=bool(responded[i]),
                r=bool(r[i]),
                latency_location=float(lat_loc[i]),
                latency_scale=cfg.latency_scale,
                true_pi=float(pi[i]),
            )
        )
    return users


def refresh_round_state(
    users: Sequence[UserRecord],
    theta: np.ndarray,
    cfg: PopulationConfig,
    rng: np.random.Generator,
    straggler_cutoff: float | None = None,
) -> Sequence[UserRecord]:
    """Redraw satisfaction and participation against the current model.

    Satisfaction decreases in the model's loss on each user's private data;
    the participation indicator and its exact probability are refreshed
    from the structural response equation.  When a cutoff is given, users
    whose expected latency exceeds it are forced to R = 0 (chronic
    stragglers).  Mutates the records in place and returns the sequence.
    """
    d, _, xs, ys = _stack(users)
    misfit = _misfit_response(cfg, xs, ys, theta)
    expected_latency = None
    if straggler_cutoff is not None:
        loc = np.array([u.latency_location for u in users])
        scale = np.array([u.latency_scale for u in users])
        expected_latency = np.exp(loc + 0.5 * scale**2)
    s_latent, responded, r, pi = _draw_state(
        cfg, d, misfit, rng, expected_latency, straggler_cutoff
    )
    for i, u in enumerate(users):
        u.s_latent = float(s_latent[i])
        u.s_responded = bool(responded[i])
        u.s = float(s_latent[i]) if responded[i] else None
        u.r = bool(r[i])
        u.true_pi = float(pi[i])
    return users


def draw_latency(user: UserRecord, rng: np.random.Generator) -> float:
    """One log-normal round-trip time from the user's latency profile."""
    return float(np.exp(user.latency_location + user.latency_scale * rng.standard_normal()))


def pooled_dataset(users: Sequence[UserRecord]) -> tuple[np.ndarray, np.ndarray]:
    """All private samples pooled into one (features, labels) pair."""
    _, _, xs, ys = _stack(users)
    return xs.reshape(-1, xs.shape[-1]), ys.reshape(-1)


# -- population dump/load -----------------------------------------------------
#
# Tab-separated, one row per user, '#' comment lines allowed. Columns:
#   id, d_rest (comma-joined), z, s_latent, s_responded, r,
#   latency_location, latency_scale, true_pi, dataset
# where dataset is '|'-joined samples, each sample a comma-joined feature
# vector followed by its label. Floats use repr, so a dump/load round trip
# is exact.


_DUMP_COLUMNS = (
    "id\td_rest\tz\ts_latent\ts_responded\tr\tlatency_location\tlatency_scale\ttrue_pi\tdataset"
)


def dump_population(users: Sequence[UserRecord], path) -> None:
    lines = [f"# {_DUMP_COLUMNS}"]
    for u in users:
        dataset = "|".join(
            ",".join([repr(float(v)) for v in x] + [repr(float(y))])
            for x, y in zip(u.xs, u.ys)
        )
        lines.append(
            "\t".join(
                [
                    str(u.id),
                    ",".join(repr(float(v)) for v in u.d_rest),
                    repr(float(u.z)),
                    repr(float(u.s_latent)),
                    "1" if u.s_responded else "0",
                    "1" if u.r else "0",
                    repr(float(u.latency_location)),
                    repr(float(u.latency_scale)),
                    repr(float(u.true_pi)),
                    dataset,
                ]
            )
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_population(path) -> list[UserRecord]:
    users: list[UserRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 10:
                raise ValueError(f"line {lineno}: expected 10 tab-separated fields, got {len(fields)}")
            samples = [s.split(",") for s in fields[9].split("|")]
            xs = np.array([[float(v) for v in s[:-1]] for s in samples])
            ys = np.array([float(s[-1]) for s in samples])
            s_responded = fields[4] == "1"
            s_latent = float(fields[3])
            users.append(
                UserRecord(
                    id=int(fields[0]),
                    d_rest=np.array([float(v) for v in fields[1].split(",")]),
                    z=float(fields[2]),
                    xs=xs,
                    ys=ys,
                    s_latent=s_latent,
                    s=s_latent if s_responded else None,
                    s_responded=s_responded,
                    r=fields[5] == "1",
                    latency_location=float(fields[6]),
                    latency_scale=float(fields[7]),
                    true_pi=float(fields[8]),
                )
            )
    users.sort(key=lambda u: u.id)
    return users
