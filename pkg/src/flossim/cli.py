"""Experiment configuration, sweeps, and the command-line interface.

Config files are line-oriented ``section.key = value`` text; ``#`` starts
a comment.  Sections are ``population``, ``train``, ``dp``, and
``experiment``; every key has a shipped default, so a config file only
needs the values it overrides.  Vector values are comma-separated numbers;
the feature-on-covariate block is flattened row-major with the dimensions
taken from ``population.dim_x`` and ``population.dim_d``.

Sweeps run every (mode, client count, seed) cell and write one CSV with a
schema comment, a header row, and rows sorted by (mode, n, seed, round).
Populations depend only on (seed, n), so all four modes of a cell start
from the same users, and rerunning a sweep reproduces the file byte for
byte.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from flossim import mdag, synth
from flossim.mdag import GraphError, MAX_PATH_ENUM_VERTICES
from flossim.model import DpConfig, TrainConfig
from flossim.orchestrator import Mode, OrchestratorError, RoundLog, run_training
from flossim.synth import PopulationConfig

__all__ = [
    "ConfigError",
    "QueryError",
    "ExperimentConfig",
    "ResultRow",
    "ExperimentResult",
    "parse_config",
    "parse_config_file",
    "serialize_config",
    "configs_equal",
    "default_experiment_config",
    "run_cell",
    "run_sweep",
    "write_csv",
    "dsep_check",
    "main",
]

RESULTS_SCHEMA = "flossim-results v1"
_CSV_COLUMNS = (
    "mode",
    "n_clients",
    "seed",
    "round",
    "accuracy",
    "full_risk",
    "observed_risk",
    "m_responsive",
    "solver_converged",
)


class ConfigError(ValueError):
    """Invalid configuration text or values, reported with the offending key."""


class QueryError(ValueError):
    """Malformed d-separation query."""


@dataclass(frozen=True)
class ExperimentConfig:
    population: PopulationConfig
    train: TrainConfig
    dp: DpConfig
    modes: tuple[Mode, ...]
    client_counts: tuple[int, ...]
    seeds: tuple[int, ...]
    test_users: int
    output: str | None

    def validate(self) -> None:
        if not self.modes:
            raise ConfigError("experiment.modes must not be empty")
        if not self.client_counts or any(n < 1 for n in self.client_counts):
            raise ConfigError("experiment.client_counts must be positive integers")
        if not self.seeds:
            raise ConfigError("experiment.seeds must not be empty")
        if self.test_users < 1:
            raise ConfigError("experiment.test_users must be positive")


@dataclass(frozen=True)
class ResultRow:
    mode: str
    n_clients: int
    seed: int
    round: int
    accuracy: float
    full_risk: float
    observed_risk: float
    m_responsive: int
    solver_converged: bool | None

    def sort_key(self):
        return (self.mode, self.n_clients, self.seed, self.round)


@dataclass(frozen=True)
class ExperimentResult:
    rows: tuple[ResultRow, ...]


def default_experiment_config() -> ExperimentConfig:
    return ExperimentConfig(
        population=synth.default_population_config(),
        train=TrainConfig(eta=0.3, k=10, max_iterations=10, straggler_cutoff=3.0, rounds=20),
        dp=DpConfig(),
        modes=tuple(Mode),
        client_counts=(50, 100, 200, 500, 1000),
        seeds=tuple(range(10)),
        test_users=2000,
        output=None,
    )


# -- config text --------------------------------------------------------------

_POP_INT_KEYS = ("n_users", "dim_d", "dim_x", "samples_per_user", "seed")
_POP_FLOAT_KEYS = (
    "z_intercept",
    "z_noise",
    "x_noise_z_knee",
    "x_noise_z_sharp",
    "s_intercept",
    "s_loss_scale",
    "s_misfit_cap",
    "s_misfit_knee",
    "s_loss_scale2",
    "s_noise",
    "r_intercept",
    "r_on_s",
    "latency_location",
    "latency_location_spread",
    "latency_scale",
    "s_nonresponse_prob",
)
_POP_STR_KEYS = ("s_metric",)
_POP_VECTOR_KEYS = (
    "true_theta",
    "z_on_d",
    "x_intercept",
    "x_on_z",
    "x_noise",
    "x_noise_z_gain",
    "s_on_d",
    "r_on_d",
)
_POP_MATRIX_KEYS = ("x_on_d",)
_TRAIN_KEYS = {"eta": float, "k": int, "max_iterations": int, "straggler_cutoff": float, "rounds": int}
_DP_KEYS = {"clip_norm": float, "noise_sigma": float}
_EXPERIMENT_KEYS = ("modes", "client_counts", "seeds", "test_users", "output")


def _parse_scalar(key: str, token: str, kind):
    try:
        return kind(token)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {token!r} as {kind.__name__}") from None


def _parse_vector(key: str, token: str) -> list[float]:
    try:
        return [float(t.strip()) for t in token.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {token!r} as a comma-separated number list") from None


def parse_config(text: str) -> ExperimentConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} has no section prefix")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value

    base = default_experiment_config()
    pop_kwargs: dict = {}
    train_kwargs: dict = {}
    dp_kwargs: dict = {}
    exp_kwargs: dict = {}

    for key, value in raw.items():
        section, name = key.split(".", 1)
        if section == "population":
            if name in _POP_INT_KEYS:
                pop_kwargs[name] = _parse_scalar(key, value, int)
            elif name in _POP_FLOAT_KEYS:
                pop_kwargs[name] = _parse_scalar(key, value, float)
            elif name in _POP_STR_KEYS:
                pop_kwargs[name] = value
            elif name in _POP_VECTOR_KEYS or name in _POP_MATRIX_KEYS:
                pop_kwargs[name] = _parse_vector(key, value)
            else:
                raise ConfigError(f"unknown key {key!r}")
        elif section == "train":
            if name not in _TRAIN_KEYS:
                raise ConfigError(f"unknown key {key!r}")
            train_kwargs[name] = _parse_scalar(key, value, _TRAIN_KEYS[name])
        elif section == "dp":
            if name not in _DP_KEYS:
                raise ConfigError(f"unknown key {key!r}")
            dp_kwargs[name] = _parse_scalar(key, value, _DP_KEYS[name])
        elif section == "experiment":
            if name not in _EXPERIMENT_KEYS:
                raise ConfigError(f"unknown key {key!r}")
            exp_kwargs[name] = value
        else:
            raise ConfigError(f"unknown section {section!r} in key {key!r}")

    # Assemble the population config: defaults overridden by parsed values,
    # with dimensions fixed before the coefficient blocks are shaped.
    pop_defaults = base.population
    dim_d = pop_kwargs.get("dim_d", pop_defaults.dim_d)
    dim_x = pop_kwargs.get("dim_x", pop_defaults.dim_x)
    fields = {name: getattr(pop_defaults, name) for name in _pop_field_names()}
    fields["dim_d"] = dim_d
    fields["dim_x"] = dim_x
    for name, value in pop_kwargs.items():
        if name in _POP_MATRIX_KEYS:
            flat = np.asarray(value, dtype=float)
            if flat.size != dim_x * dim_d:
                raise ConfigError(
                    f"population.{name}: expected {dim_x * dim_d} values (dim_x * dim_d), got {flat.size}"
                )
            fields[name] = flat.reshape(dim_x, dim_d)
        elif name in _POP_VECTOR_KEYS:
            fields[name] = np.asarray(value, dtype=float)
        else:
            fields[name] = value
    if dim_d != pop_defaults.dim_d or dim_x != pop_defaults.dim_x:
        _require_blocks_for_dims(fields, pop_kwargs, dim_d, dim_x)
    try:
        population = PopulationConfig(**fields)
    except ValueError as exc:
        raise ConfigError(f"population: {exc}") from exc

    try:
        train = replace(base.train, **train_kwargs)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc
    try:
        dp = replace(base.dp, **dp_kwargs)
    except ValueError as exc:
        raise ConfigError(f"dp: {exc}") from exc

    modes = base.modes
    if "modes" in exp_kwargs:
        try:
            modes = tuple(
                Mode.from_token(t.strip()) for t in exp_kwargs["modes"].split(",") if t.strip()
            )
        except ValueError as exc:
            raise ConfigError(f"experiment.modes: {exc}") from exc
    client_counts = base.client_counts
    if "client_counts" in exp_kwargs:
        client_counts = tuple(
            _parse_scalar("experiment.client_counts", t.strip(), int)
            for t in exp_kwargs["client_counts"].split(",")
            if t.strip()
        )
    seeds = base.seeds
    if "seeds" in exp_kwargs:
        seeds = tuple(
            _parse_scalar("experiment.seeds", t.strip(), int)
            for t in exp_kwargs["seeds"].split(",")
            if t.strip()
        )
    test_users = base.test_users
    if "test_users" in exp_kwargs:
        test_users = _parse_scalar("experiment.test_users", exp_kwargs["test_users"], int)
    output = exp_kwargs.get("output", base.output)

    cfg = ExperimentConfig(population, train, dp, modes, client_counts, seeds, test_users, output)
    cfg.validate()
    return cfg


def _pop_field_names() -> tuple[str, ...]:
    return (
        "n_users",
        "dim_d",
        "dim_x",
        "samples_per_user",
        "true_theta",
        "z_intercept",
        "z_on_d",
        "z_noise",
        "x_intercept",
        "x_on_d",
        "x_on_z",
        "x_noise",
        "x_noise_z_gain",
        "x_noise_z_knee",
        "x_noise_z_sharp",
        "s_intercept",
        "s_on_d",
        "s_loss_scale",
        "s_misfit_cap",
        "s_misfit_knee",
        "s_loss_scale2",
        "s_metric",
        "s_noise",
        "r_intercept",
        "r_on_d",
        "r_on_s",
        "latency_location",
        "latency_location_spread",
        "latency_scale",
        "s_nonresponse_prob",
        "seed",
    )


def _require_blocks_for_dims(fields, pop_kwargs, dim_d, dim_x):
    """Overriding dimensions invalidates the default coefficient blocks."""
    needed = {
        "true_theta": (dim_x + 1,),
        "z_on_d": (dim_d,),
        "x_intercept": (dim_x,),
        "x_on_d": (dim_x, dim_d),
        "x_on_z": (dim_x,),
        "x_noise": (dim_x,),
        "x_noise_z_gain": (dim_x,),
        "s_on_d": (dim_d,),
        "r_on_d": (dim_d,),
    }
    for name, shape in needed.items():
        if np.asarray(fields[name]).shape != shape and name not in pop_kwargs:
            raise ConfigError(
                f"population.{name} must be given explicitly when dim_d/dim_x differ from the defaults"
            )


def parse_config_file(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _fmt_vector(arr) -> str:
    return ", ".join(repr(float(v)) for v in np.asarray(arr, dtype=float).ravel())


def serialize_config(cfg: ExperimentConfig) -> str:
    p, t, d = cfg.population, cfg.train, cfg.dp
    lines = [
        "# flossim experiment config",
        f"population.n_users = {p.n_users}",
        f"population.dim_d = {p.dim_d}",
        f"population.dim_x = {p.dim_x}",
        f"population.samples_per_user = {p.samples_per_user}",
        f"population.seed = {p.seed}",
        f"population.true_theta = {_fmt_vector(p.true_theta)}",
        f"population.z_intercept = {_fmt(p.z_intercept)}",
        f"population.z_on_d = {_fmt_vector(p.z_on_d)}",
        f"population.z_noise = {_fmt(p.z_noise)}",
        f"population.x_intercept = {_fmt_vector(p.x_intercept)}",
        f"population.x_on_d = {_fmt_vector(p.x_on_d)}",
        f"population.x_on_z = {_fmt_vector(p.x_on_z)}",
        f"population.x_noise = {_fmt_vector(p.x_noise)}",
        f"population.x_noise_z_gain = {_fmt_vector(p.x_noise_z_gain)}",
        f"population.x_noise_z_knee = {_fmt(p.x_noise_z_knee)}",
        f"population.x_noise_z_sharp = {_fmt(p.x_noise_z_sharp)}",
        f"population.s_intercept = {_fmt(p.s_intercept)}",
        f"population.s_on_d = {_fmt_vector(p.s_on_d)}",
        f"population.s_loss_scale = {_fmt(p.s_loss_scale)}",
        f"population.s_misfit_cap = {_fmt(p.s_misfit_cap)}",
        f"population.s_misfit_knee = {_fmt(p.s_misfit_knee)}",
        f"population.s_loss_scale2 = {_fmt(p.s_loss_scale2)}",
        f"population.s_metric = {p.s_metric}",
        f"population.s_noise = {_fmt(p.s_noise)}",
        f"population.r_intercept = {_fmt(p.r_intercept)}",
        f"population.r_on_d = {_fmt_vector(p.r_on_d)}",
        f"population.r_on_s = {_fmt(p.r_on_s)}",
        f"population.latency_location = {_fmt(p.latency_location)}",
        f"population.latency_location_spread = {_fmt(p.latency_location_spread)}",
        f"population.latency_scale = {_fmt(p.latency_scale)}",
        f"population.s_nonresponse_prob = {_fmt(p.s_nonresponse_prob)}",
        f"train.eta = {_fmt(t.eta)}",
        f"train.k = {t.k}",
        f"train.max_iterations = {t.max_iterations}",
        f"train.straggler_cutoff = {_fmt(t.straggler_cutoff)}",
        f"train.rounds = {t.rounds}",
        f"dp.clip_norm = {_fmt(d.clip_norm)}",
        f"dp.noise_sigma = {_fmt(d.noise_sigma)}",
        f"experiment.modes = {', '.join(m.value for m in cfg.modes)}",
        f"experiment.client_counts = {', '.join(str(n) for n in cfg.client_counts)}",
        f"experiment.seeds = {', '.join(str(s) for s in cfg.seeds)}",
        f"experiment.test_users = {cfg.test_users}",
    ]
    if cfg.output is not None:
        lines.append(f"experiment.output = {cfg.output}")
    return "\n".join(lines) + "\n"


def configs_equal(a: ExperimentConfig, b: ExperimentConfig) -> bool:
    return serialize_config(a) == serialize_config(b)


# -- sweep execution -----------------------------------------------------------

_POP_TAG = 0x706F70
_TEST_TAG = 0x74657374
_TRAIN_TAG = 0x747261696E
_MODE_INDEX = {mode: i for i, mode in enumerate(Mode)}


def _derived_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1, np.uint64)[0])


def _test_set(cfg: ExperimentConfig, n_clients: int):
    test_cfg = replace(
        cfg.population, n_users=cfg.test_users, seed=_derived_seed(n_clients, _TEST_TAG)
    )
    return synth.pooled_dataset(synth.generate_population(test_cfg))


def run_cell(
    cfg: ExperimentConfig,
    mode: Mode,
    n_clients: int,
    seed: int,
    test_set=None,
) -> list[ResultRow]:
    """One (mode, client count, seed) cell; population depends on (seed, n) only."""
    pop_cfg = replace(cfg.population, n_users=n_clients, seed=_derived_seed(seed, n_clients, _POP_TAG))
    users = synth.generate_population(pop_cfg)
    if test_set is None:
        test_set = _test_set(cfg, n_clients)
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, n_clients, _MODE_INDEX[mode], _TRAIN_TAG])
    )
    _, logs = run_training(users, pop_cfg, mode, cfg.train, cfg.dp, rng, test_set)
    return [_row_from_log(mode, n_clients, seed, log) for log in logs]


def _row_from_log(mode: Mode, n_clients: int, seed: int, log: RoundLog) -> ResultRow:
    return ResultRow(
        mode=mode.value,
        n_clients=n_clients,
        seed=seed,
        round=log.round_index,
        accuracy=log.accuracy,
        full_risk=log.full_risk,
        observed_risk=log.observed_risk,
        m_responsive=log.m_responsive,
        solver_converged=log.solver_converged,
    )


def run_sweep(cfg: ExperimentConfig) -> ExperimentResult:
    """Every (mode, n, seed) cell of the grid, rows sorted deterministically."""
    cfg.validate()
    rows: list[ResultRow] = []
    for n_clients in cfg.client_counts:
        test_set = _test_set(cfg, n_clients)
        for mode in cfg.modes:
            for seed in cfg.seeds:
                rows.extend(run_cell(cfg, mode, n_clients, seed, test_set))
    rows.sort(key=ResultRow.sort_key)
    return ExperimentResult(tuple(rows))


def write_csv(result: ExperimentResult, path) -> None:
    lines = [f"# {RESULTS_SCHEMA}", ",".join(_CSV_COLUMNS)]
    for r in result.rows:
        converged = "" if r.solver_converged is None else ("true" if r.solver_converged else "false")
        lines.append(
            ",".join(
                [
                    r.mode,
                    str(r.n_clients),
                    str(r.seed),
                    str(r.round),
                    repr(r.accuracy),
                    repr(r.full_risk),
                    repr(r.observed_risk),
                    str(r.m_responsive),
                    converged,
                ]
            )
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# -- d-separation queries -------------------------------------------------------


def _parse_query(query: str):
    parts = query.split(";")
    if len(parts) != 3:
        raise QueryError(
            f"query must be 'A;B;C' with comma-separated vertex lists (C may be empty), got {query!r}"
        )
    sets = []
    for part in parts:
        names = frozenset(t.strip() for t in part.split(",") if t.strip())
        sets.append(names)
    a, b, c = sets
    if not a or not b:
        raise QueryError("both endpoint sets of the query must be nonempty")
    return a, b, c


def dsep_check(graph_file, query: str) -> str:
    """Evaluate a d-separation query against a graph file; returns the verdict text."""
    g = mdag.load_graph_file(graph_file)
    a, b, c = _parse_query(query)
    if mdag.d_separated(g, a, b, c):
        return "d-separated"
    lines = ["not d-separated"]
    if len(g) <= MAX_PATH_ENUM_VERTICES:
        witness = mdag.find_open_path(g, a, b, c)
        if witness is not None:
            lines.append(f"open path: {witness}")
    else:
        lines.append("(graph too large for a path witness)")
    return "\n".join(lines)


# -- entry point -----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flossim",
        description="Federated-learning simulator with propensity-weighted client sampling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one (mode, n, seed) training cell")
    run_p.add_argument("--config", type=Path, help="config file (defaults apply when omitted)")
    run_p.add_argument("--mode", required=True, help="full | uncorrected | oracle | floss")
    run_p.add_argument("--seed", type=int, required=True)
    run_p.add_argument("--n", type=int, help="client count (default: population.n_users)")
    run_p.add_argument("--out", type=Path, help="output CSV (default: experiment.output)")

    sweep_p = sub.add_parser("sweep", help="run the full mode x client-count x seed grid")
    sweep_p.add_argument("--config", type=Path)
    sweep_p.add_argument("--out", type=Path)

    dsep_p = sub.add_parser("dsep-check", help="evaluate a d-separation query on a graph file")
    dsep_p.add_argument("graph", type=Path)
    dsep_p.add_argument("query", help="'A;B;C' vertex lists, C may be empty, e.g. 'R;G;'")

    gen_p = sub.add_parser("gen-population", help="generate and dump a synthetic population")
    gen_p.add_argument("--config", type=Path)
    gen_p.add_argument("--seed", type=int, help="override population.seed")
    gen_p.add_argument("--n", type=int, help="override population.n_users")
    gen_p.add_argument("--out", type=Path, required=True)
    return parser


def _load_config(path: Path | None) -> ExperimentConfig:
    if path is None:
        return default_experiment_config()
    return parse_config_file(path)


def _resolve_out(arg_out: Path | None, cfg: ExperimentConfig) -> Path:
    if arg_out is not None:
        return arg_out
    if cfg.output is not None:
        return Path(cfg.output)
    raise ConfigError("no output path: pass --out or set experiment.output")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = _load_config(args.config)
            mode = Mode.from_token(args.mode)
            n = args.n if args.n is not None else cfg.population.n_users
            rows = run_cell(cfg, mode, n, args.seed)
            out = _resolve_out(args.out, cfg)
            write_csv(ExperimentResult(tuple(sorted(rows, key=ResultRow.sort_key))), out)
            print(f"wrote {len(rows)} rows to {out}")
        elif args.command == "sweep":
            cfg = _load_config(args.config)
            result = run_sweep(cfg)
            out = _resolve_out(args.out, cfg)
            write_csv(result, out)
            print(f"wrote {len(result.rows)} rows to {out}")
        elif args.command == "dsep-check":
            print(dsep_check(args.graph, args.query))
        elif args.command == "gen-population":
            cfg = _load_config(args.config)
            pop_cfg = cfg.population
            if args.seed is not None:
                pop_cfg = replace(pop_cfg, seed=args.seed)
            if args.n is not None:
                pop_cfg = replace(pop_cfg, n_users=args.n)
            users = synth.generate_population(pop_cfg)
            synth.dump_population(users, args.out)
            print(f"wrote {len(users)} users to {args.out}")
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 2
    except QueryError as exc:
        print(f"error[query]: {exc}", file=sys.stderr)
        return 4
    except GraphError as exc:
        print(f"error[graph]: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 3
    except (OrchestratorError, ValueError) as exc:
        print(f"error[runtime]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
