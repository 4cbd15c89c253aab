"""Twin-experiment data assimilation for the shallow-water model.

A nature run plays the truth. Noisy observations are drawn from it, an
ensemble of independent runs supplies a localized background covariance, and
a much later state of the nature run serves as prior. The variational cost

    1/2 (z - zp)' B^-1 (z - zp) + 1/2 (Hz - zo)' R^-1 (Hz - zo)

is then minimized subject to conservation of total height and non-negative
rain. The state vector is stacked as ``z = (u, h, r)``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import DimensionError, DisjointQPError, NotPositiveDefiniteError
from .kkt_active_set import Alg1Settings, solve_alg1
from .nullspace_pcg import Alg2Settings, solve_alg2
from .qp_core import DisjointQP, Point, SolveTrace
from .shallow_water import (ModelConfig, ShallowWaterState, random_initial_state,
                            run)

logger = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "ObservationSet",
    "BackgroundCovariance",
    "TwinExperiment",
    "lognormal_moments",
    "generate_observations",
    "localization_mask",
    "ensemble_covariance",
    "assemble_da_qp",
    "generate_ensemble",
    "run_twin_experiment",
    "rmse",
    "write_experiment",
]

FIELDS = ("u", "h", "r")


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings of a single-cycle twin experiment.

    ``rain_threshold`` decides where it rains in the truth. ``extra_u_basis``
    chooses whether the extra wind observations count ``extra_u_fraction`` of
    the raining points (``"rain"``) or of the whole grid (``"domain"``).
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    ensemble_size: int = 1000
    lead_steps: int = 60
    prior_lag_min: int = 5000
    prior_lag_max: int = 10000
    localization_cutoff: int = 10
    taper: str = "hard"
    rain_threshold: float = 1e-5
    extra_u_fraction: float = 0.25
    extra_u_basis: str = "rain"
    sigma_u: float = 0.001
    sigma_h: float = 0.02
    rain_mu: float = -8.0
    rain_sigma: float = 1.8
    observation_noise: bool = True
    init_bumps: int = 25
    init_u_amplitude: float = 0.5
    init_h_amplitude: float = 0.5
    chunk_size: int = 100
    workers: int = 1

    def __post_init__(self):
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be >= 2")
        if not 0 <= self.prior_lag_min <= self.prior_lag_max:
            raise ValueError("need 0 <= prior_lag_min <= prior_lag_max")
        if self.taper not in ("hard", "gaspari-cohn"):
            raise ValueError(f"unknown taper {self.taper!r}")
        if self.extra_u_basis not in ("rain", "domain"):
            raise ValueError(f"unknown extra_u_basis {self.extra_u_basis!r}")
        if self.localization_cutoff < 0 or self.lead_steps < 0:
            raise ValueError("localization_cutoff and lead_steps must be >= 0")
        if min(self.sigma_u, self.sigma_h, self.rain_sigma) <= 0:
            raise ValueError("noise scales must be positive")
        if self.workers < 1 or self.chunk_size < 1:
            raise ValueError("workers and chunk_size must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        model = ModelConfig.from_dict(data.pop("model", {}))
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(model=model, **data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def lognormal_moments(mu: float, sigma: float) -> tuple[float, float]:
    """Mean and variance of ``exp(N(mu, sigma^2))``."""
    mean = math.exp(mu + 0.5 * sigma ** 2)
    var = math.expm1(sigma ** 2) * math.exp(2 * mu + sigma ** 2)
    return mean, var


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Point observations of the stacked state.

    ``indices`` are positions in ``(u, h, r)``; ``kinds`` holds 0, 1, 2 for
    the respective field. ``variances`` is the diagonal of R.
    """

    indices: np.ndarray
    values: np.ndarray
    variances: np.ndarray
    kinds: np.ndarray
    state_size: int

    def __post_init__(self):
        k = self.indices.shape[0]
        for name in ("values", "variances", "kinds"):
            if getattr(self, name).shape != (k,):
                raise DimensionError(name, (k,), getattr(self, name).shape)
        if np.any(self.variances <= 0):
            raise ValueError("observation variances must be positive")

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def operator(self) -> np.ndarray:
        """Dense 0/1 selection matrix H of shape (o, 3N)."""
        H = np.zeros((len(self), self.state_size))
        H[np.arange(len(self)), self.indices] = 1.0
        return H

    def counts(self) -> dict:
        return {f: int(np.sum(self.kinds == k)) for k, f in enumerate(FIELDS)}


def generate_observations(truth: ShallowWaterState, cfg: ExperimentConfig,
                          rng: np.random.Generator) -> ObservationSet:
    """Observe u, h and r where the truth rains, plus extra u elsewhere.

    Wind and height receive Gaussian noise; rain receives lognormal noise,
    which is strictly positive and therefore biased. Each R entry is the
    variance of the distribution its noise was drawn from.
    """
    n = truth.grid_points
    raining = np.flatnonzero(truth.r > cfg.rain_threshold)
    dry = np.setdiff1d(np.arange(n), raining)
    base = raining.size if cfg.extra_u_basis == "rain" else n
    n_extra = min(int(round(cfg.extra_u_fraction * base)), dry.size)
    extra = np.sort(rng.choice(dry, size=n_extra, replace=False)) if n_extra else \
        np.zeros(0, dtype=int)

    u_idx = np.union1d(raining, extra)
    indices = np.concatenate([u_idx, n + raining, 2 * n + raining]).astype(int)
    kinds = np.concatenate([np.zeros(u_idx.size), np.ones(raining.size),
                            np.full(raining.size, 2)]).astype(int)
    exact = truth.stacked()[indices]

    _, rain_var = lognormal_moments(cfg.rain_mu, cfg.rain_sigma)
    variances = np.choose(kinds, [cfg.sigma_u ** 2, cfg.sigma_h ** 2, rain_var]).astype(float)
    if cfg.observation_noise:
        noise = np.empty(indices.size)
        gauss = kinds < 2
        noise[gauss] = rng.normal(size=int(gauss.sum())) * np.sqrt(variances[gauss])
        noise[~gauss] = rng.lognormal(cfg.rain_mu, cfg.rain_sigma, size=int((~gauss).sum()))
        values = exact + noise
    else:
        values = exact.copy()
    return ObservationSet(indices, values, variances, kinds, 3 * n)


def _gaspari_cohn(dist: np.ndarray, c: float) -> np.ndarray:
    """Compactly supported fifth-order correlation, zero beyond ``2c``."""
    r = np.abs(dist) / c
    out = np.zeros_like(r, dtype=float)
    a = r <= 1
    b = (r > 1) & (r < 2)
    ra = r[a]
    out[a] = -0.25 * ra ** 5 + 0.5 * ra ** 4 + 0.625 * ra ** 3 - 5 / 3 * ra ** 2 + 1
    rb = r[b]
    out[b] = (rb ** 5 / 12 - 0.5 * rb ** 4 + 0.625 * rb ** 3 + 5 / 3 * rb ** 2
              - 5 * rb + 4 - 2 / (3 * rb))
    return out


def localization_mask(grid_points: int, n_fields: int, cutoff: int,
                      taper: str = "hard") -> np.ndarray:
    """Weights applied entrywise to the sample covariance.

    Entries are indexed by (field, grid point); the weight depends only on
    the periodic grid distance, so the same pattern repeats in every field
    block. The hard mask keeps distances ``<= cutoff``; the taper reaches
    zero at ``cutoff + 1``, so both have the same support.
    """
    idx = np.arange(grid_points)
    d = np.abs(idx[:, None] - idx[None, :])
    d = np.minimum(d, grid_points - d)
    if taper == "hard":
        block = (d <= cutoff).astype(float)
    else:
        block = _gaspari_cohn(d, (cutoff + 1) / 2.0)
    return np.tile(block, (n_fields, n_fields))


@dataclass(frozen=True, eq=False)
class BackgroundCovariance:
    B: np.ndarray
    cutoff: int
    ensemble_size: int
    jitter: float
    cho: tuple = field(repr=False)

    @property
    def size(self) -> int:
        return self.B.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self.cho, rhs)

    def inverse(self) -> np.ndarray:
        """Dense B^-1 obtained from the Cholesky factor."""
        inv = self.solve(np.eye(self.size))
        return 0.5 * (inv + inv.T)


def _factor_with_jitter(C: np.ndarray, max_tries: int = 40):
    dim = C.shape[0]
    trace = float(np.trace(C))
    jitter = 1e-10 * (trace / dim if trace > 0 else 1.0)
    base = 0.0
    # try the raw matrix first; a singular sample covariance escalates
    for attempt in range(max_tries + 1):
        try:
            cho = scipy.linalg.cho_factor(C + base * np.eye(dim), lower=True,
                                          check_finite=False)
            if np.all(np.diag(cho[0]) > 0):
                return cho, base
        except np.linalg.LinAlgError:
            pass
        base = jitter if attempt == 0 else base * 10.0
    raise NotPositiveDefiniteError(
        f"covariance not positive definite even with jitter {base:.3e}")


def ensemble_covariance(members: np.ndarray, grid_points: int, cutoff: int = 10,
                        taper: str = "hard") -> BackgroundCovariance:
    """Localized, regularized sample covariance of stacked ensemble states.

    ``members`` has shape ``(K, n_fields * grid_points)``. The sample
    covariance uses the ``K - 1`` normalization; entries whose grid points
    are more than ``cutoff`` apart (periodically, in any pair of fields) are
    zeroed. A diagonal shift starting at ``1e-10 * trace / dim`` and growing
    tenfold is added until the Cholesky factorization succeeds.
    """
    members = np.asarray(members, dtype=float)
    if members.ndim != 2 or members.shape[0] < 2:
        raise ValueError("need at least two ensemble members as rows of a 2-D array")
    if members.shape[1] % grid_points:
        raise DimensionError("members", ("K", f"multiple of {grid_points}"), members.shape)
    C = np.cov(members, rowvar=False)
    C *= localization_mask(grid_points, members.shape[1] // grid_points, cutoff, taper)
    C = 0.5 * (C + C.T)
    cho, jitter = _factor_with_jitter(C)
    if jitter:
        C = C + jitter * np.eye(C.shape[0])
        logger.info("background covariance regularized with jitter %.3e", jitter)
    return BackgroundCovariance(C, cutoff, members.shape[0], jitter, cho)


def assemble_da_qp(prior: np.ndarray, obs: ObservationSet,
                   bcov: BackgroundCovariance) -> DisjointQP:
    """Variational cost as a disjoint QP with ``x = (u, h)`` and ``y = r``.

    ``A`` sums the height block, ``b`` is the prior's total height and the
    rain block is bounded below by zero. The dropped constant
    ``1/2 zp' B^-1 zp + 1/2 zo' R^-1 zo`` is stored on the problem so that
    ``J + constant`` equals the variational cost.
    """
    prior = np.asarray(prior, dtype=float)
    N3 = bcov.size
    if prior.shape != (N3,) or obs.state_size != N3 or N3 % 3:
        raise DimensionError("prior", (N3,), prior.shape)
    N = N3 // 3
    Binv = bcov.inverse()
    Rinv = 1.0 / obs.variances
    P = Binv.copy()
    np.add.at(P, (obs.indices, obs.indices), Rinv)
    Binv_prior = bcov.solve(prior)
    g = -Binv_prior
    np.add.at(g, obs.indices, -Rinv * obs.values)
    constant = 0.5 * float(prior @ Binv_prior) + 0.5 * float(obs.values @ (Rinv * obs.values))

    n = 2 * N
    A = np.zeros((1, n))
    A[0, N:] = 1.0
    b = np.array([prior[N:n].sum()])
    return DisjointQP(g[:n], g[n:], P[:n, :n], P[:n, n:], P[n:, n:], A, b,
                      np.zeros(N), None, constant)


def generate_ensemble(cfg: ExperimentConfig, seed_seq: np.random.SeedSequence) -> np.ndarray:
    """Stacked states of ``ensemble_size`` independent runs after ``lead_steps``.

    Members are integrated in vectorized chunks, each with its own child
    seed, so the result does not depend on ``workers``.
    """
    sizes = [min(cfg.chunk_size, cfg.ensemble_size - s)
             for s in range(0, cfg.ensemble_size, cfg.chunk_size)]
    # children keyed on position rather than via spawn(), which is stateful
    seeds = [np.random.SeedSequence(seed_seq.entropy, spawn_key=seed_seq.spawn_key + (i,))
             for i in range(len(sizes))]

    def one_chunk(args):
        size, ss = args
        rng = np.random.default_rng(ss)
        init = random_initial_state(cfg.model, rng, (size,), bumps=cfg.init_bumps,
                                    u_amplitude=cfg.init_u_amplitude,
                                    h_amplitude=cfg.init_h_amplitude)
        return run(init, cfg.lead_steps, cfg.model, rng)[-1].stacked()

    jobs = list(zip(sizes, seeds))
    if cfg.workers == 1:
        chunks = [one_chunk(j) for j in jobs]
    else:
        with ThreadPoolExecutor(cfg.workers) as pool:
            chunks = list(pool.map(one_chunk, jobs))
    return np.concatenate(chunks, axis=0)


def rmse(estimate: ShallowWaterState, truth: ShallowWaterState) -> dict:
    """Root-mean-square difference per field."""
    out = {}
    for f in FIELDS:
        a, b = getattr(estimate, f), getattr(truth, f)
        if a.shape != b.shape:
            raise DimensionError(f, b.shape, a.shape)
        out[f] = float(np.sqrt(np.mean((a - b) ** 2)))
    return out


@dataclass(eq=False)
class TwinExperiment:
    config: ExperimentConfig
    truth: ShallowWaterState
    prior: ShallowWaterState
    prior_lag: int
    observations: ObservationSet
    background: BackgroundCovariance
    qp: DisjointQP
    solver: str
    constrained: Optional[ShallowWaterState]
    unconstrained: ShallowWaterState
    trace: Optional[SolveTrace]
    rmse_constrained: Optional[dict]
    rmse_unconstrained: dict
    error: Optional[str] = None

    @property
    def negative_rain_count(self) -> int:
        """Grid points where the unconstrained analysis has negative rain."""
        return int(np.sum(self.unconstrained.r < 0))

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "prior_lag_steps": self.prior_lag,
            "observation_counts": self.observations.counts(),
            "jitter": self.background.jitter,
            "ensemble_size": self.background.ensemble_size,
            "localization_cutoff": self.background.cutoff,
            "solver": self.solver,
            "status": None if self.trace is None else self.trace.status,
            "iterations": None if self.trace is None else self.trace.iterations,
            "objective_constant": self.qp.constant,
            "negative_rain_unconstrained": self.negative_rain_count,
            "rmse": {"constrained": self.rmse_constrained,
                     "unconstrained": self.rmse_unconstrained},
            "error": self.error,
        }


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    nature, ensemble, obs, lag = ss.spawn(4)
    return nature, ensemble, obs, lag


def build_experiment_inputs(cfg: ExperimentConfig):
    """Truth, prior, prior lag, observations and background covariance."""
    s_nature, s_ens, s_obs, s_lag = _streams(cfg.seed)
    mcfg = cfg.model
    rng = np.random.default_rng(s_nature)
    init = random_initial_state(mcfg, rng, bumps=cfg.init_bumps,
                                u_amplitude=cfg.init_u_amplitude,
                                h_amplitude=cfg.init_h_amplitude)
    truth = run(init, cfg.lead_steps, mcfg, rng)[-1]
    lag = int(np.random.default_rng(s_lag).integers(cfg.prior_lag_min, cfg.prior_lag_max + 1))
    prior = run(truth, lag, mcfg, rng)[-1]
    obs = generate_observations(truth, cfg, np.random.default_rng(s_obs))
    members = generate_ensemble(cfg, s_ens)
    bcov = ensemble_covariance(members, mcfg.grid_points, cfg.localization_cutoff, cfg.taper)
    return truth, prior, lag, obs, bcov


def solve_unconstrained(qp: DisjointQP) -> np.ndarray:
    """Minimizer of the same quadratic with every constraint dropped."""
    cho = scipy.linalg.cho_factor(qp.P, lower=True)
    return -scipy.linalg.cho_solve(cho, qp.g)


def run_twin_experiment(cfg: ExperimentConfig = ExperimentConfig(), solver: str = "alg1",
                        alg1: Alg1Settings = Alg1Settings(),
                        alg2: Alg2Settings = Alg2Settings(),
                        inputs=None, raise_on_failure: bool = True) -> TwinExperiment:
    """Run the whole single-cycle experiment.

    ``solver`` is ``"alg1"``, ``"alg2"`` or ``"unconstrained"`` (only the
    direct unconstrained solve). Both constrained solvers start from the
    prior. ``inputs`` may carry a previous :func:`build_experiment_inputs`
    result to skip the model runs. A solver failure is re-raised unless
    ``raise_on_failure`` is false, in which case the experiment is returned
    with ``error`` set and the partial trace attached.
    """
    if solver not in ("alg1", "alg2", "unconstrained"):
        raise ValueError(f"unknown solver {solver!r}")
    truth, prior, lag, obs, bcov = inputs if inputs is not None else \
        build_experiment_inputs(cfg)
    zp = prior.stacked()
    qp = assemble_da_qp(zp, obs, bcov)
    z_unc = solve_unconstrained(qp)
    unc = ShallowWaterState.from_stacked(z_unc, truth.time)

    trace = None
    con = None
    error = None
    if solver != "unconstrained":
        N2 = qp.n
        start = Point(zp[:N2].copy(), np.maximum(zp[N2:], 0.0))
        try:
            if solver == "alg1":
                pt, trace = solve_alg1(qp, start, alg1)
            else:
                pt, trace = solve_alg2(qp, start, alg2)
            con = ShallowWaterState.from_stacked(pt.z, truth.time)
        except DisjointQPError as exc:
            if raise_on_failure:
                raise
            error = str(exc)
            trace = getattr(exc, "trace", None)
    return TwinExperiment(
        config=cfg, truth=truth, prior=prior, prior_lag=lag, observations=obs,
        background=bcov, qp=qp, solver=solver, constrained=con, unconstrained=unc,
        trace=trace, rmse_constrained=None if con is None else rmse(con, truth),
        rmse_unconstrained=rmse(unc, truth), error=error)


def _state_csv(path: Path, columns: dict) -> None:
    names = list(columns)
    data = np.column_stack([columns[k] for k in names])
    fmt = ["%d"] + ["%.17g"] * (len(names) - 1)
    np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt=fmt)


def write_experiment(exp: TwinExperiment, outdir) -> Path:
    """Manifest, RMSE report, field table and observations as files."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "experiment.json", "w") as fh:
        json.dump(exp.manifest(), fh, indent=2, sort_keys=True)
    with open(outdir / "rmse.csv", "w") as fh:
        fh.write("field,constrained,unconstrained\n")
        for f in FIELDS:
            c = "" if exp.rmse_constrained is None else repr(exp.rmse_constrained[f])
            fh.write(f"{f},{c},{exp.rmse_unconstrained[f]!r}\n")
    N = exp.truth.grid_points
    cols = {"index": np.arange(N)}
    for label, st in (("truth", exp.truth), ("prior", exp.prior),
                      ("constrained", exp.constrained), ("unconstrained", exp.unconstrained)):
        if st is None:
            continue
        for f in FIELDS:
            cols[f"{f}_{label}"] = getattr(st, f)
    _state_csv(outdir / "fields.csv", cols)
    obs = exp.observations
    _state_csv(outdir / "observations.csv", {
        "state_index": obs.indices, "field": obs.kinds, "grid_index": obs.indices % N,
        "value": obs.values, "variance": obs.variances})
    return outdir
