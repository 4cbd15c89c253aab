"""One-dimensional modified shallow-water convection model.

Velocity ``u`` lives on cell edges (edge ``i`` sits between centers ``i`` and
``i + 1``), height ``h`` and rain ``r`` on cell centers. Boundaries are
periodic and all spatial operators are second-order centered differences.
The height equation is written in flux form so that ``sum(h)`` is conserved
to roundoff.

Every field may carry leading batch axes; the grid axis is always the last
one. This lets a whole ensemble advance in a single vectorized step.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ModelBlowUpError

logger = logging.getLogger(__name__)

__all__ = [
    "ModelConfig",
    "ShallowWaterState",
    "geopotential",
    "rain_source",
    "forcing_bump",
    "apply_forcing",
    "step",
    "run",
    "rest_state",
    "random_initial_state",
    "write_trajectory",
]


@dataclass(frozen=True)
class ModelConfig:
    """Physical and numerical parameters of the model.

    ``gravity`` is not given alongside the other constants in the usual
    parameter list; 10 m/s^2 keeps ``gravity * h_c`` above ``phi_c`` so that
    crossing the convection threshold actually lowers the geopotential.
    """

    grid_points: int = 250
    domain_length: float = 125_000.0
    dt: float = 5.0
    h0: float = 90.0
    h_c: float = 90.02
    h_r: float = 90.4
    D_u: float = 25_000.0
    D_h: float = 25_000.0
    D_r: float = 200.0
    phi_c: float = 899.77
    eta: float = 2.5e-4
    delta: float = 1.0 / 300.0
    gravity: float = 10.0
    forcing_amplitude: float = 0.002
    forcing_halfwidth: float = 4.0
    forcing_every: int = 1
    diffusion_substeps: int = 2
    seed: int = 0

    def __post_init__(self):
        if not (self.h0 < self.h_c < self.h_r):
            raise ValueError(
                f"need h0 < h_c < h_r, got {self.h0}, {self.h_c}, {self.h_r}")
        if min(self.D_u, self.D_h, self.D_r) < 0:
            raise ValueError("diffusion constants must be non-negative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.grid_points < 3:
            raise ValueError("need at least 3 grid points")
        if self.forcing_every < 1 or self.diffusion_substeps < 1:
            raise ValueError("forcing_every and diffusion_substeps must be >= 1")

    @property
    def dx(self) -> float:
        return self.domain_length / self.grid_points

    @property
    def gamma(self) -> float:
        """Gravity-wave speed sqrt(g h0) of the resting layer."""
        return math.sqrt(self.gravity * self.h0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class ShallowWaterState:
    u: np.ndarray
    h: np.ndarray
    r: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        if not (self.u.shape == self.h.shape == self.r.shape):
            raise ValueError(
                f"field shapes differ: u{self.u.shape} h{self.h.shape} r{self.r.shape}")

    @property
    def grid_points(self) -> int:
        return self.h.shape[-1]

    def stacked(self) -> np.ndarray:
        """Concatenate (u, h, r) along the grid axis."""
        return np.concatenate([self.u, self.h, self.r], axis=-1)

    @classmethod
    def from_stacked(cls, z: np.ndarray, time: float = 0.0) -> "ShallowWaterState":
        z = np.asarray(z, dtype=float)
        if z.shape[-1] % 3:
            raise ValueError("stacked vector length must be a multiple of 3")
        u, h, r = np.split(z, 3, axis=-1)
        return cls(u.copy(), h.copy(), r.copy(), time)

    def member(self, k: int) -> "ShallowWaterState":
        return ShallowWaterState(self.u[k].copy(), self.h[k].copy(),
                                 self.r[k].copy(), self.time)

    def mass(self, dx: float = 1.0) -> np.ndarray:
        return self.h.sum(axis=-1) * dx


def rest_state(cfg: ModelConfig, batch: tuple = ()) -> ShallowWaterState:
    shape = tuple(batch) + (cfg.grid_points,)
    return ShallowWaterState(np.zeros(shape), np.full(shape, cfg.h0),
                             np.zeros(shape), 0.0)


def geopotential(h, cfg: ModelConfig):
    """phi_c above the convection threshold, g h otherwise."""
    h = np.asarray(h, dtype=float)
    return np.where(h > cfg.h_c, cfg.phi_c, cfg.gravity * h)


def rain_source(u_gradient, h, cfg: ModelConfig):
    """Rain production rate; positive where convergent flow lifts h above h_r."""
    u_gradient = np.asarray(u_gradient, dtype=float)
    h = np.asarray(h, dtype=float)
    producing = (h > cfg.h_r) & (u_gradient < 0)
    return np.where(producing, -cfg.delta * u_gradient, 0.0)


def _periodic_distance(n: int, centers) -> np.ndarray:
    idx = np.arange(n)
    d = np.abs(idx - np.asarray(centers, dtype=float)[..., None])
    return np.minimum(d, n - d)


def forcing_bump(n: int, center, amplitude, halfwidth: float) -> np.ndarray:
    """Gaussian ``amplitude * exp(-(d / halfwidth)**2)`` on a periodic grid.

    ``center`` and ``amplitude`` may be arrays (one bump per batch member).
    """
    d = _periodic_distance(n, center)
    return np.asarray(amplitude, dtype=float)[..., None] * np.exp(-(d / halfwidth) ** 2)


def apply_forcing(state: ShallowWaterState, cfg: ModelConfig,
                  rng: np.random.Generator) -> ShallowWaterState:
    """Add one randomly placed, randomly signed Gaussian bump to ``u``.

    With batched fields every member gets its own bump. The rng is consumed
    even when the amplitude is zero so that streams stay aligned.
    """
    batch = state.u.shape[:-1]
    n = state.grid_points
    centers = rng.integers(0, n, size=batch)
    signs = rng.choice(np.array([-1.0, 1.0]), size=batch)
    if cfg.forcing_amplitude == 0:
        return state
    bump = forcing_bump(n, centers, signs * cfg.forcing_amplitude,
                        cfg.forcing_halfwidth)
    return dataclasses.replace(state, u=state.u + bump)


def _laplacian(f: np.ndarray, dx: float) -> np.ndarray:
    return (np.roll(f, -1, axis=-1) - 2.0 * f + np.roll(f, 1, axis=-1)) / dx**2


def _tendencies(u, h, r, cfg: ModelConfig):
    """Advective, pressure and source tendencies (everything except diffusion)."""
    dx = cfg.dx
    u_left = np.roll(u, 1, axis=-1)          # edge i - 1/2 of center i
    u_center = 0.5 * (u + u_left)
    div_u = (u - u_left) / dx                # du/dx at centers

    potential = geopotential(h, cfg) + cfg.gamma**2 * r
    dpot = (np.roll(potential, -1, axis=-1) - potential) / dx   # at edges
    du_adv = u * (np.roll(u, -1, axis=-1) - u_left) / (2.0 * dx)
    du = -du_adv - dpot

    h_edge = 0.5 * (h + np.roll(h, -1, axis=-1))
    flux = u * h_edge
    dh = -(flux - np.roll(flux, 1, axis=-1)) / dx

    dr_adv = u_center * (np.roll(r, -1, axis=-1) - np.roll(r, 1, axis=-1)) / (2.0 * dx)
    dr = -dr_adv - cfg.eta * r + rain_source(div_u, h, cfg)
    return du, dh, dr


def step(state: ShallowWaterState, cfg: ModelConfig,
         rng: Optional[np.random.Generator] = None,
         step_index: int = 0) -> ShallowWaterState:
    """Advance ``state`` by one model time step ``cfg.dt``.

    Forward Euler for advection, pressure gradient and sources; the diffusion
    part is split into ``cfg.diffusion_substeps`` explicit substeps. Forcing is
    applied when ``rng`` is given and ``step_index`` is a multiple of
    ``cfg.forcing_every``. Rain is clipped at zero afterwards.
    """
    if state.grid_points != cfg.grid_points:
        raise ValueError(
            f"state has {state.grid_points} grid points, config {cfg.grid_points}")
    dt = cfg.dt
    u, h, r = state.u, state.h, state.r

    du, dh, dr = _tendencies(u, h, r, cfg)
    u = u + dt * du
    h = h + dt * dh
    r = r + dt * dr

    sub = dt / cfg.diffusion_substeps
    for _ in range(cfg.diffusion_substeps):
        u = u + sub * cfg.D_u * _laplacian(u, cfg.dx)
        h = h + sub * cfg.D_h * _laplacian(h, cfg.dx)
        r = r + sub * cfg.D_r * _laplacian(r, cfg.dx)

    r = np.maximum(r, 0.0)
    new = ShallowWaterState(u, h, r, state.time + dt)
    if rng is not None and step_index % cfg.forcing_every == 0:
        new = apply_forcing(new, cfg, rng)

    if not (np.isfinite(new.u).all() and np.isfinite(new.h).all()
            and np.isfinite(new.r).all()):
        raise ModelBlowUpError(new.time)
    return new


def run(initial: ShallowWaterState, n_steps: int, cfg: ModelConfig,
        rng: Optional[np.random.Generator] = None,
        sample_every: Optional[int] = None) -> list[ShallowWaterState]:
    """Integrate ``n_steps`` steps and return the sampled trajectory.

    The initial state is always the first sample. With ``sample_every=None``
    only the initial and final states are kept.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    stride = n_steps if sample_every is None else sample_every
    trajectory = [initial]
    state = initial
    for k in range(n_steps):
        state = step(state, cfg, rng, k)
        if stride and (k + 1) % stride == 0:
            trajectory.append(state)
    if n_steps and trajectory[-1] is not state:
        trajectory.append(state)
    return trajectory


def random_initial_state(cfg: ModelConfig, rng: np.random.Generator,
                         batch: tuple = (), spinup_steps: int = 0,
                         bumps: int = 25, u_amplitude: float = 0.5,
                         h_amplitude: float = 0.5) -> ShallowWaterState:
    """Rest state plus random smooth perturbations of ``u`` and ``h``.

    Each member receives ``bumps`` Gaussian bumps (forcing half-width) with
    normally distributed amplitudes of scale ``u_amplitude`` (m/s) and
    ``h_amplitude`` (m). These are strong enough to lift ``h`` past the rain
    threshold within a few dozen steps.
    """
    n = cfg.grid_points
    shape = tuple(batch) + (bumps,)
    centers = rng.integers(0, n, size=shape)
    shapes = np.exp(-(_periodic_distance(n, centers) / cfg.forcing_halfwidth) ** 2)
    u_amp = rng.normal(0.0, u_amplitude, size=shape)
    h_amp = rng.normal(0.0, h_amplitude, size=shape)
    u = (u_amp[..., None] * shapes).sum(axis=-2)
    h = cfg.h0 + (h_amp[..., None] * shapes).sum(axis=-2)
    state = ShallowWaterState(u, h, np.zeros_like(h), 0.0)
    for k in range(spinup_steps):
        state = step(state, cfg, rng, k)
    return dataclasses.replace(state, time=0.0)


def write_trajectory(trajectory: Iterable[ShallowWaterState], cfg: ModelConfig,
                     outdir, seed: int, n_steps: int, prefix: str = "state") -> list[Path]:
    """Write one CSV (grid index, u, h, r) per sample plus ``manifest.json``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, st in enumerate(trajectory):
        path = outdir / f"{prefix}_{k:05d}.csv"
        data = np.column_stack([np.arange(st.grid_points), st.u, st.h, st.r])
        np.savetxt(path, data, delimiter=",", header="index,u,h,r", comments="",
                   fmt=["%d", "%.17g", "%.17g", "%.17g"])
        paths.append(path)
    manifest = {
        "config": cfg.to_dict(),
        "seed": seed,
        "steps": n_steps,
        "samples": [{"file": p.name, "time": st.time}
                    for p, st in zip(paths, trajectory)],
    }
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return paths
