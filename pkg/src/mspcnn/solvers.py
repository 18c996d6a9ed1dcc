"""Explicit finite-difference integrators for 2-D Burgers and shallow water.

Arrays are laid out ``(..., channel, y, x)``; the step kernels accept any number
of leading batch axes so the physics losses can advance many decoded fields at
once.  Burgers lives on a node grid (``x_i = i * L / (n - 1)``) so that a
129-point and a 33-point grid share their boundary nodes; shallow water uses
cell centres (``x_i = (i + 0.5) * L / n``) so one coarse cell covers an exact
block of fine cells.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import ClassVar, Union

import numpy as np

BURGERS = "burgers"
SHALLOW_WATER = "shallow_water"
CHANNELS = {BURGERS: ("u", "v"), SHALLOW_WATER: ("h", "u", "v")}


class SolverError(RuntimeError):
    """A step was refused; ``step_index`` is set when raised from :func:`simulate`."""

    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message if step_index is None else f"{message} (snapshot step {step_index})")
        self.step_index = step_index


class CFLViolation(SolverError):
    pass


class NegativeDepth(SolverError):
    pass


@dataclass
class Field:
    """One snapshot: ``data`` is (channels, height, width) in physical units."""

    system: str
    data: np.ndarray
    length: float

    def __post_init__(self):
        if self.system not in CHANNELS:
            raise ValueError(f"unknown system {self.system!r}")
        want = len(CHANNELS[self.system])
        if self.data.ndim != 3 or self.data.shape[0] != want:
            raise ValueError(f"{self.system} field needs {want} channels, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("field contains non-finite values")

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def channel(self, name: str) -> np.ndarray:
        return self.data[CHANNELS[self.system].index(name)]


@dataclass
class BurgersConfig:
    system: ClassVar[str] = BURGERS

    n: int = 65
    length: float = 2.0
    viscosity: float = 0.01
    background: float = 1.0
    patch_fraction: float = 0.5
    patch_min: float = 1.5
    patch_max: float = 5.0
    snapshot_dt: float = 0.005
    n_steps: int = 40
    safety: float = 0.2

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("grid size must be at least 3")
        if not (1.5 <= self.patch_min <= self.patch_max <= 5.0):
            raise ValueError("patch magnitude range must lie within [1.5, 5] m/s")
        if self.viscosity <= 0 or self.snapshot_dt <= 0 or self.n_steps < 1:
            raise ValueError("viscosity, snapshot_dt and n_steps must be positive")

    @property
    def dx(self) -> float:
        return self.length / (self.n - 1)

    @property
    def v_max(self) -> float:
        return max(self.patch_max, self.background)

    @property
    def dt_limit(self) -> float:
        return self.safety * min(self.dx / self.v_max, self.dx**2 / (4.0 * self.viscosity))

    @property
    def substeps(self) -> int:
        return math.ceil(self.snapshot_dt / self.dt_limit - 1e-9)

    @property
    def dt(self) -> float:
        return self.snapshot_dt / self.substeps

    @property
    def cell_area(self) -> float:
        return self.dx**2

    def with_grid(self, n: int) -> "BurgersConfig":
        return BurgersConfig(**{**asdict(self), "n": n})


@dataclass
class SweConfig:
    system: ClassVar[str] = SHALLOW_WATER

    n: int = 32
    n_high: int = 32
    length: float = 32.0
    g: float = 9.81
    depth: float = 1.0
    height_min: float = 0.2
    height_max: float = 1.0
    radius_min: float = 4.0
    radius_max: float = 8.0
    center_jitter: float = 2.0
    snapshot_dt: float = 0.25
    n_steps: int = 40
    safety: float = 0.2
    blend: float = 0.25

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("grid size must be at least 3")
        if not (0.2 <= self.height_min <= self.height_max <= 1.0):
            raise ValueError("cylinder height range must lie within [0.2, 1] m")
        if not (4.0 <= self.radius_min <= self.radius_max <= 16.0):
            raise ValueError("cylinder radius range must lie within [4, 16] high-fidelity grid units")
        if self.depth <= 0:
            raise ValueError("undisturbed depth must be positive")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError("blend must lie in [0, 1]")

    @property
    def dx(self) -> float:
        return self.length / self.n

    @property
    def h_max(self) -> float:
        return self.depth + self.height_max

    @property
    def dt_limit(self) -> float:
        return self.safety * self.dx / math.sqrt(self.g * self.h_max)

    @property
    def substeps(self) -> int:
        return math.ceil(self.snapshot_dt / self.dt_limit - 1e-9)

    @property
    def dt(self) -> float:
        return self.snapshot_dt / self.substeps

    @property
    def cell_area(self) -> float:
        return self.dx**2

    def with_grid(self, n: int) -> "SweConfig":
        return SweConfig(**{**asdict(self), "n": n})


SolverConfig = Union[BurgersConfig, SweConfig]


def config_from_dict(system: str, values: dict) -> SolverConfig:
    cls = BurgersConfig if system == BURGERS else SweConfig
    kwargs = {}
    for name, f in cls.__dataclass_fields__.items():
        if name in values:
            kwargs[name] = type(f.default)(values[name])
    return cls(**kwargs)


@dataclass
class Trajectory:
    """Time-ordered snapshots ``frames`` of shape (N_step, C, H, W) from one solver run."""

    frames: np.ndarray
    config: SolverConfig
    seed: int
    fidelity: str
    times: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.times is None:
            self.times = np.arange(len(self.frames)) * self.config.snapshot_dt

    @property
    def system(self) -> str:
        return self.config.system

    @property
    def n_steps(self) -> int:
        return len(self.frames)

    def field(self, i: int) -> Field:
        return Field(self.system, self.frames[i].astype(np.float64), self.config.length)


# ---------------------------------------------------------------- Burgers


def burgers_step_array(state: np.ndarray, dx: float, dt: float, viscosity: float) -> np.ndarray:
    """One Euler step; backward-difference convection, central diffusion, boundary held fixed."""
    u, v = state[..., 0, :, :], state[..., 1, :, :]
    courant = max(float(np.max(np.abs(u))), float(np.max(np.abs(v)))) * dt / dx
    if courant > 1.0:
        raise CFLViolation(f"CFL violated: max |velocity| * dt / dx = {courant:.3f} > 1")
    out = state.copy()
    nu = viscosity * dt / dx**2
    c = dt / dx
    for ch in (0, 1):
        q = state[..., ch, :, :]
        qc = q[..., 1:-1, 1:-1]
        uc, vc = u[..., 1:-1, 1:-1], v[..., 1:-1, 1:-1]
        adv = uc * (qc - q[..., 1:-1, :-2]) + vc * (qc - q[..., :-2, 1:-1])
        lap = q[..., 1:-1, 2:] + q[..., 1:-1, :-2] + q[..., 2:, 1:-1] + q[..., :-2, 1:-1] - 4.0 * qc
        out[..., ch, 1:-1, 1:-1] = qc - c * adv + nu * lap
    return out


def burgers_step(state: Field, cfg: BurgersConfig) -> Field:
    if state.system != BURGERS or state.grid != (cfg.n, cfg.n):
        raise ValueError(f"expected a {cfg.n}x{cfg.n} burgers field, got {state.system} {state.grid}")
    return Field(BURGERS, burgers_step_array(state.data, cfg.dx, cfg.dt, cfg.viscosity), cfg.length)


# ---------------------------------------------------------------- shallow water


def _reflect_pad(h, hu, hv):
    pad = [(0, 0)] * (h.ndim - 2) + [(1, 1), (1, 1)]
    hp, hup, hvp = (np.pad(a, pad, mode="edge") for a in (h, hu, hv))
    # normal momentum flips sign in the ghost layer
    hup[..., :, 0] *= -1.0
    hup[..., :, -1] *= -1.0
    hvp[..., 0, :] *= -1.0
    hvp[..., -1, :] *= -1.0
    return hp, hup, hvp


def swe_step_array(state: np.ndarray, dx: float, dt: float, g: float, blend: float) -> np.ndarray:
    """One Euler step of the conservative system with central flux differences.

    ``blend`` mixes in the four-neighbour average (Lax-Friedrichs at 1.0); pure
    central differencing with forward Euler is unconditionally unstable.
    """
    h = state[..., 0, :, :]
    hu = h * state[..., 1, :, :]
    hv = h * state[..., 2, :, :]
    hp, hup, hvp = _reflect_pad(h, hu, hv)
    up, vp = hup / hp, hvp / hp
    half_g = 0.5 * g * hp * hp
    fx = (hup, hup * up + half_g, hup * vp)
    fy = (hvp, hup * vp, hvp * vp + half_g)
    c = dt / (2.0 * dx)
    new = []
    for q, qp, f, gy in zip((h, hu, hv), (hp, hup, hvp), fx, fy):
        avg = 0.25 * (qp[..., 1:-1, 2:] + qp[..., 1:-1, :-2] + qp[..., 2:, 1:-1] + qp[..., :-2, 1:-1])
        flux = (f[..., 1:-1, 2:] - f[..., 1:-1, :-2]) + (gy[..., 2:, 1:-1] - gy[..., :-2, 1:-1])
        new.append((1.0 - blend) * q + blend * avg - c * flux)
    h_new = new[0]
    if not np.all(h_new > 0) or not np.all(np.isfinite(h_new)):
        raise NegativeDepth(f"water depth became non-positive (min {np.nanmin(h_new):.3g}); reduce dt")
    return np.stack([h_new, new[1] / h_new, new[2] / h_new], axis=-3)


def swe_step(state: Field, cfg: SweConfig) -> Field:
    if state.system != SHALLOW_WATER or state.grid != (cfg.n, cfg.n):
        raise ValueError(f"expected a {cfg.n}x{cfg.n} shallow-water field, got {state.system} {state.grid}")
    if not np.all(state.data[0] > 0):
        raise NegativeDepth("input water depth must be positive")
    return Field(SHALLOW_WATER, swe_step_array(state.data, cfg.dx, cfg.dt, cfg.g, cfg.blend), cfg.length)


# ---------------------------------------------------------------- driver


def step_array(state: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    if cfg.system == BURGERS:
        return burgers_step_array(state, cfg.dx, cfg.dt, cfg.viscosity)
    return swe_step_array(state, cfg.dx, cfg.dt, cfg.g, cfg.blend)


def advance(state: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    """Advance by one snapshot interval (``cfg.substeps`` solver steps). This is the flow operator."""
    for _ in range(cfg.substeps):
        state = step_array(state, cfg)
    return state


def reynolds(velocity: float, length: float, viscosity: float) -> float:
    if velocity <= 0 or length <= 0 or viscosity <= 0:
        raise ValueError("velocity, characteristic length and viscosity must all be positive")
    return velocity * length / viscosity


def node_coords(cfg: SolverConfig) -> np.ndarray:
    if cfg.system == BURGERS:
        return np.arange(cfg.n) * cfg.dx
    return (np.arange(cfg.n) + 0.5) * cfg.dx


def initial_condition(cfg: SolverConfig, seed: int) -> Field:
    """Analytic initial state evaluated on ``cfg``'s grid; the same seed gives the same physical state on any grid."""
    rng = np.random.default_rng(seed)
    x = node_coords(cfg)
    xx, yy = np.meshgrid(x, x)
    if cfg.system == BURGERS:
        magnitude = rng.uniform(cfg.patch_min, cfg.patch_max)
        lo = cfg.length * (0.5 - cfg.patch_fraction / 2)
        hi = cfg.length * (0.5 + cfg.patch_fraction / 2)
        tol = 1e-9 * cfg.length
        inside = (xx >= lo - tol) & (xx <= hi + tol) & (yy >= lo - tol) & (yy <= hi + tol)
        vel = np.where(inside, magnitude, cfg.background)
        return Field(BURGERS, np.stack([vel, vel]).astype(np.float64), cfg.length)
    unit = cfg.length / cfg.n_high
    height = rng.uniform(cfg.height_min, cfg.height_max)
    radius = rng.uniform(cfg.radius_min, cfg.radius_max) * unit
    cx, cy = cfg.length / 2 + rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=2) * unit
    h = cfg.depth + height * (((xx - cx) ** 2 + (yy - cy) ** 2) <= radius**2)
    zeros = np.zeros_like(h)
    return Field(SHALLOW_WATER, np.stack([h, zeros, zeros]), cfg.length)


def simulate(cfg: SolverConfig, seed: int, fidelity: str = "high") -> Trajectory:
    """Run the solver from the seeded initial condition and store ``cfg.n_steps`` snapshots."""
    state = initial_condition(cfg, seed).data
    frames = np.empty((cfg.n_steps,) + state.shape, dtype=np.float32)
    frames[0] = state
    for i in range(1, cfg.n_steps):
        try:
            state = advance(state, cfg)
        except SolverError as err:
            raise type(err)(str(err), step_index=i) from err
        frames[i] = state
    return Trajectory(frames, cfg, seed, fidelity)
