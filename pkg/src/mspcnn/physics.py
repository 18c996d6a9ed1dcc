"""Physics-constraint losses evaluated through a frozen decoder at either fidelity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Normalizer
from .models import ConvAutoencoder
from .solvers import BURGERS, SHALLOW_WATER, Field, SolverConfig, SolverError, advance
from .tensor import Tensor


@dataclass
class ConstraintConfig:
    energy: bool = False
    alpha_energy: float = 0.0
    flow: bool = False
    alpha_flow: float = 0.0
    fidelity: str = "low"

    def __post_init__(self):
        if self.alpha_energy < 0 or self.alpha_flow < 0:
            raise ValueError("constraint coefficients must be non-negative")
        if self.fidelity not in ("high", "low"):
            raise ValueError(f"fidelity must be 'high' or 'low', got {self.fidelity!r}")

    @property
    def any(self) -> bool:
        return self.energy or self.flow


@dataclass
class PhysicsContext:
    """Everything a constraint needs at one fidelity: frozen decoder, solver grid, data scaling."""

    decoder: ConvAutoencoder
    solver: SolverConfig
    normalizer: Normalizer
    skipped_flow: int = field(default=0)

    @property
    def system(self) -> str:
        return self.solver.system

    def denormalize(self, x: Tensor) -> Tensor:
        lo = self.normalizer.lo.reshape(1, -1, 1, 1).astype(x.data.dtype)
        span = self.normalizer.span.reshape(1, -1, 1, 1).astype(x.data.dtype)
        return x * span + lo


@dataclass
class LossBreakdown:
    data: Tensor
    energy: Tensor
    flow: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("data", "energy", "flow", "total")}


# ---------------------------------------------------------------- energy


def energy_density(x, system: str, g: float = 9.81):
    """Pointwise energy of physical fields shaped (..., C, H, W); works on arrays and Tensors."""
    if system == BURGERS:
        u, v = x[..., 0, :, :], x[..., 1, :, :]
        return 0.5 * (u * u + v * v)
    if system == SHALLOW_WATER:
        h, u, v = x[..., 0, :, :], x[..., 1, :, :], x[..., 2, :, :]
        return 0.5 * h * (u * u + v * v) + 0.5 * g * (h * h)
    raise ValueError(f"unknown system {system!r}")


def total_energy(x: Field, cell_area: float | None = None, g: float = 9.81) -> float:
    """Cell-area weighted total energy of one physical field (kinetic only for Burgers)."""
    if not isinstance(x, Field):
        raise TypeError("total_energy expects a Field")
    if cell_area is None:
        n = x.grid[0]
        cell_area = (x.length / (n - 1 if x.system == BURGERS else n)) ** 2
    return float(energy_density(x.data, x.system, g).sum() * cell_area)


def _batch_energy(x_phys: Tensor, ctx: PhysicsContext) -> Tensor:
    """(B, C, H, W) physical Tensor -> (B,) total energies."""
    g = getattr(ctx.solver, "g", 9.81)
    dens = energy_density(x_phys, ctx.system, g)
    return T.tsum(T.reshape(dens, (dens.shape[0], -1)), axis=1) * ctx.solver.cell_area


def _decode_windows(ctx: PhysicsContext, latents) -> Tensor:
    """(B, k, m) latents -> (B, k, C, H, W) normalised decoded fields."""
    z = T.as_tensor(latents)
    b, k, m = z.shape
    x = ctx.decoder.decode(T.reshape(z, (b * k, m)))
    return T.reshape(x, (b, k) + x.shape[1:])


def window_energy(ctx: PhysicsContext, latents) -> Tensor:
    """Mean total energy over each window: (B, k, m) -> (B,)."""
    x = _decode_windows(ctx, latents)
    b, k = x.shape[:2]
    phys = ctx.denormalize(T.reshape(x, (b * k,) + x.shape[2:]))
    return T.mean(T.reshape(_batch_energy(phys, ctx), (b, k)), axis=1)


def energy_loss(inputs, preds, ctx: PhysicsContext) -> Tensor:
    """Batch mean of |E_in - E_out|; E_in comes from ground-truth inputs and carries no gradient."""
    inputs = np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs)
    preds = T.as_tensor(preds)
    if inputs.ndim != 3 or preds.ndim != 3 or inputs.shape[0] != preds.shape[0] or inputs.shape[2] != preds.shape[2]:
        raise ValueError(f"mismatched windows: inputs {inputs.shape}, preds {preds.shape}")
    with T.no_record():
        e_in = window_energy(ctx, inputs).data
    e_out = window_energy(ctx, preds)
    return T.mean(T.tabs(e_out - e_in))


# ---------------------------------------------------------------- flow operator


def flow_targets(inputs: np.ndarray, k_out: int, ctx: PhysicsContext) -> tuple[np.ndarray, np.ndarray]:
    """Solver chain seeded from the decoded last input latent.

    Returns normalised targets (B, k_out, C, H, W) and a boolean mask of samples
    whose chain completed; decoded fields are clamped to the normalised range
    before stepping.
    """
    with T.no_record():
        start = ctx.decoder.decode(inputs[:, -1, :]).data.astype(np.float64)
    start = np.clip(start, 0.0, 1.0)
    state = ctx.normalizer.denormalize(start)
    ok = np.ones(len(state), dtype=bool)
    chain = []
    for _ in range(k_out):
        try:
            state = advance(state, ctx.solver)
        except SolverError:
            # isolate the offending samples, keep the rest
            nxt = np.empty_like(state)
            for i in range(len(state)):
                if not ok[i]:
                    nxt[i] = state[i]
                    continue
                try:
                    nxt[i] = advance(state[i], ctx.solver)
                except SolverError:
                    ok[i] = False
                    nxt[i] = state[i]
            state = nxt
        chain.append(state)
    lo = ctx.normalizer.lo.reshape(-1, 1, 1)
    span = np.where(ctx.normalizer.span > 0, ctx.normalizer.span, 1.0).reshape(-1, 1, 1)
    targets = (np.stack(chain, axis=1) - lo) / span
    return targets.astype(start.dtype), ok


def flow_loss(inputs, preds, ctx: PhysicsContext) -> Tensor:
    """Batch mean of (1/k_out) * sum_i ||x_fp_i - F_d(pred_i)||^2 over completed chains."""
    inputs = np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs)
    preds = T.as_tensor(preds)
    if inputs.ndim != 3 or preds.ndim != 3 or inputs.shape[0] != preds.shape[0]:
        raise ValueError(f"mismatched windows: inputs {inputs.shape}, preds {preds.shape}")
    b, k_out = preds.shape[:2]
    targets, ok = flow_targets(inputs, k_out, ctx)
    ctx.skipped_flow += int((~ok).sum())
    decoded = _decode_windows(ctx, preds)
    diff = decoded - targets.astype(decoded.data.dtype)
    per_sample = T.tsum(T.reshape(T.square(diff), (b, -1)), axis=1) * (1.0 / k_out)
    weights = ok.astype(decoded.data.dtype) / b
    return T.tsum(per_sample * weights)


# ---------------------------------------------------------------- composite


def data_loss(targets, preds) -> Tensor:
    """Latent-space (1/k_out) * sum_i ||eta_i - pred_i||^2, averaged over the batch."""
    preds = T.as_tensor(preds)
    diff = preds - np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=preds.data.dtype)
    b, k = preds.shape[:2]
    return T.tsum(T.square(diff)) * (1.0 / (b * k))


def composite_loss(inputs, targets, preds, cfg: ConstraintConfig, ctx: PhysicsContext | None) -> LossBreakdown:
    preds = T.as_tensor(preds)
    zero = T.Tensor(np.zeros((), dtype=preds.data.dtype))
    l_data = data_loss(targets, preds)
    total = l_data
    l_energy = l_flow = zero
    if cfg.any and ctx is None:
        raise ValueError("constraints enabled but no physics context supplied")
    if cfg.energy:
        l_energy = energy_loss(inputs, preds, ctx)
        total = total + cfg.alpha_energy * l_energy
    if cfg.flow:
        l_flow = flow_loss(inputs, preds, ctx)
        total = total + cfg.alpha_flow * l_flow
    return LossBreakdown(l_data, l_energy, l_flow, total)
