import dataclasses

import numpy as np
import pytest

from mspcnn.solvers import (
    BurgersConfig,
    CFLViolation,
    Field,
    NegativeDepth,
    SweConfig,
    advance,
    burgers_step,
    burgers_step_array,
    initial_condition,
    reynolds,
    simulate,
    swe_step,
    swe_step_array,
)


def burgers_oracle(u, v, dx, dt, nu):
    """Scalar stencil: column index is x, row index is y; backward convection, central diffusion."""
    n = u.shape[0]
    un, vn = u.copy(), v.copy()
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            for q, out in ((u, un), (v, vn)):
                conv = u[i, j] * (q[i, j] - q[i, j - 1]) / dx + v[i, j] * (q[i, j] - q[i - 1, j]) / dx
                diff = nu * (q[i, j + 1] + q[i, j - 1] + q[i + 1, j] + q[i - 1, j] - 4 * q[i, j]) / dx**2
                out[i, j] = q[i, j] + dt * (diff - conv)
    return un, vn


# ---------------------------------------------------------------- Burgers


def test_burgers_zero_field_stays_zero():
    cfg = BurgersConfig(n=9)
    out = burgers_step(Field("burgers", np.zeros((2, 9, 9)), cfg.length), cfg)
    assert np.all(out.data == 0)


def test_burgers_uniform_field_is_fixed_point():
    state = np.full((2, 11, 11), 2.5)
    out = state
    for _ in range(100):
        out = burgers_step_array(out, 0.1, 0.002, 0.01)
    np.testing.assert_array_equal(out, state)


def test_burgers_spike_matches_stencil_oracle():
    u = np.zeros((5, 5))
    u[2, 2] = 1.0
    v = np.zeros((5, 5))
    out = burgers_step_array(np.stack([u, v]), 0.25, 0.01, 0.01)
    ru, rv = burgers_oracle(u, v, 0.25, 0.01, 0.01)
    np.testing.assert_allclose(out[0], ru, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out[1], rv, rtol=0, atol=1e-15)
    # hand values: centre loses dt/dx*1 (convection) and 4*nu*dt/dx^2 (diffusion)
    assert out[0, 2, 2] == pytest.approx(1 - 0.04 - 0.0064, abs=1e-15)
    assert out[0, 2, 3] == pytest.approx(0.0016, abs=1e-15)


def test_burgers_random_state_matches_oracle():
    rng = np.random.default_rng(0)
    u, v = rng.uniform(1, 2, (7, 7)), rng.uniform(1, 2, (7, 7))
    out = burgers_step_array(np.stack([u, v]), 0.2, 0.01, 0.02)
    ru, rv = burgers_oracle(u, v, 0.2, 0.01, 0.02)
    np.testing.assert_allclose(out, np.stack([ru, rv]), atol=1e-13)


def test_burgers_cfl_refused():
    with pytest.raises(CFLViolation):
        burgers_step_array(np.full((2, 5, 5), 10.0), 0.1, 0.1, 0.01)


def test_burgers_boundary_held_fixed():
    cfg = BurgersConfig(n=17, n_steps=10)
    traj = simulate(cfg, 3)
    for f in traj.frames:
        np.testing.assert_array_equal(f[:, 0, :], traj.frames[0][:, 0, :])
        np.testing.assert_array_equal(f[:, :, -1], traj.frames[0][:, :, -1])


def test_burgers_max_principle():
    cfg = BurgersConfig(n=33, n_steps=30)
    traj = simulate(cfg, 11)
    assert np.abs(traj.frames).max() <= np.abs(traj.frames[0]).max() + 1e-6


def test_burgers_symmetric_ic_stays_symmetric():
    # u = v on a centred square: swapping axes and channels is a symmetry of the stencil
    cfg = BurgersConfig(n=33)
    s = initial_condition(cfg, 5).data
    for _ in range(100):
        s = burgers_step_array(s, cfg.dx, cfg.dt, cfg.viscosity)
    mirrored = np.stack([s[1].T, s[0].T])
    np.testing.assert_allclose(s, mirrored, atol=1e-6)


def test_burgers_refinement_consistency():
    """Halving dx and dt shrinks the one-interval error against a 4x finer reference."""

    def bump(n):
        x = np.linspace(0, 2.0, n)
        xx, yy = np.meshgrid(x, x)
        u = 1.0 + 0.5 * np.exp(-((xx - 1) ** 2 + (yy - 1) ** 2) / 0.08)
        return np.stack([u, u])

    def run(n, dt):
        cfg = dataclasses.replace(BurgersConfig(n=n), snapshot_dt=0.02)
        s = bump(n)
        steps = int(round(0.02 / dt))
        for _ in range(steps):
            s = burgers_step_array(s, cfg.dx, dt, cfg.viscosity)
        return s

    ref = run(129, 0.02 / 64)
    e17 = np.abs(run(17, 0.02 / 16) - ref[:, ::8, ::8]).max()
    e33 = np.abs(run(33, 0.02 / 32) - ref[:, ::4, ::4]).max()
    assert e33 < e17
    assert np.log2(e17 / e33) >= 0.8


def test_reynolds_examples():
    assert reynolds(5, 1, 0.01) == pytest.approx(500)
    assert reynolds(1.5, 1, 0.01) == pytest.approx(150)
    assert reynolds(3 * 2, 1, 0.01 * 2) == pytest.approx(reynolds(3, 1, 0.01))
    with pytest.raises(ValueError):
        reynolds(0, 1, 0.01)


# ---------------------------------------------------------------- shallow water


def test_swe_flat_lake_unchanged():
    cfg = SweConfig(n=16, n_high=16)
    state = np.stack([np.ones((16, 16)), np.zeros((16, 16)), np.zeros((16, 16))])
    out = swe_step(Field("shallow_water", state, cfg.length), cfg)
    np.testing.assert_allclose(out.data, state, atol=1e-15)


def test_swe_mass_conserved_random_state():
    rng = np.random.default_rng(1)
    n = 20
    h = 1 + 0.2 * rng.uniform(size=(n, n))
    state = np.stack([h, 0.1 * rng.normal(size=(n, n)), 0.1 * rng.normal(size=(n, n))])
    out = swe_step_array(state, 1.0, 0.05, 9.81, 0.25)
    assert abs(out[0].sum() - h.sum()) <= 1e-6 * h.sum()


def test_swe_mass_conserved_over_trajectory():
    cfg = SweConfig(n=32, n_high=32, n_steps=30)
    traj = simulate(cfg, 2)
    masses = traj.frames[:, 0].astype(np.float64).sum(axis=(1, 2))
    assert np.max(np.abs(np.diff(masses)) / masses[:-1]) < 1e-6


def test_swe_centred_cylinder_rotation_invariant():
    cfg = SweConfig(n=32, n_high=32, center_jitter=0.0)
    s = initial_condition(cfg, 4).data
    for _ in range(100):
        s = swe_step_array(s, cfg.dx, cfg.dt, cfg.g, cfg.blend)
    np.testing.assert_allclose(s[0], np.rot90(s[0]), atol=1e-6)
    # reflection across the diagonal swaps the velocity components
    np.testing.assert_allclose(s[1], s[2].T, atol=1e-6)


def test_swe_negative_depth_refused():
    cfg = SweConfig(n=8, n_high=8)
    state = np.stack([-np.ones((8, 8)), np.zeros((8, 8)), np.zeros((8, 8))])
    with pytest.raises(NegativeDepth):
        swe_step(Field("shallow_water", state, cfg.length), cfg)


# ---------------------------------------------------------------- initial conditions / simulate


def test_swe_ic_heights():
    cfg = SweConfig(n=32, n_high=32)
    h = initial_condition(cfg, 9).data[0]
    assert h.min() == 1.0
    assert 1.2 <= h.max() <= 2.0
    assert set(np.unique(h)) == {1.0, h.max()}


def test_burgers_ic_two_values():
    f = initial_condition(BurgersConfig(n=33), 9).data
    vals = np.unique(f)
    assert len(vals) == 2 and vals[0] == 1.0 and 1.5 <= vals[1] <= 5.0


def test_ic_same_region_across_grids():
    hi = initial_condition(BurgersConfig(n=129), 7).data[0]
    lo = initial_condition(BurgersConfig(n=33), 7).data[0]
    rows_hi = np.where(hi.max(axis=1) > 1)[0]
    rows_lo = np.where(lo.max(axis=1) > 1)[0]
    assert abs(rows_hi[0] / 4 - rows_lo[0]) <= 1 and abs(rows_hi[-1] / 4 - rows_lo[-1]) <= 1
    np.testing.assert_array_equal(hi[::4, ::4], lo)


def test_simulate_length_and_spacing():
    cfg = BurgersConfig(n=9, n_steps=100)
    traj = simulate(cfg, 0)
    assert traj.frames.shape == (100, 2, 9, 9)
    np.testing.assert_allclose(np.diff(traj.times), cfg.snapshot_dt)


def test_simulate_deterministic():
    cfg = SweConfig(n=16, n_high=16, n_steps=8)
    a, b = simulate(cfg, 5), simulate(cfg, 5)
    assert a.frames.tobytes() == b.frames.tobytes()


def test_fidelities_share_snapshot_times():
    hi, lo = BurgersConfig(n=65), BurgersConfig(n=17)
    assert hi.snapshot_dt == lo.snapshot_dt
    assert hi.substeps > lo.substeps
    assert hi.dt * hi.substeps == pytest.approx(lo.dt * lo.substeps)


def test_advance_is_snapshot_interval():
    cfg = BurgersConfig(n=17, n_steps=3)
    traj = simulate(cfg, 1)
    np.testing.assert_allclose(advance(traj.frames[0].astype(np.float64), cfg), traj.frames[1], atol=1e-6)


def _area_average(fine: np.ndarray, factor: int) -> np.ndarray:
    """Trapezoid-weighted average of fine nodes around each coarse node (edges use the available half)."""
    w1 = np.r_[0.5, np.ones(factor - 1), 0.5]
    n_c = (fine.shape[-1] - 1) // factor + 1
    pad = factor // 2
    fp = np.pad(fine, [(0, 0), (pad, pad), (pad, pad)], mode="edge")
    out = np.empty(fine.shape[:-2] + (n_c, n_c))
    k = np.outer(w1, w1)
    k /= k.sum()
    for i in range(n_c):
        for j in range(n_c):
            out[:, i, j] = (fp[:, i * factor : i * factor + factor + 1, j * factor : j * factor + factor + 1] * k).sum(axis=(1, 2))
    return out


@pytest.mark.xfail(
    strict=True,
    reason="sharp patch edges steepen into shocks; coarse/fine relative L2 reaches 0.07-0.16 at desk scale",
)
def test_coarse_matches_area_averaged_fine():
    hi, lo = BurgersConfig(n=129, n_steps=40), BurgersConfig(n=33, n_steps=40)
    worst = 0.0
    for seed in (0, 1, 2):
        fh, fl = simulate(hi, seed).frames.astype(np.float64), simulate(lo, seed).frames.astype(np.float64)
        for t in range(len(fh)):
            avg = _area_average(fh[t], 4)
            worst = max(worst, np.linalg.norm(fl[t] - avg) / np.linalg.norm(avg))
    assert worst < 0.1


def test_config_validation():
    with pytest.raises(ValueError):
        BurgersConfig(patch_max=6.0)
    with pytest.raises(ValueError):
        SweConfig(radius_min=2.0)
    with pytest.raises(ValueError):
        Field("burgers", np.zeros((3, 4, 4)), 1.0)
