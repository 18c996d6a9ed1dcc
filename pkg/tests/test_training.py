import numpy as np
import pytest

from conftest import tiny_cae
from mspcnn.config import load_config
from mspcnn.data import WindowSpec
from mspcnn.models import Seq2SeqLSTM
from mspcnn.physics import ConstraintConfig
from mspcnn.tensor import parameters_snapshot
from mspcnn.training import (
    TrainConfig,
    train_high_cae,
    train_low_cae,
    train_lstm,
    training_windows,
    tune_alpha,
)

TABLE_COEFFICIENTS = {
    "energy": [2.0e-6, 2.8e-4, 4.3e-6, 1.1e-4, 4.1e-3, 1.6e-3],
    "flow": [2.5e-3, 8.5e-4, 1.2e-3, 5.0e-4, 3.8e-3, 3.5e-3],
}


def cae_cfg(epochs=5, seed=0):
    return TrainConfig(epochs=epochs, lr=3e-3, batch_size=8, seed=seed, lr_schedule="constant")


def test_config_rejects_zero_epochs():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_high_cae_loss_decreases_and_is_deterministic(tiny_burgers):
    a, b = tiny_cae(tiny_burgers), tiny_cae(tiny_burgers)
    rep = train_high_cae(tiny_burgers, a, cae_cfg())
    train_high_cae(tiny_burgers, b, cae_cfg())
    losses = [r["high_reconstruction"] for r in rep.losses]
    assert all(x > y for x, y in zip(losses, losses[1:]))
    for pa, pb in zip(a.high.params.values(), b.high.params.values()):
        assert pa.data.tobytes() == pb.data.tobytes()


def test_low_cae_aligns_and_keeps_high_frozen(tiny_burgers):
    cae = tiny_cae(tiny_burgers)
    train_high_cae(tiny_burgers, cae, cae_cfg(3))
    before = parameters_snapshot(cae.high.params.values())
    rep = train_low_cae(tiny_burgers, cae, cae_cfg())
    after = parameters_snapshot(cae.high.params.values())
    assert all(x.tobytes() == y.tobytes() for x, y in zip(before, after))
    align = [r["low_alignment"] for r in rep.losses]
    assert align[4] < align[0]
    out = cae.low.decode_array(np.zeros((1, 8), dtype=np.float32))
    assert out.shape == (1, 2, 9, 9)


def test_lstm_keeps_cae_frozen_and_learns(tiny_burgers):
    cae = tiny_cae(tiny_burgers)
    before = parameters_snapshot(cae.all_params().values())
    lstm = Seq2SeqLSTM(8, 16, 3, 3, np.random.default_rng(0))
    cfg = TrainConfig(epochs=5, lr=3e-3, batch_size=8, constraints=ConstraintConfig(True, 0.1, True, 1.0))
    rep = train_lstm(tiny_burgers, cae, lstm, cfg)
    after = parameters_snapshot(cae.all_params().values())
    assert all(x.tobytes() == y.tobytes() for x, y in zip(before, after))
    assert rep.losses[4]["total"] < rep.losses[0]["total"]
    assert set(rep.losses[0]) == {"data", "energy", "flow", "total"}
    assert all(cae.all_params()[k].requires_grad for k in cae.all_params())


def test_basic_model_has_only_data_term(tiny_burgers):
    cae = tiny_cae(tiny_burgers)
    lstm = Seq2SeqLSTM(8, 8, 3, 3, np.random.default_rng(0))
    rep = train_lstm(tiny_burgers, cae, lstm, TrainConfig(epochs=1))
    row = rep.losses[0]
    assert row["energy"] == 0 and row["flow"] == 0 and row["total"] == row["data"]


def test_multi_fidelity_doubles_window_count(tiny_burgers):
    cae = tiny_cae(tiny_burgers)
    spec = WindowSpec(3, 3)
    hi, _ = training_windows(tiny_burgers, cae, spec, "high")
    multi, _ = training_windows(tiny_burgers, cae, spec, "multi")
    assert len(multi) == 2 * len(hi) == 2 * 3 * (12 - 6 + 1)


def test_lstm_training_deterministic(tiny_burgers):
    cae = tiny_cae(tiny_burgers)
    outs = []
    for _ in range(2):
        lstm = Seq2SeqLSTM(8, 8, 3, 3, np.random.default_rng(1))
        train_lstm(tiny_burgers, cae, lstm, TrainConfig(epochs=2, seed=5, constraints=ConstraintConfig(flow=True, alpha_flow=1.0)))
        outs.append(parameters_snapshot(lstm.params.values()))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(*outs))


def test_tune_alpha_budget_one_and_determinism(tiny_burgers):
    cae = tiny_cae(tiny_burgers)
    base = TrainConfig(epochs=5, constraints=ConstraintConfig(True, 0.0, True, 0.0))
    ranges = {"energy": (1e-3, 1e-1), "flow": (1e-2, 1.0)}

    def factory():
        return Seq2SeqLSTM(8, 8, 3, 3, np.random.default_rng(0))

    best, trials = tune_alpha(tiny_burgers, cae, base, ranges, 1, 11, factory, 3)
    assert len(trials) == 1
    assert (best.alpha_energy, best.alpha_flow) == (trials[0].alpha_energy, trials[0].alpha_flow)
    assert 1e-3 <= best.alpha_energy <= 1e-1 and 1e-2 <= best.alpha_flow <= 1.0
    _, again = tune_alpha(tiny_burgers, cae, base, ranges, 2, 11, factory, 3)
    _, again2 = tune_alpha(tiny_burgers, cae, base, ranges, 2, 11, factory, 3)
    assert [(t.alpha_energy, t.alpha_flow, t.val_mse) for t in again] == [(t.alpha_energy, t.alpha_flow, t.val_mse) for t in again2]


def test_paper_profile_ranges_cover_table_coefficients():
    t = load_config(profile="paper")["tune"]
    assert all(t["energy_min"] <= a <= t["energy_max"] for a in TABLE_COEFFICIENTS["energy"])
    assert all(t["flow_min"] <= a <= t["flow_max"] for a in TABLE_COEFFICIENTS["flow"])


def test_tune_rejects_empty_range(tiny_burgers):
    cae = tiny_cae(tiny_burgers)
    base = TrainConfig(epochs=1, constraints=ConstraintConfig(True, 0.0))
    with pytest.raises(ValueError):
        tune_alpha(tiny_burgers, cae, base, {"energy": (0.0, 1.0), "flow": (1, 2)}, 1, 0, lambda: Seq2SeqLSTM(8, 8, 3, 3, np.random.default_rng(0)), 3)


def test_report_files(tmp_path, tiny_burgers):
    cae = tiny_cae(tiny_burgers)
    rep = train_high_cae(tiny_burgers, cae, cae_cfg(2))
    rep.write(tmp_path, "high")
    assert (tmp_path / "high_report.txt").exists()
    lines = (tmp_path / "high_losses.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,seconds") and len(lines) == 3


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(epochs=11, lr=1e-3)
    assert cfg.lr_at(1) == pytest.approx(1e-3)
    assert cfg.lr_at(11) == pytest.approx(5e-5)
    assert TrainConfig(epochs=3, lr_schedule="constant").lr_at(3) == 1e-3
