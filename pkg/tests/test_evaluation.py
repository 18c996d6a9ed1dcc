import numpy as np
import pytest

from conftest import tiny_cae
from mspcnn.evaluation import (
    CorrelatedNoise,
    MetricSeries,
    NoiseConfig,
    SummaryRow,
    emit_report,
    error_histogram,
    evaluate_model,
    matern_correlation,
    noisy_eval,
    read_csv,
    sample_correlated_noise,
    ssim,
    summary_table,
)
from mspcnn.models import Seq2SeqLSTM
from mspcnn.training import TrainConfig, train_high_cae, train_low_cae, train_lstm

C1, C2 = 0.01**2, 0.03**2


@pytest.fixture(scope="module")
def trained(tiny_burgers):
    cae = tiny_cae(tiny_burgers)
    cfg = TrainConfig(epochs=15, lr=3e-3, batch_size=8, lr_schedule="constant")
    train_high_cae(tiny_burgers, cae, cfg)
    train_low_cae(tiny_burgers, cae, cfg)
    lstm = Seq2SeqLSTM(8, 16, 3, 3, np.random.default_rng(0))
    train_lstm(tiny_burgers, cae, lstm, TrainConfig(epochs=15, lr=3e-3, batch_size=8))
    return cae, lstm


# ---------------------------------------------------------------- recurrent protocol


def test_latent_oracle_bounded_by_reconstruction(tiny_burgers, trained):
    cae, lstm = trained
    m = tiny_burgers
    norm = m.normalizer

    def oracle(seed, horizon):
        x = norm.normalize(m.load(seed, "high").frames)[3 : 3 + horizon]
        return cae.high.encode_array(x)

    res = evaluate_model(lstm, cae, m, 6, latent_model=oracle, with_ssim=False)
    recon = []
    for seed in m.seeds("test"):
        truth = m.load(seed, "high").frames.astype(np.float64)[3:9]
        rt = norm.denormalize(cae.high.decode_array(cae.high.encode_array(norm.normalize(truth).astype(np.float32))).astype(np.float64))
        recon.append(((rt - truth) ** 2).mean(axis=(1, 2, 3)))
    assert np.all(res.series.mse <= np.mean(recon, axis=0) + 1e-9)


def test_horizon_k_out_is_one_call_per_trajectory(tiny_burgers, trained):
    cae, lstm = trained
    res = evaluate_model(lstm, cae, tiny_burgers, 3, with_ssim=False)
    assert res.lstm_calls == len(tiny_burgers.seeds("test"))
    assert res.series.horizon == 3 and np.all(res.series.mse >= 0)
    assert res.abs_errors.shape == (2, 3, 2, 17, 17)


def test_horizon_too_long_rejected(tiny_burgers, trained):
    cae, lstm = trained
    with pytest.raises(ValueError, match="horizon"):
        evaluate_model(lstm, cae, tiny_burgers, 10)


def test_cumulative_mse_non_decreasing(tiny_burgers, trained):
    cae, lstm = trained
    s = evaluate_model(lstm, cae, tiny_burgers, 9).series
    assert np.all(np.diff(s.cumulative_mse) >= 0)
    assert s.ssim.shape == (9,) and np.all(s.ssim <= 1)


# ---------------------------------------------------------------- SSIM


def ssim_oracle(a, b, win=11, sigma=1.5):
    ax = np.arange(win) - win // 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            pa, pb = a[i : i + win, j : j + win], b[i : i + win, j : j + win]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * pa * pa).sum() - ma**2
            vb = (w * pb * pb).sum() - mb**2
            cov = (w * pa * pb).sum() - ma * mb
            vals.append(((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma**2 + mb**2 + C1) * (va + vb + C2)))
    return float(np.mean(vals))


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(20, 20)), rng.uniform(size=(20, 20))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-6)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-6)


def test_ssim_checkerboard_negative_matches_oracle():
    x = (np.indices((16, 16)).sum(axis=0) % 2).astype(float)
    val = ssim(x, 1 - x)
    assert val < 0
    assert val == pytest.approx(ssim_oracle(x, 1 - x), abs=1e-9)


def test_ssim_random_matches_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(14, 15)), rng.uniform(size=(14, 15))
    assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-9)


def test_ssim_constant_images_closed_form():
    a, b = np.full((16, 16), 0.2), np.full((16, 16), 0.4)
    expected = (2 * 0.2 * 0.4 + C1) / (0.2**2 + 0.4**2 + C1)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-6)


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))


# ---------------------------------------------------------------- histograms


def test_histogram_examples():
    counts, edges = error_histogram(np.zeros((3, 4, 4)), 5)
    assert counts[0] == 48 and counts.sum() == 48 and len(edges) == 6
    rng = np.random.default_rng(2)
    u = rng.uniform(0, 0.2, size=20000)
    counts, _ = error_histogram(u, 10, (0.0, 0.2))
    chi2 = ((counts - 2000) ** 2 / 2000).sum()
    assert counts.sum() == 20000 and chi2 < 27.9  # 99.9% quantile, 9 dof
    with pytest.raises(ValueError):
        error_histogram(u, 0)


# ---------------------------------------------------------------- correlated noise


def test_matern_values():
    assert matern_correlation(0.0) == 1.0
    assert matern_correlation(4.0, 4.0) == pytest.approx(2 * np.exp(-1), abs=1e-12)
    r = np.linspace(0, 30, 100)
    assert np.all(np.diff(matern_correlation(r)) < 0)


def test_noise_zero_sigma():
    out = sample_correlated_noise((2, 6, 6), NoiseConfig(sigma=0.0), 3)
    assert out.shape == (3, 2, 6, 6) and np.all(out == 0)


def test_noise_variance_correlation_and_stationarity():
    s = sample_correlated_noise((1, 12, 12), NoiseConfig(4.0, 0.5, seed=3), 10000)[:, 0]
    assert np.var(s[:, 6, 6]) == pytest.approx(0.25, rel=0.05)
    flat = s.reshape(len(s), -1)

    def corr(p, q):
        return np.corrcoef(flat[:, p[0] * 12 + p[1]], flat[:, q[0] * 12 + q[1]])[0, 1]

    r4a = corr((2, 2), (2, 6))
    r4b = corr((7, 3), (7, 7))
    assert r4a == pytest.approx(0.736, abs=0.05)
    assert r4a == pytest.approx(r4b, abs=0.05)


def test_noise_rejects_large_grid_and_bad_covariance():
    with pytest.raises(ValueError):
        CorrelatedNoise((65, 65))
    with pytest.raises(np.linalg.LinAlgError, match="pivot"):
        CorrelatedNoise((4, 4), jitter=-2.0)


def test_noisy_eval_zero_sigma_reproduces_clean(tiny_burgers, trained):
    cae, lstm = trained
    clean = evaluate_model(lstm, cae, tiny_burgers, 6, with_ssim=False).series
    noisy = noisy_eval({"m": lstm}, cae, tiny_burgers, NoiseConfig(sigma=0.0), 6)["m"]
    np.testing.assert_array_equal(clean.mse, noisy.mse)


def test_noise_hurts_first_step_on_average(tiny_burgers, trained):
    cae, lstm = trained
    clean = evaluate_model(lstm, cae, tiny_burgers, 3, with_ssim=False).series.mse[0]
    sigma = tuple(0.1 * tiny_burgers.normalizer.span)
    noisy = [noisy_eval({"m": lstm}, cae, tiny_burgers, NoiseConfig(4.0, sigma, seed=s), 3)["m"].mse[0] for s in range(30)]
    assert np.mean(noisy) >= clean


# ---------------------------------------------------------------- reports


def test_summary_basic_is_100_and_csv_roundtrip(tmp_path):
    rows = [SummaryRow("Basic", 0.02, 0.9, 1.5, 0.04), SummaryRow("LF-FO", 0.01, 0.95, 2.0, 0.03)]
    table = summary_table(rows)
    assert table[0][1] == 100.0 and table[1][1] == pytest.approx(50.0)
    series = {"Basic": MetricSeries(np.array([0.1, 0.2]), np.array([0.01, 0.02]), None)}
    emit_report(tmp_path, series, {"Basic": (np.array([3, 1]), np.array([0.0, 0.5, 1.0]))}, rows, {"Basic": np.ones((2, 2, 3, 3))})
    parsed = read_csv(tmp_path / "summary.csv")
    assert list(parsed[0]) == ["model", "mse_pct", "ssim", "epoch_seconds"]
    assert float(parsed[1]["ssim"]) == pytest.approx(0.95, abs=1e-6)
    mse = read_csv(tmp_path / "mse_Basic.csv")
    assert [float(r["mse"]) for r in mse] == pytest.approx([0.1, 0.2], abs=1e-6)
    assert list(read_csv(tmp_path / "hist_Basic.csv")[0]) == ["bin_lo", "bin_hi", "count"]
    assert (tmp_path / "errors_Basic.meta").exists()
    final = read_csv(tmp_path / "summary_final_step.csv")
    assert float(final[1]["mse_pct"]) == pytest.approx(75.0)


def test_empty_report_is_header_only(tmp_path):
    emit_report(tmp_path, {}, {}, [])
    assert (tmp_path / "summary.csv").read_text().strip() == "model,mse_pct,ssim,epoch_seconds"


def test_spectral_noise_matches_matern_on_large_grid():
    gen = CorrelatedNoise((65, 65), spectral=True)
    s = gen.sample(np.random.default_rng(5), 3000)
    assert s.shape == (3000, 65, 65)
    c = s - s.mean(axis=0)
    for r in (0, 4, 8):
        emp = (c[:, 10:50, 10:50] * c[:, 10:50, 10 + r : 50 + r]).mean()
        assert emp == pytest.approx(matern_correlation(float(r)), abs=0.05)
