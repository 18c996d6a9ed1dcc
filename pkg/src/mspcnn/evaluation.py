"""Long-horizon recurrent evaluation, image metrics, correlated noise and report files."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import lapack

from .data import HIGH, DatasetManifest, write_kv
from .models import MultiFidelityCAE, Seq2SeqLSTM


@dataclass
class MetricSeries:
    mse: np.ndarray
    std: np.ndarray
    ssim: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return len(self.mse)

    @property
    def cumulative_mse(self) -> np.ndarray:
        return np.cumsum(self.mse)

    @property
    def final_mse(self) -> float:
        return float(self.mse[-1])

    @property
    def mean_mse(self) -> float:
        return float(self.mse.mean())


@dataclass
class EvalResult:
    series: MetricSeries
    per_trajectory_mse: np.ndarray  # (n_traj, horizon)
    abs_errors: np.ndarray  # (n_traj, horizon, C, H, W), physical units
    lstm_calls: int = 0


@dataclass
class NoiseConfig:
    length_scale: float = 4.0
    sigma: tuple[float, ...] | float = 0.05
    seed: int = 0
    spectral: bool = True

    def __post_init__(self):
        if self.length_scale <= 0:
            raise ValueError("correlation length must be positive")
        if np.any(np.asarray(self.sigma) < 0):
            raise ValueError("noise amplitude must be non-negative")


# ---------------------------------------------------------------- recurrent protocol


def predict_trajectory_latents(
    lstm: Seq2SeqLSTM, cae: MultiFidelityCAE, first: np.ndarray, horizon: int, source: str = HIGH
) -> np.ndarray:
    """Encode the first k_in normalised snapshots (B, k_in, C, H, W) and roll the LSTM forward."""
    b, k = first.shape[:2]
    ae = cae.autoencoder(source)
    z = ae.encode_array(first.reshape((b * k,) + first.shape[2:])).reshape(b, k, -1)
    return lstm.recurrent_predict(z, horizon)


def evaluate_model(
    lstm: Seq2SeqLSTM,
    cae: MultiFidelityCAE,
    manifest: DatasetManifest,
    horizon: int,
    fidelity_out: str = HIGH,
    split: str = "test",
    perturb=None,
    with_ssim: bool = True,
    latent_model=None,
) -> EvalResult:
    """Recurrent prediction from the first k_in true snapshots of every trajectory in ``split``.

    ``perturb`` optionally maps the normalised initial window to a noisy one.
    ``latent_model`` replaces the LSTM with any callable ``(seed, horizon) -> latents``
    (used by the latent-oracle bound).
    """
    k_in = lstm.k_in
    seeds = manifest.seeds(split)
    if not seeds:
        raise ValueError(f"split {split!r} is empty")
    norm = manifest.normalizer
    sq_errs, abs_errs, ssims = [], [], []
    calls = 0
    for seed in seeds:
        high = norm.normalize(manifest.load(seed, HIGH).frames)
        truth = manifest.load(seed, fidelity_out).frames.astype(np.float64)
        if horizon < 1 or horizon > len(high) - k_in:
            raise ValueError(f"horizon {horizon} must lie in [1, N_step - k_in = {len(high) - k_in}]")
        first = high[None, :k_in]
        if perturb is not None:
            first = perturb(first)
        if latent_model is not None:
            latents = latent_model(seed, horizon)
        else:
            latents = predict_trajectory_latents(lstm, cae, first, horizon)[0]
            calls += -(-horizon // lstm.k_out)
        decoded = cae.autoencoder(fidelity_out).decode_array(latents.astype(np.float32))
        pred = norm.denormalize(decoded.astype(np.float64))
        target = truth[k_in : k_in + horizon]
        err = pred - target
        sq_errs.append((err**2).mean(axis=(1, 2, 3)))
        abs_errs.append(np.abs(err).astype(np.float32))
        if with_ssim:
            tn = norm.normalize(target)
            ssims.append([field_ssim(decoded[i], tn[i]) for i in range(horizon)])
    per = np.array(sq_errs)
    series = MetricSeries(per.mean(axis=0), per.std(axis=0), np.array(ssims).mean(axis=0) if with_ssim else None)
    return EvalResult(series, per, np.array(abs_errs), calls)


# ---------------------------------------------------------------- SSIM


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    k = len(w)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ w
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ w


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all valid Gaussian-window positions of two 2-D arrays.

    Grids smaller than the window use the largest odd window that fits.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim needs two equal 2-D arrays, got {a.shape} and {b.shape}")
    size = min(win_size, min(a.shape))
    if size % 2 == 0:
        size -= 1
    w = _gaussian_window(size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a**2
    var_b = _filter_valid(b * b, w) - mu_b**2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def field_ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Channel-averaged SSIM of two (C, H, W) fields."""
    return float(np.mean([ssim(a[c], b[c], data_range) for c in range(a.shape[0])]))


# ---------------------------------------------------------------- histograms


def error_histogram(errors: np.ndarray, bins: int = 20, value_range: tuple[float, float] | None = None):
    if bins < 1:
        raise ValueError("bins must be at least 1")
    errors = np.abs(np.asarray(errors)).ravel()
    if value_range is None:
        value_range = (0.0, float(errors.max()) if errors.size and errors.max() > 0 else 1.0)
    return np.histogram(errors, bins=bins, range=value_range)


# ---------------------------------------------------------------- correlated noise


def matern_correlation(r, length_scale: float = 4.0):
    r = np.asarray(r, dtype=np.float64)
    return (1.0 + r / length_scale) * np.exp(-r / length_scale)


class CorrelatedNoise:
    """Zero-mean Gaussian fields with Matern-type covariance over a grid (distances in grid units).

    Grids up to ``max_points`` factorise the dense covariance once and transform white
    noise. Larger grids need ``spectral=True``, which embeds the covariance in a periodic
    grid of twice the size and samples through the FFT (circulant embedding); the
    restriction to the original grid then has the same covariance up to the clipping of
    negligible negative eigenvalues.
    """

    def __init__(
        self,
        shape: tuple[int, int],
        length_scale: float = 4.0,
        jitter: float = 1e-8,
        max_points: int = 64 * 64,
        spectral: bool = False,
    ):
        h, w = shape
        self.shape = shape
        self.factor = self.sqrt_eigs = None
        if h * w <= max_points:
            self._dense(length_scale, jitter)
        elif spectral:
            self._circulant(length_scale)
        else:
            raise ValueError(f"grid {shape} exceeds the dense-factorisation limit of {max_points} points")

    def _dense(self, length_scale, jitter):
        h, w = self.shape
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pts = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
        r = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
        cov = matern_correlation(r, length_scale) + jitter * np.eye(h * w)
        factor, info = lapack.dpotrf(cov, lower=1, clean=1)
        if info > 0:
            raise np.linalg.LinAlgError(f"covariance not positive definite: failing pivot {info}")
        self.factor = factor

    def _circulant(self, length_scale):
        ph, pw = (2 * n for n in self.shape)
        dy = np.minimum(np.arange(ph), ph - np.arange(ph))
        dx = np.minimum(np.arange(pw), pw - np.arange(pw))
        r = np.hypot(dy[:, None], dx[None, :])
        eigs = np.fft.fft2(matern_correlation(r, length_scale)).real
        self.sqrt_eigs = np.sqrt(np.clip(eigs, 0.0, None) / (ph * pw))

    def sample(self, rng: np.random.Generator, n: int = 1, sigma: float = 1.0) -> np.ndarray:
        if self.factor is not None:
            z = rng.standard_normal((self.factor.shape[0], n))
            return (sigma * (self.factor @ z)).T.reshape((n,) + self.shape)
        h, w = self.shape
        # real and imaginary parts are independent draws, so one transform serves two samples
        pairs = -(-n // 2)
        z = rng.standard_normal((pairs, 2) + self.sqrt_eigs.shape)
        field = np.fft.fft2(self.sqrt_eigs * (z[:, 0] + 1j * z[:, 1]))[:, :h, :w]
        both = np.concatenate([field.real, field.imag])
        return sigma * both[:n]


def sample_correlated_noise(shape, cfg: NoiseConfig, n: int = 1) -> np.ndarray:
    """``shape`` is (C, H, W); returns (n, C, H, W) with per-channel amplitude ``cfg.sigma``."""
    c, h, w = shape
    sigma = np.broadcast_to(np.asarray(cfg.sigma, dtype=np.float64), (c,))
    rng = np.random.default_rng(cfg.seed)
    if not np.any(sigma):
        return np.zeros((n,) + tuple(shape))
    gen = CorrelatedNoise((h, w), cfg.length_scale, spectral=cfg.spectral)
    out = np.stack([gen.sample(rng, n, sigma[ch]) for ch in range(c)], axis=1)
    return out


def noisy_eval(
    models: dict[str, Seq2SeqLSTM],
    cae: MultiFidelityCAE,
    manifest: DatasetManifest,
    cfg: NoiseConfig,
    horizon: int,
    fidelity_out: str = HIGH,
    split: str = "test",
) -> dict[str, MetricSeries]:
    """Perturb the initial k_in snapshots with correlated noise and rerun the recurrent protocol.

    Amplitudes in ``cfg.sigma`` are physical units per channel; every model sees the
    same noise realisation for a given trajectory.
    """
    span = manifest.normalizer.span
    sigma_phys = np.broadcast_to(np.asarray(cfg.sigma, dtype=np.float64), span.shape)
    sigma_norm = np.where(span > 0, sigma_phys / np.where(span > 0, span, 1.0), 0.0)
    grid = manifest.high_config.n
    gen = CorrelatedNoise((grid, grid), cfg.length_scale, spectral=cfg.spectral) if np.any(sigma_norm) else None
    out = {}
    for name, lstm in models.items():
        rng = np.random.default_rng(cfg.seed)

        def perturb(first, rng=rng, k_in=lstm.k_in):
            if gen is None:
                return first
            noise = np.stack([gen.sample(rng, k_in, s) for s in sigma_norm], axis=1)
            return (first + noise[None]).astype(first.dtype)

        out[name] = evaluate_model(lstm, cae, manifest, horizon, fidelity_out, split, perturb=perturb, with_ssim=False).series
    return out


# ---------------------------------------------------------------- reports


@dataclass
class SummaryRow:
    model: str
    mse: float
    ssim: float
    epoch_seconds: float
    mse_final: float = field(default=float("nan"))


def _write_csv(path: Path, header: list[str], rows) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as err:
        raise OSError(f"failed writing {path}: {err}") from err


def summary_table(rows: list[SummaryRow], reference: str = "Basic", final: bool = False) -> list[list]:
    """Rows of (model, mse_pct, ssim, epoch_seconds) with the reference model at 100 %."""
    pick = (lambda r: r.mse_final) if final else (lambda r: r.mse)
    ref = next((pick(r) for r in rows if r.model == reference), None)
    table = []
    for r in rows:
        pct = 100.0 * pick(r) / ref if ref else float("nan")
        table.append([r.model, pct, r.ssim, r.epoch_seconds])
    return table


def emit_report(
    out_dir,
    series: dict[str, MetricSeries],
    histograms: dict[str, tuple[np.ndarray, np.ndarray]] | None = None,
    summary: list[SummaryRow] | None = None,
    fields: dict[str, np.ndarray] | None = None,
) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, s in series.items():
        p = out / f"mse_{name}.csv"
        _write_csv(p, ["step", "mse", "std"], [[i + 1, repr(float(m)), repr(float(d))] for i, (m, d) in enumerate(zip(s.mse, s.std))])
        written.append(p)
    for name, (counts, edges) in (histograms or {}).items():
        p = out / f"hist_{name}.csv"
        _write_csv(p, ["bin_lo", "bin_hi", "count"], [[repr(float(edges[i])), repr(float(edges[i + 1])), int(c)] for i, c in enumerate(counts)])
        written.append(p)
    header = ["model", "mse_pct", "ssim", "epoch_seconds"]
    for fname, final in (("summary.csv", False), ("summary_final_step.csv", True)):
        p = out / fname
        _write_csv(p, header, [[m, repr(float(a)), repr(float(b)), repr(float(c))] for m, a, b, c in summary_table(summary or [], final=final)])
        written.append(p)
    for name, arr in (fields or {}).items():
        p = out / f"errors_{name}.f32"
        np.ascontiguousarray(arr, dtype="<f4").tofile(p)
        write_kv(p.with_suffix(".meta"), {"shape": ",".join(str(s) for s in arr.shape), "dtype": "float32-le", "content": "absolute error"})
        written.append(p)
    return written


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
