"""Training loops for the multi-fidelity autoencoder and the physics-constrained LSTM."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import HIGH, LOW, DatasetManifest, WindowSpec, window, write_kv
from .evaluation import evaluate_model
from .models import MultiFidelityCAE, Seq2SeqLSTM
from .physics import ConstraintConfig, PhysicsContext, composite_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    constraints: ConstraintConfig = field(default_factory=ConstraintConfig)
    latent_source: str = "high"  # "high" or "multi"
    lr_schedule: str = "cosine"  # "cosine" or "constant"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.latent_source not in ("high", "multi"):
            raise ValueError("latent_source must be 'high' or 'multi'")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; cosine decays to 5% of the base rate."""
        if self.lr_schedule == "constant" or self.epochs == 1:
            return self.lr
        frac = (epoch - 1) / (self.epochs - 1)
        return self.lr * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * frac)))


@dataclass
class TrainReport:
    losses: list[dict[str, float]] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    final: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    config: dict = field(default_factory=dict)
    skipped_flow: int = 0
    samples_per_epoch: int = 0

    @property
    def mean_epoch_seconds(self) -> float:
        return float(np.mean(self.epoch_seconds)) if self.epoch_seconds else float("nan")

    def write(self, out_dir, name: str) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        items = {"seed": self.seed, "epochs": len(self.losses), "mean_epoch_seconds": repr(self.mean_epoch_seconds),
                 "skipped_flow": self.skipped_flow, "samples_per_epoch": self.samples_per_epoch}
        items.update({f"final.{k}": repr(v) for k, v in self.final.items()})
        items.update({f"config.{k}": v for k, v in _flatten(self.config).items()})
        write_kv(out / f"{name}_report.txt", items)
        keys = sorted({k for row in self.losses for k in row})
        with open(out / f"{name}_losses.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "seconds"] + keys)
            for i, (row, sec) in enumerate(zip(self.losses, self.epoch_seconds), 1):
                w.writerow([i, repr(sec)] + [repr(row.get(k, float("nan"))) for k in keys])


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i : i + size]


def _finite_or_abort(value: float, what: str, epoch: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"{what} became non-finite at epoch {epoch}")


def _fit(params: dict, loss_fn, n: int, cfg: TrainConfig, rng: np.random.Generator, name: str, report: TrainReport):
    """Generic Adam loop: ``loss_fn(idx)`` builds the batch loss on the active tape."""
    opt = T.Adam(params, lr=cfg.lr)
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        total = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            try:
                with T.Tape() as tape:
                    loss = loss_fn(idx)
                opt.zero_grad()
                T.backward(loss, tape)
                opt.step()
            except FloatingPointError as err:
                raise TrainingError(f"{name}: {err} at epoch {epoch}") from err
            total += loss.item() * len(idx)
        mean = total / n
        _finite_or_abort(mean, f"{name} loss", epoch)
        report.losses.append({name: mean})
        report.epoch_seconds.append(time.perf_counter() - start)
        log.info("%s epoch %d/%d loss %.3e", name, epoch, cfg.epochs, mean)
    return report


def _stack_frames(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(arrays).astype(np.float32)


def train_high_cae(manifest: DatasetManifest, cae: MultiFidelityCAE, cfg: TrainConfig) -> TrainReport:
    """Joint encoder/decoder training on high-fidelity reconstruction MSE."""
    x = _stack_frames(manifest.frames("train", HIGH))
    rng = np.random.default_rng(cfg.seed)
    cae.high.set_trainable(True)
    report = TrainReport(seed=cfg.seed, config=asdict(cfg), samples_per_epoch=len(x))

    def loss_fn(idx):
        xb = x[idx]
        return T.mean(T.square(cae.high.decode(cae.high.encode(xb)) - xb))

    return _fit(cae.high.params, loss_fn, len(x), cfg, rng, "high_reconstruction", report)


def train_low_cae(manifest: DatasetManifest, cae: MultiFidelityCAE, cfg: TrainConfig) -> TrainReport:
    """Low encoder aligned to frozen high-encoder latents; low decoder fed those same latents."""
    highs = manifest.frames("train", HIGH)
    lows = manifest.frames("train", LOW)
    if len(highs) != len(lows) or any(a.shape[0] != b.shape[0] for a, b in zip(highs, lows)):
        raise TrainingError("low-fidelity training needs paired high/low trajectories of equal length")
    xh, xl = _stack_frames(highs), _stack_frames(lows)
    cae.high.set_trainable(False)
    eta = cae.high.encode_array(xh)
    cae.low.set_trainable(True)
    rng = np.random.default_rng(cfg.seed)
    enc_opt = T.Adam(cae.low.encoder_params(), lr=cfg.lr)
    dec_opt = T.Adam(cae.low.decoder_params(), lr=cfg.lr)
    report = TrainReport(seed=cfg.seed, config=asdict(cfg), samples_per_epoch=len(xl))
    n = len(xl)
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        enc_total = dec_total = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            try:
                with T.Tape() as tape:
                    enc_loss = T.mean(T.square(cae.low.encode(xl[idx]) - eta[idx]))
                enc_opt.zero_grad()
                T.backward(enc_loss, tape)
                enc_opt.step()
                with T.Tape() as tape:
                    dec_loss = T.mean(T.square(cae.low.decode(eta[idx]) - xl[idx]))
                dec_opt.zero_grad()
                T.backward(dec_loss, tape)
                dec_opt.step()
            except FloatingPointError as err:
                raise TrainingError(f"low-fidelity CAE: {err} at epoch {epoch}") from err
            enc_total += enc_loss.item() * len(idx)
            dec_total += dec_loss.item() * len(idx)
        row = {"low_alignment": enc_total / n, "low_reconstruction": dec_total / n}
        for k, v in row.items():
            _finite_or_abort(v, k, epoch)
        report.losses.append(row)
        report.epoch_seconds.append(time.perf_counter() - start)
        log.info("low CAE epoch %d/%d align %.3e recon %.3e", epoch, cfg.epochs, row["low_alignment"], row["low_reconstruction"])
    cae.high.set_trainable(True)
    return report


# ---------------------------------------------------------------- LSTM


def latent_series(manifest: DatasetManifest, cae: MultiFidelityCAE, split: str, fidelity: str) -> list[np.ndarray]:
    ae = cae.autoencoder(fidelity)
    return [ae.encode_array(frames) for frames in manifest.frames(split, fidelity)]


def build_windows(series: list[np.ndarray], spec: WindowSpec) -> tuple[np.ndarray, np.ndarray]:
    ins, outs = zip(*(window(s, spec) for s in series))
    return np.concatenate(ins).astype(np.float32), np.concatenate(outs).astype(np.float32)


def physics_context(manifest: DatasetManifest, cae: MultiFidelityCAE, fidelity: str) -> PhysicsContext:
    return PhysicsContext(cae.autoencoder(fidelity), manifest.config_for(fidelity), manifest.normalizer)


def training_windows(manifest: DatasetManifest, cae: MultiFidelityCAE, spec: WindowSpec, latent_source: str):
    """High-encoded windows, plus low-encoded windows from paired trajectories for the multi-fidelity policy."""
    x_in, x_out = build_windows(latent_series(manifest, cae, "train", HIGH), spec)
    if latent_source == "multi":
        l_in, l_out = build_windows(latent_series(manifest, cae, "train", LOW), spec)
        x_in, x_out = np.concatenate([x_in, l_in]), np.concatenate([x_out, l_out])
    return x_in, x_out


def train_lstm(
    manifest: DatasetManifest,
    cae: MultiFidelityCAE,
    lstm: Seq2SeqLSTM,
    cfg: TrainConfig,
    windows: tuple[np.ndarray, np.ndarray] | None = None,
    val_horizon: int | None = None,
    fit_scaling: bool = True,
) -> TrainReport:
    """Optimise the LSTM on latent MSE plus the enabled physics terms; CAE weights stay frozen."""
    spec = WindowSpec(lstm.k_in, lstm.k_out)
    cae.set_trainable(False)
    if windows is None:
        windows = training_windows(manifest, cae, spec, cfg.latent_source)
    x_in, x_out = windows
    if fit_scaling:
        lstm.fit_scaling(np.concatenate([x_in, x_out], axis=1))
    cons = cfg.constraints
    ctx = physics_context(manifest, cae, cons.fidelity) if cons.any else None
    rng = np.random.default_rng(cfg.seed)
    opt = T.Adam({k: v for k, v in lstm.params.items() if v.requires_grad}, lr=cfg.lr)
    report = TrainReport(seed=cfg.seed, config=asdict(cfg), samples_per_epoch=len(x_in))
    n = len(x_in)
    try:
        for epoch in range(1, cfg.epochs + 1):
            opt.state.lr = cfg.lr_at(epoch)
            start = time.perf_counter()
            sums = {"data": 0.0, "energy": 0.0, "flow": 0.0, "total": 0.0}
            for idx in _batches(n, cfg.batch_size, rng):
                try:
                    with T.Tape() as tape:
                        preds = lstm.forward(x_in[idx])
                        parts = composite_loss(x_in[idx], x_out[idx], preds, cons, ctx)
                    opt.zero_grad()
                    T.backward(parts.total, tape)
                    opt.step()
                except FloatingPointError as err:
                    raise TrainingError(f"LSTM: {err} at epoch {epoch}") from err
                for k, v in parts.values().items():
                    sums[k] += v * len(idx)
            report.epoch_seconds.append(time.perf_counter() - start)
            row = {k: v / n for k, v in sums.items()}
            _finite_or_abort(row["total"], "LSTM loss", epoch)
            report.losses.append(row)
            log.info("LSTM epoch %d/%d total %.3e data %.3e", epoch, cfg.epochs, row["total"], row["data"])
    finally:
        cae.set_trainable(True)
    if ctx is not None:
        report.skipped_flow = ctx.skipped_flow
    if val_horizon is not None and manifest.seeds("val"):
        report.final["val_mse"] = validation_mse(lstm, cae, manifest, val_horizon)
    return report


def validation_mse(lstm: Seq2SeqLSTM, cae: MultiFidelityCAE, manifest: DatasetManifest, horizon: int) -> float:
    res = evaluate_model(lstm, cae, manifest, horizon, HIGH, split="val", with_ssim=False)
    return res.series.mean_mse


# ---------------------------------------------------------------- coefficient search


@dataclass
class Trial:
    index: int
    alpha_energy: float
    alpha_flow: float
    val_mse: float


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    if not 0 < lo <= hi:
        raise ValueError(f"search range must be a positive interval, got ({lo}, {hi})")
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def tune_alpha(
    manifest: DatasetManifest,
    cae: MultiFidelityCAE,
    base_cfg: TrainConfig,
    search_ranges: dict[str, tuple[float, float]],
    budget: int,
    seed: int,
    lstm_factory,
    val_horizon: int,
    trial_fraction: float = 0.2,
    windows=None,
) -> tuple[ConstraintConfig, list[Trial]]:
    """Random log-uniform search over the enabled coefficients, scored on validation recurrent MSE.

    ``lstm_factory()`` returns a freshly initialised LSTM for each trial.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    if not manifest.seeds("val"):
        raise ValueError("tune_alpha needs a non-empty validation split")
    rng = np.random.default_rng(seed)
    epochs = max(1, int(round(base_cfg.epochs * trial_fraction)))
    cons = base_cfg.constraints
    trials = []
    best = None
    for i in range(budget):
        a_e = _log_uniform(rng, *search_ranges["energy"]) if cons.energy else 0.0
        a_f = _log_uniform(rng, *search_ranges["flow"]) if cons.flow else 0.0
        trial_cons = replace(cons, alpha_energy=a_e, alpha_flow=a_f)
        cfg = replace(base_cfg, epochs=epochs, constraints=trial_cons)
        lstm = lstm_factory()
        train_lstm(manifest, cae, lstm, cfg, windows=windows)
        score = validation_mse(lstm, cae, manifest, val_horizon)
        trials.append(Trial(i, a_e, a_f, score))
        log.info("trial %d alpha_energy=%.3g alpha_flow=%.3g val_mse=%.4e", i, a_e, a_f, score)
        if best is None or score < best[0]:
            best = (score, trial_cons)
    return best[1], trials
