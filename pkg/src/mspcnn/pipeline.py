"""Stage functions shared by the command line and the acceptance suite.

A run directory holds one subdirectory per stage::

    data/            trajectories + manifest        (gen-data)
    cae/             autoencoder checkpoint/report  (train-cae)
    lstm/<model>/    LSTM checkpoint/report         (train-lstm)
    tune/<model>/    coefficient search trials      (tune-alpha)
    predict/<model>/ predicted fields               (predict)
    eval/            metric CSVs and summaries      (evaluate, reproduce)
    noise/           noisy-start metric CSVs        (noise-eval)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import HIGH, LOW, DatasetManifest, WindowSpec, generate_dataset, read_kv, write_kv
from .evaluation import (
    NoiseConfig,
    SummaryRow,
    emit_report,
    error_histogram,
    evaluate_model,
    noisy_eval,
    predict_trajectory_latents,
)
from .models import MultiFidelityCAE, Seq2SeqLSTM, load_checkpoint, save_checkpoint
from .physics import ConstraintConfig
from .training import TrainConfig, TrainReport, train_high_cae, train_lstm, train_low_cae, training_windows, tune_alpha

log = logging.getLogger(__name__)


class MissingStage(RuntimeError):
    """A stage's inputs are absent; the message names the command that produces them."""


@dataclass(frozen=True)
class ModelPreset:
    name: str
    energy: bool = False
    flow: bool = False
    fidelity: str = LOW
    latent_source: str = "high"


PRESETS = {
    p.name: p
    for p in (
        ModelPreset("Basic"),
        ModelPreset("MultiDataset", latent_source="multi"),
        ModelPreset("HF-EC", energy=True, fidelity=HIGH),
        ModelPreset("LF-EC", energy=True),
        ModelPreset("HF-FO", flow=True, fidelity=HIGH),
        ModelPreset("LF-FO", flow=True),
        ModelPreset("HF-MulCons", energy=True, flow=True, fidelity=HIGH),
        ModelPreset("LF-MulCons", energy=True, flow=True),
        ModelPreset("custom"),
    )
}

TABLE_ROWS = {
    "burgers": ["Basic", "MultiDataset", "HF-EC", "LF-EC", "HF-FO", "LF-FO", "HF-MulCons", "LF-MulCons"],
    "swe": ["Basic", "LF-EC", "LF-FO", "LF-MulCons"],
}


def preset(name: str) -> ModelPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose one of {sorted(PRESETS)}") from None


class Run:
    def __init__(self, cfg: RunConfig, out):
        self.cfg = cfg
        self.out = Path(out)

    # ------------------------------------------------------------ paths / loading

    @property
    def data_dir(self) -> Path:
        return self.out / "data"

    @property
    def cae_path(self) -> Path:
        return self.out / "cae" / "cae.f32"

    def lstm_dir(self, model: str) -> Path:
        return self.out / "lstm" / model

    def echo_config(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg.write(self.out / "config.ini")

    def manifest(self) -> DatasetManifest:
        try:
            return DatasetManifest.open(self.data_dir)
        except FileNotFoundError as err:
            raise MissingStage(f"no dataset under {self.data_dir}; run gen-data first") from err

    def new_cae(self) -> MultiFidelityCAE:
        c = self.cfg["cae"]
        channels = 2 if self.cfg.system == "burgers" else 3
        d = self.cfg["data"]
        return MultiFidelityCAE.build(
            channels, d["grid_high"], d["grid_low"], c["latent_dim"], c["widths_high"], c["widths_low"], self.cfg.seed
        )

    def load_cae(self) -> MultiFidelityCAE:
        if not self.cae_path.exists():
            raise MissingStage(f"no autoencoder checkpoint at {self.cae_path}; run train-cae first")
        cae = self.new_cae()
        load_checkpoint(self.cae_path, cae.all_params(), cae.descriptor())
        return cae

    def new_lstm(self, seed: int | None = None) -> Seq2SeqLSTM:
        c = self.cfg["lstm"]
        rng = np.random.default_rng(self.cfg.seed if seed is None else seed)
        return Seq2SeqLSTM(self.cfg["cae"]["latent_dim"], c["hidden"], c["k_in"], c["k_out"], rng)

    def load_lstm(self, model: str) -> Seq2SeqLSTM:
        path = self.lstm_dir(model) / "lstm.f32"
        if not path.exists():
            raise MissingStage(f"no LSTM checkpoint for {model} at {path}; run train-lstm --model {model} first")
        lstm = self.new_lstm()
        load_checkpoint(path, lstm.params, lstm.descriptor())
        return lstm

    def trained_models(self) -> list[str]:
        root = self.out / "lstm"
        found = [p.name for p in root.iterdir() if (p / "lstm.f32").exists()] if root.exists() else []
        order = TABLE_ROWS["burgers"] + ["custom"]
        return sorted(found, key=lambda n: (order.index(n) if n in order else len(order), n))

    # ------------------------------------------------------------ stages

    def gen_data(self) -> DatasetManifest:
        d = self.cfg["data"]
        return generate_dataset(
            self.data_dir,
            self.cfg.solver_config(HIGH),
            self.cfg.solver_config(LOW),
            d["n_train"],
            d["n_test"],
            self.cfg.seed,
            d["val_fraction"],
            workers=int(self.cfg["run"]["threads"]),
        )

    def train_cae(self) -> tuple[MultiFidelityCAE, TrainReport, TrainReport]:
        manifest = self.manifest()
        c = self.cfg["cae"]
        tcfg = TrainConfig(epochs=c["epochs"], lr=c["lr"], batch_size=c["batch_size"], seed=self.cfg.seed, lr_schedule="constant")
        cae = self.new_cae()
        high = train_high_cae(manifest, cae, tcfg)
        low = train_low_cae(manifest, cae, tcfg)
        out = self.cae_path.parent
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.cae_path, cae.all_params(), cae.descriptor(), {"seed": self.cfg.seed})
        high.write(out, "high")
        low.write(out, "low")
        return cae, high, low

    def constraints_for(self, model: str, tuned: bool = False) -> tuple[ConstraintConfig, str]:
        p = preset(model)
        c = self.cfg["constraints"]
        if p.name == "custom":
            cons = ConstraintConfig(c["energy"], c["alpha_energy"], c["flow"], c["alpha_flow"], c["fidelity"])
            return cons, self.cfg["lstm"]["latent_source"]
        cons = ConstraintConfig(
            p.energy, c["alpha_energy"] if p.energy else 0.0, p.flow, c["alpha_flow"] if p.flow else 0.0, p.fidelity
        )
        if tuned and cons.any:
            best = self.out / "tune" / model / "best.txt"
            if not best.exists():
                raise MissingStage(f"no tuned coefficients at {best}; run tune-alpha --model {model} first")
            vals = read_kv(best)
            cons = replace(cons, alpha_energy=float(vals["alpha_energy"]), alpha_flow=float(vals["alpha_flow"]))
        return cons, p.latent_source

    def train_config(self, cons: ConstraintConfig, latent_source: str, seed: int | None = None) -> TrainConfig:
        c = self.cfg["lstm"]
        return TrainConfig(
            epochs=c["epochs"],
            lr=c["lr"],
            batch_size=c["batch_size"],
            seed=self.cfg.seed if seed is None else seed,
            constraints=cons,
            latent_source=latent_source,
            lr_schedule=c["lr_schedule"],
        )

    def train_lstm(self, model: str, tuned: bool = False, cae=None, manifest=None, windows=None) -> tuple[Seq2SeqLSTM, TrainReport]:
        manifest = manifest or self.manifest()
        cae = cae or self.load_cae()
        cons, source = self.constraints_for(model, tuned)
        lstm = self.new_lstm()
        report = train_lstm(manifest, cae, lstm, self.train_config(cons, source), windows=windows)
        out = self.lstm_dir(model)
        out.mkdir(parents=True, exist_ok=True)
        extra = {"model": model, "alpha_energy": repr(cons.alpha_energy), "alpha_flow": repr(cons.alpha_flow)}
        save_checkpoint(out / "lstm.f32", lstm.params, lstm.descriptor(), extra)
        report.write(out, "lstm")
        return lstm, report

    def tune(self, model: str) -> tuple[ConstraintConfig, list]:
        manifest = self.manifest()
        cae = self.load_cae()
        cons, source = self.constraints_for(model)
        if not cons.any:
            raise ValueError(f"model {model} has no physics constraint to tune")
        t = self.cfg["tune"]
        ranges = {"energy": (t["energy_min"], t["energy_max"]), "flow": (t["flow_min"], t["flow_max"])}
        spec_windows = training_windows(manifest, cae, self.window_spec(), source)
        best, trials = tune_alpha(
            manifest,
            cae,
            self.train_config(cons, source),
            ranges,
            t["budget"],
            self.cfg.seed,
            self.new_lstm,
            max(1, self._val_horizon(manifest) // 2),
            t["trial_fraction"],
            windows=spec_windows,
        )
        out = self.out / "tune" / model
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "trials.csv", "w", encoding="utf-8") as fh:
            fh.write("trial,alpha_energy,alpha_flow,val_mse\n")
            for tr in trials:
                fh.write(f"{tr.index},{tr.alpha_energy!r},{tr.alpha_flow!r},{tr.val_mse!r}\n")
        write_kv(out / "best.txt", {"alpha_energy": repr(best.alpha_energy), "alpha_flow": repr(best.alpha_flow)})
        return best, trials

    def window_spec(self) -> WindowSpec:
        return WindowSpec(self.cfg["lstm"]["k_in"], self.cfg["lstm"]["k_out"])

    def _val_horizon(self, manifest: DatasetManifest) -> int:
        n = manifest.high_config.n_steps
        return min(int(self.cfg["eval"]["horizon"]), n - int(self.cfg["lstm"]["k_in"]))

    def predict(self, model: str, horizon: int | None = None) -> list[Path]:
        manifest = self.manifest()
        cae = self.load_cae()
        lstm = self.load_lstm(model)
        horizon = horizon or self._val_horizon(manifest)
        norm = manifest.normalizer
        out = self.out / "predict" / model
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for seed in manifest.seeds(self.cfg["eval"]["split"]):
            first = norm.normalize(manifest.load(seed, HIGH).frames[: lstm.k_in])[None]
            z = predict_trajectory_latents(lstm, cae, first, horizon)[0]
            fields = norm.denormalize(cae.high.decode_array(z.astype(np.float32)).astype(np.float64))
            path = out / f"pred_{seed}.f32"
            np.ascontiguousarray(fields, dtype="<f4").tofile(path)
            write_kv(
                path.with_suffix(".meta"),
                {"shape": ",".join(str(s) for s in fields.shape), "dtype": "float32-le", "order": "step,channel,row,col",
                 "model": model, "seed": seed, "first_step": lstm.k_in},
            )
            written.append(path)
        return written

    def evaluate(self, models: list[str] | None = None, out_name: str = "eval") -> tuple[list[SummaryRow], dict]:
        manifest = self.manifest()
        cae = self.load_cae()
        models = models or self.trained_models()
        if not models:
            raise MissingStage("no trained LSTM found; run train-lstm first")
        e = self.cfg["eval"]
        horizon = self._val_horizon(manifest)
        series, hists, fields, rows = {}, {}, {}, []
        for name in models:
            lstm = self.load_lstm(name)
            res = evaluate_model(lstm, cae, manifest, horizon, HIGH, e["split"], with_ssim=e["ssim"])
            series[name] = res.series
            last = res.abs_errors[:, -1]
            hists[name] = error_histogram(last, e["bins"])
            fields[name] = last
            rep = read_kv(self.lstm_dir(name) / "lstm_report.txt")
            ssim_val = float(np.mean(res.series.ssim)) if res.series.ssim is not None else float("nan")
            rows.append(
                SummaryRow(name, res.series.mean_mse, ssim_val, float(rep["mean_epoch_seconds"]), res.series.final_mse)
            )
        emit_report(self.out / out_name, series, hists, rows, fields)
        return rows, series

    def noise_eval(self, models: list[str]) -> dict:
        manifest = self.manifest()
        cae = self.load_cae()
        n = self.cfg["noise"]
        sigma = n["sigma_fraction"] * manifest.normalizer.span
        noise = NoiseConfig(n["length_scale"], tuple(float(s) for s in sigma), n["seed"])
        clean = NoiseConfig(n["length_scale"], 0.0, n["seed"])
        lstms = {m: self.load_lstm(m) for m in models}
        horizon = self._val_horizon(manifest)
        noisy = noisy_eval(lstms, cae, manifest, noise, horizon, split=self.cfg["eval"]["split"])
        base = noisy_eval(lstms, cae, manifest, clean, horizon, split=self.cfg["eval"]["split"])
        series = {f"{m}_noisy": s for m, s in noisy.items()}
        series.update({f"{m}_clean": s for m, s in base.items()})
        out = self.out / "noise"
        emit_report(out, series)
        with open(out / "inflation.csv", "w", encoding="utf-8") as fh:
            fh.write("model,clean_final_mse,noisy_final_mse,inflation\n")
            for m in models:
                c, z = base[m].final_mse, noisy[m].final_mse
                fh.write(f"{m},{c!r},{z!r},{z / c if c > 0 else float('nan')!r}\n")
        return {m: (base[m], noisy[m]) for m in models}

    def reproduce(self, case: str) -> list[SummaryRow]:
        if case not in TABLE_ROWS:
            raise ValueError(f"unknown case {case!r}; choose one of {sorted(TABLE_ROWS)}")
        want = "burgers" if case == "burgers" else "shallow_water"
        if self.cfg.system != want:
            raise ValueError(f"case {case} needs [run] system = {case}, config has {self.cfg.system}")
        self.gen_data()
        cae, _, _ = self.train_cae()
        manifest = self.manifest()
        for model in TABLE_ROWS[case]:
            log.info("training %s", model)
            self.train_lstm(model, cae=cae, manifest=manifest)
        rows, _ = self.evaluate(TABLE_ROWS[case])
        return rows
