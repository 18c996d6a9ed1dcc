"""Paired high/low-fidelity datasets: generation, persistence, normalisation, windowing.

On-disk layout under a dataset root::

    manifest                      key = value text (entries, split, normalisation)
    traj_<seed>_<fidelity>.f32    little-endian float32, order (step, channel, y, x)
    traj_<seed>_<fidelity>.meta   key = value sidecar (shape, system, seed, config)
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .solvers import CHANNELS, SolverConfig, Trajectory, config_from_dict, simulate

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
HIGH, LOW = "high", "low"


class DataFormatError(ValueError):
    pass


# ---------------------------------------------------------------- key/value text


def write_kv(path: Path, items: dict) -> None:
    lines = [f"{k} = {v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv(path: Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------- persistence


def _meta_path(path: Path) -> Path:
    return Path(path).with_suffix(".meta")


def save_trajectory(traj: Trajectory, path) -> None:
    path = Path(path)
    frames = np.ascontiguousarray(traj.frames, dtype="<f4")
    frames.tofile(path)
    meta = {
        "format_version": FORMAT_VERSION,
        "system": traj.system,
        "fidelity": traj.fidelity,
        "seed": traj.seed,
        "shape": ",".join(str(s) for s in frames.shape),
        "dtype": "float32-le",
        "order": "step,channel,y,x",
    }
    meta.update({f"config.{k}": v for k, v in asdict(traj.config).items()})
    write_kv(_meta_path(path), meta)


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    meta = read_kv(_meta_path(path))
    shape = tuple(int(s) for s in meta["shape"].split(","))
    system = meta["system"]
    cfg = config_from_dict(system, {k[7:]: v for k, v in meta.items() if k.startswith("config.")})
    if len(shape) != 4 or shape[1] != len(CHANNELS[system]) or shape[2:] != (cfg.n, cfg.n):
        raise DataFormatError(f"{path}: sidecar shape {shape} inconsistent with {system} grid {cfg.n}")
    expected = int(np.prod(shape)) * 4
    actual = path.stat().st_size
    if actual != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes for shape {shape}, found {actual}")
    frames = np.fromfile(path, dtype="<f4").reshape(shape).astype(np.float32)
    return Trajectory(frames, cfg, int(meta["seed"]), meta["fidelity"])


# ---------------------------------------------------------------- normalisation


@dataclass
class Normalizer:
    """Per-channel min-max map into [0, 1].

    Values outside the fitted range are clamped and tallied in ``clamp_count``;
    channels with ``max == min`` map to 0.5 and are listed in ``degenerate``.
    """

    lo: np.ndarray
    hi: np.ndarray
    clamp_count: int = 0

    @classmethod
    def fit(cls, arrays) -> "Normalizer":
        lo = hi = None
        for a in arrays:
            a_lo = a.min(axis=(0, 2, 3)).astype(np.float64)
            a_hi = a.max(axis=(0, 2, 3)).astype(np.float64)
            lo = a_lo if lo is None else np.minimum(lo, a_lo)
            hi = a_hi if hi is None else np.maximum(hi, a_hi)
        if lo is None:
            raise ValueError("cannot fit normalisation on an empty training split")
        return cls(lo, hi)

    @property
    def degenerate(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.hi <= self.lo)]

    @property
    def span(self) -> np.ndarray:
        return self.hi - self.lo

    def _bcast(self, arr, ndim):
        return arr.reshape((-1,) + (1,) * 2) if ndim >= 3 else arr

    def normalize(self, x: np.ndarray) -> np.ndarray:
        lo, span = self._bcast(self.lo, x.ndim), self._bcast(self.span, x.ndim)
        safe = np.where(span > 0, span, 1.0)
        y = np.where(span > 0, (x - lo) / safe, 0.5)
        self.clamp_count += int(np.count_nonzero((y < 0) | (y > 1)))
        return np.clip(y, 0.0, 1.0).astype(x.dtype if x.dtype.kind == "f" else np.float64)

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        lo, span = self._bcast(self.lo, y.ndim), self._bcast(self.span, y.ndim)
        return (lo + y * span).astype(y.dtype if y.dtype.kind == "f" else np.float64)

    def to_dict(self, channels) -> dict:
        out = {}
        for i, name in enumerate(channels):
            out[f"norm.{name}.min"] = repr(float(self.lo[i]))
            out[f"norm.{name}.max"] = repr(float(self.hi[i]))
        return out

    @classmethod
    def from_dict(cls, d: dict, channels) -> "Normalizer":
        lo = np.array([float(d[f"norm.{c}.min"]) for c in channels])
        hi = np.array([float(d[f"norm.{c}.max"]) for c in channels])
        return cls(lo, hi)


# ---------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    path: str
    fidelity: str
    seed: int
    split: str
    grid: int
    n_steps: int


@dataclass
class DatasetManifest:
    root: Path
    system: str
    high_config: SolverConfig
    low_config: SolverConfig
    entries: list[ManifestEntry] = field(default_factory=list)
    normalizer: Normalizer | None = None
    format_version: int = FORMAT_VERSION

    @property
    def channels(self) -> tuple[str, ...]:
        return CHANNELS[self.system]

    def config_for(self, fidelity: str) -> SolverConfig:
        return self.high_config if fidelity == HIGH else self.low_config

    def seeds(self, split: str) -> list[int]:
        return sorted({e.seed for e in self.entries if e.split == split}, key=self._order)

    def _order(self, seed):
        return next(i for i, e in enumerate(self.entries) if e.seed == seed)

    def entry(self, seed: int, fidelity: str) -> ManifestEntry:
        for e in self.entries:
            if e.seed == seed and e.fidelity == fidelity:
                return e
        raise KeyError(f"no {fidelity} trajectory for seed {seed}")

    def load(self, seed: int, fidelity: str) -> Trajectory:
        return load_trajectory(self.root / self.entry(seed, fidelity).path)

    def frames(self, split: str, fidelity: str, normalized: bool = True) -> list[np.ndarray]:
        out = []
        for seed in self.seeds(split):
            arr = self.load(seed, fidelity).frames
            out.append(self.normalizer.normalize(arr) if normalized else arr)
        return out

    def pairs(self, split: str) -> list["FidelityPair"]:
        return [FidelityPair(self.load(s, HIGH), self.load(s, LOW), s) for s in self.seeds(split)]

    def save(self) -> None:
        items = {
            "format_version": self.format_version,
            "system": self.system,
            "grid.high": self.high_config.n,
            "grid.low": self.low_config.n,
        }
        items.update({f"config.{k}": v for k, v in asdict(self.high_config).items() if k != "n"})
        for i, e in enumerate(self.entries):
            for key in ("path", "fidelity", "seed", "split", "grid", "n_steps"):
                items[f"traj.{i}.{key}"] = getattr(e, key)
        if self.normalizer is not None:
            items.update(self.normalizer.to_dict(self.channels))
        write_kv(self.root / "manifest", items)

    @classmethod
    def open(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest"
        if not path.exists():
            raise FileNotFoundError(f"no dataset manifest at {path}; run gen-data first")
        d = read_kv(path)
        system = d["system"]
        base = {k[7:]: v for k, v in d.items() if k.startswith("config.")}
        high = config_from_dict(system, {**base, "n": d["grid.high"]})
        low = config_from_dict(system, {**base, "n": d["grid.low"]})
        entries = []
        i = 0
        while f"traj.{i}.path" in d:
            p = f"traj.{i}."
            entries.append(
                ManifestEntry(
                    d[p + "path"], d[p + "fidelity"], int(d[p + "seed"]), d[p + "split"], int(d[p + "grid"]), int(d[p + "n_steps"])
                )
            )
            i += 1
        norm = Normalizer.from_dict(d, CHANNELS[system]) if f"norm.{CHANNELS[system][0]}.min" in d else None
        man = cls(root, system, high, low, entries, norm, int(d["format_version"]))
        man.verify()
        return man

    def verify(self) -> None:
        for e in self.entries:
            p = self.root / e.path
            if not p.exists():
                raise DataFormatError(f"manifest references missing file {p}")
            shape = tuple(int(s) for s in read_kv(_meta_path(p))["shape"].split(","))
            if shape[0] != e.n_steps or shape[2:] != (e.grid, e.grid):
                raise DataFormatError(f"{p}: shape {shape} does not match manifest (n_steps={e.n_steps}, grid={e.grid})")


@dataclass
class FidelityPair:
    high: Trajectory
    low: Trajectory
    seed: int

    def __post_init__(self):
        if self.high.n_steps != self.low.n_steps or self.high.seed != self.low.seed:
            raise ValueError("paired trajectories must share seed and N_step")
        if not np.allclose(self.high.times, self.low.times):
            raise ValueError("paired trajectories must share snapshot times")


def split_sizes(n_train: int, val_fraction: float = 0.1) -> tuple[int, int]:
    """(train, validation) counts carved from ``n_train`` training pairs."""
    n_val = int(round(n_train * val_fraction))
    if n_train >= 2:
        n_val = max(1, n_val)
    return n_train - n_val, n_val


def generate_dataset(
    root,
    high_config: SolverConfig,
    low_config: SolverConfig,
    n_train: int,
    n_test: int,
    seed: int,
    val_fraction: float = 0.1,
    workers: int = 1,
) -> DatasetManifest:
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must both be at least 1")
    if high_config.system != low_config.system:
        raise ValueError("high and low configs must describe the same system")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    seeds = [int(s) for s in rng.choice(2**31 - 1, size=n_train + n_test, replace=False)]
    n_tr, n_val = split_sizes(n_train, val_fraction)
    splits = ["train"] * n_tr + ["val"] * n_val + ["test"] * n_test

    def make(job):
        s, fid = job
        cfg = high_config if fid == HIGH else low_config
        traj = simulate(cfg, s, fid)
        name = f"traj_{s}_{fid}.f32"
        try:
            save_trajectory(traj, root / name)
        except OSError as err:
            raise OSError(f"failed writing {root / name}: {err}") from err
        return name, traj

    jobs = [(s, fid) for s in seeds for fid in (HIGH, LOW)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(make, jobs))
    else:
        results = [make(j) for j in jobs]
    entries = []
    train_frames = []
    for (s, fid), (name, traj), split in zip(jobs, results, [sp for sp in splits for _ in (HIGH, LOW)]):
        entries.append(ManifestEntry(name, fid, s, split, traj.config.n, traj.n_steps))
        if split == "train":
            train_frames.append(traj.frames)
    manifest = DatasetManifest(root, high_config.system, high_config, low_config, entries, Normalizer.fit(train_frames))
    manifest.save()
    log.info("wrote %d trajectories to %s", len(entries), root)
    return manifest


# ---------------------------------------------------------------- windows


@dataclass(frozen=True)
class WindowSpec:
    k_in: int = 3
    k_out: int = 3

    def __post_init__(self):
        if self.k_in < 1 or self.k_out < 1:
            raise ValueError("k_in and k_out must be at least 1")


def window_starts(n_steps: int, spec: WindowSpec) -> range:
    count = n_steps - spec.k_in - spec.k_out + 1
    if count < 1:
        raise ValueError(f"series of length {n_steps} too short for k_in={spec.k_in}, k_out={spec.k_out}")
    return range(count)


def window(series: np.ndarray, spec: WindowSpec) -> tuple[np.ndarray, np.ndarray]:
    """Shifted-start windows of a latent series (N_step, m): returns inputs (S, k_in, m) and targets (S, k_out, m)."""
    starts = window_starts(len(series), spec)
    idx_in = np.array([np.arange(s, s + spec.k_in) for s in starts])
    idx_out = np.array([np.arange(s + spec.k_in, s + spec.k_in + spec.k_out) for s in starts])
    return series[idx_in], series[idx_out]


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
