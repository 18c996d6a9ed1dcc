"""Convolutional autoencoders sharing one latent space, and the seq2seq LSTM that evolves it."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DataFormatError, read_kv, write_kv
from .tensor import Tensor

KERNEL = 3


@dataclass(frozen=True)
class AutoencoderSpec:
    channels: int
    grid: int
    latent_dim: int = 128
    widths: tuple[int, ...] = (16, 32, 64, 128)

    @property
    def pad(self) -> int:
        # stride-2 stacks need even extents
        return self.grid % 2

    @property
    def sizes(self) -> list[int]:
        """Spatial extent entering each conv layer, then the bottleneck extent."""
        out = [self.grid + self.pad]
        for _ in self.widths:
            out.append((out[-1] + 2 - KERNEL) // 2 + 1)
        return out

    @property
    def flat(self) -> int:
        return self.widths[-1] * self.sizes[-1] ** 2

    def descriptor(self) -> str:
        chans = (self.channels,) + tuple(self.widths)
        convs = ",".join(f"conv{KERNEL}s2:{a}>{b}" for a, b in zip(chans, chans[1:]))
        return f"grid={self.grid};pad={self.pad};{convs};fc:{self.flat}>{self.latent_dim};mirror-transpose;sigmoid"


class ConvAutoencoder:
    """Encoder: stride-2 conv + ReLU stages then a dense map to the latent vector.

    Decoder mirrors it with transposed convolutions and ends in a sigmoid so outputs
    live in the normalised range [0, 1].
    """

    def __init__(self, spec: AutoencoderSpec, rng: np.random.Generator, prefix: str = ""):
        self.spec = spec
        self.prefix = prefix
        p: dict[str, Tensor] = {}
        chans = (spec.channels,) + tuple(spec.widths)
        for i, (a, b) in enumerate(zip(chans, chans[1:])):
            fan = a * KERNEL * KERNEL
            p[f"enc.conv{i}.w"] = T.uniform_init(rng, (b, a, KERNEL, KERNEL), fan)
            p[f"enc.conv{i}.b"] = T.uniform_init(rng, (b,), fan)
        p["enc.fc.w"] = T.uniform_init(rng, (spec.latent_dim, spec.flat), spec.flat)
        p["enc.fc.b"] = T.uniform_init(rng, (spec.latent_dim,), spec.flat)
        p["dec.fc.w"] = T.uniform_init(rng, (spec.flat, spec.latent_dim), spec.latent_dim)
        p["dec.fc.b"] = T.uniform_init(rng, (spec.flat,), spec.latent_dim)
        # transposed layer i maps widths[i] -> chans[i]; kernel stored (in, out, k, k)
        for i in reversed(range(len(spec.widths))):
            a, b = chans[i + 1], chans[i]
            fan = a * KERNEL * KERNEL
            p[f"dec.tconv{i}.w"] = T.uniform_init(rng, (a, b, KERNEL, KERNEL), fan)
            p[f"dec.tconv{i}.b"] = T.uniform_init(rng, (b,), fan)
        for name, t in p.items():
            t.name = prefix + name
        self.params = p

    def encoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("enc.")}

    def decoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("dec.")}

    def set_trainable(self, flag: bool, part: str | None = None) -> None:
        for k, v in self.params.items():
            if part is None or k.startswith(part):
                v.requires_grad = flag

    def _check(self, x: Tensor) -> None:
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (s.channels, s.grid, s.grid):
            raise ValueError(f"autoencoder expects (N, {s.channels}, {s.grid}, {s.grid}), got {x.shape}")

    def encode(self, x) -> Tensor:
        x = T.as_tensor(x)
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        self._check(x)
        p = self.params
        if self.spec.pad:
            x = T.pad2d(x, self.spec.pad, self.spec.pad)
        for i in range(len(self.spec.widths)):
            x = T.relu(T.conv2d(x, p[f"enc.conv{i}.w"], 2, 1, bias=p[f"enc.conv{i}.b"]))
        z = T.linear(T.reshape(x, (x.shape[0], -1)), p["enc.fc.w"], p["enc.fc.b"])
        return T.reshape(z, (self.spec.latent_dim,)) if single else z

    def decode(self, z) -> Tensor:
        z = T.as_tensor(z)
        single = z.ndim == 1
        if single:
            z = T.reshape(z, (1, -1))
        if z.shape[1] != self.spec.latent_dim:
            raise ValueError(f"decoder expects latent dim {self.spec.latent_dim}, got {z.shape}")
        p, s = self.params, self.spec
        sizes = s.sizes
        x = T.relu(T.linear(z, p["dec.fc.w"], p["dec.fc.b"]))
        x = T.reshape(x, (z.shape[0], s.widths[-1], sizes[-1], sizes[-1]))
        for i in reversed(range(len(s.widths))):
            x = T.conv2d_transpose(
                x, p[f"dec.tconv{i}.w"], 2, 1, output_size=(sizes[i], sizes[i]), bias=p[f"dec.tconv{i}.b"]
            )
            x = T.relu(x) if i > 0 else T.sigmoid(x)
        if s.pad:
            x = x[:, :, : s.grid, : s.grid]
        return T.reshape(x, x.shape[1:]) if single else x

    def encode_array(self, x: np.ndarray, batch: int = 64) -> np.ndarray:
        with T.no_record():
            return np.concatenate([self.encode(x[i : i + batch]).data for i in range(0, len(x), batch)])

    def decode_array(self, z: np.ndarray, batch: int = 64) -> np.ndarray:
        with T.no_record():
            return np.concatenate([self.decode(z[i : i + batch]).data for i in range(0, len(z), batch)])


class MultiFidelityCAE:
    """The four networks: high encoder/decoder and low encoder/decoder over one latent space."""

    def __init__(self, high: ConvAutoencoder, low: ConvAutoencoder):
        if high.spec.latent_dim != low.spec.latent_dim:
            raise ValueError("both fidelities must share the latent dimension")
        self.high = high
        self.low = low

    @classmethod
    def build(cls, channels: int, grid_high: int, grid_low: int, latent_dim: int, widths_high, widths_low, seed: int):
        rng = np.random.default_rng(seed)
        high = ConvAutoencoder(AutoencoderSpec(channels, grid_high, latent_dim, tuple(widths_high)), rng, "high.")
        low = ConvAutoencoder(AutoencoderSpec(channels, grid_low, latent_dim, tuple(widths_low)), rng, "low.")
        return cls(high, low)

    @property
    def latent_dim(self) -> int:
        return self.high.spec.latent_dim

    def encode_high(self, x):
        return self.high.encode(x)

    def decode_high(self, z):
        return self.high.decode(z)

    def encode_low(self, x):
        return self.low.encode(x)

    def decode_low(self, z):
        return self.low.decode(z)

    def autoencoder(self, fidelity: str) -> ConvAutoencoder:
        return self.high if fidelity == "high" else self.low

    def all_params(self) -> dict[str, Tensor]:
        out = {"high." + k: v for k, v in self.high.params.items()}
        out.update({"low." + k: v for k, v in self.low.params.items()})
        return out

    def set_trainable(self, flag: bool) -> None:
        self.high.set_trainable(flag)
        self.low.set_trainable(flag)

    def descriptor(self) -> str:
        return f"high[{self.high.spec.descriptor()}]|low[{self.low.spec.descriptor()}]"


class Seq2SeqLSTM:
    """Encoder cell over the input window, decoder cell unrolled autoregressively, linear head."""

    def __init__(self, latent_dim: int, hidden: int, k_in: int, k_out: int, rng: np.random.Generator):
        if k_in < 1 or k_out < 1:
            raise ValueError("k_in and k_out must be at least 1")
        self.latent_dim, self.hidden, self.k_in, self.k_out = latent_dim, hidden, k_in, k_out
        m, d = latent_dim, hidden
        p = {}
        for part in ("enc", "dec"):
            p[f"{part}.w_ih"] = T.uniform_init(rng, (4 * d, m), d)
            p[f"{part}.w_hh"] = T.uniform_init(rng, (4 * d, d), d)
            p[f"{part}.b"] = T.uniform_init(rng, (4 * d,), d)
        p["head.w"] = T.uniform_init(rng, (m, d), d)
        p["head.b"] = T.uniform_init(rng, (m,), d)
        # fixed affine standardisation of the latent space; never trained
        p["norm.shift"] = Tensor(np.zeros(m))
        p["norm.scale"] = Tensor(np.ones(m))
        for name, t in p.items():
            t.name = "lstm." + name
        self.params = p

    def fit_scaling(self, latents: np.ndarray) -> None:
        """Standardise each latent dimension with statistics of ``latents`` (N, m)."""
        flat = latents.reshape(-1, self.latent_dim)
        std = flat.std(axis=0)
        self.params["norm.shift"].data = flat.mean(axis=0).astype(T.get_default_dtype())
        self.params["norm.scale"].data = np.where(std > 1e-6, std, 1.0).astype(T.get_default_dtype())

    def descriptor(self) -> str:
        return f"seq2seq-lstm;m={self.latent_dim};d={self.hidden};k_in={self.k_in};k_out={self.k_out}"

    def forward(self, inputs) -> Tensor:
        """(B, k_in, m) or (k_in, m) -> (B, k_out, m) or (k_out, m)."""
        x = T.as_tensor(inputs)
        single = x.ndim == 2
        if single:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1] != self.k_in or x.shape[2] != self.latent_dim:
            raise ValueError(f"expected window (B, {self.k_in}, {self.latent_dim}), got {x.shape}")
        p = self.params
        shift, scale = p["norm.shift"], p["norm.scale"]
        x = (x - shift) / scale
        b = x.shape[0]
        zeros = np.zeros((b, self.hidden), dtype=x.data.dtype)
        h, c = T.Tensor(zeros), T.Tensor(zeros)
        for t in range(self.k_in):
            h, c = T.lstm_cell(x[:, t, :], h, c, p["enc.w_ih"], p["enc.w_hh"], p["enc.b"])
        step_in = x[:, self.k_in - 1, :]
        outs = []
        for _ in range(self.k_out):
            h, c = T.lstm_cell(step_in, h, c, p["dec.w_ih"], p["dec.w_hh"], p["dec.b"])
            step_in = T.linear(h, p["head.w"], p["head.b"])
            outs.append(step_in)
        y = T.stack(outs, axis=1) * scale + shift
        return T.reshape(y, y.shape[1:]) if single else y

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        with T.no_record():
            return self.forward(inputs).data

    def recurrent_predict(self, init: np.ndarray, horizon: int) -> np.ndarray:
        """Feed the most recent ``k_in`` latents back in until ``horizon`` vectors exist."""
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        init = np.asarray(init)
        single = init.ndim == 2
        seq = init[None] if single else init
        if seq.shape[1] != self.k_in:
            raise ValueError(f"need exactly k_in={self.k_in} initial latents, got {seq.shape[1]}")
        produced = []
        blocks = math.ceil(horizon / self.k_out)
        for _ in range(blocks):
            block = self.predict(seq[:, -self.k_in :])
            produced.append(block)
            seq = np.concatenate([seq, block], axis=1)
        out = np.concatenate(produced, axis=1)[:, :horizon]
        return out[0] if single else out


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: dict[str, Tensor], descriptor: str, extra: dict | None = None) -> None:
    path = Path(path)
    names = list(params)
    flat = np.concatenate([params[n].data.astype("<f4").reshape(-1) for n in names]) if names else np.zeros(0, "<f4")
    flat.tofile(path)
    meta = {"descriptor": descriptor, "count": flat.size}
    meta.update(extra or {})
    for i, n in enumerate(names):
        meta[f"param.{i}"] = f"{n}:{','.join(str(s) for s in params[n].shape)}"
    write_kv(path.with_suffix(".meta"), meta)


def load_checkpoint(path, params: dict[str, Tensor], descriptor: str) -> dict[str, str]:
    """Fill ``params`` in place from ``path``; refuses descriptor or layout mismatches."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    meta = read_kv(path.with_suffix(".meta"))
    if meta["descriptor"] != descriptor:
        raise DataFormatError(f"{path}: architecture {meta['descriptor']!r} does not match {descriptor!r}")
    flat = np.fromfile(path, dtype="<f4")
    if flat.size != int(meta["count"]):
        raise DataFormatError(f"{path}: expected {meta['count']} values, found {flat.size}")
    offset = 0
    for i, n in enumerate(params):
        name, shape = meta[f"param.{i}"].split(":")
        shape = tuple(int(s) for s in shape.split(",") if s)
        if name != n or shape != params[n].shape:
            raise DataFormatError(f"{path}: parameter {i} is {name}{shape}, expected {n}{params[n].shape}")
        size = math.prod(shape)
        params[n].data = flat[offset : offset + size].reshape(shape).astype(T.get_default_dtype())
        offset += size
    return meta
