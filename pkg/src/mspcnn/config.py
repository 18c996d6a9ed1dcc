"""Run configuration: an INI-style file of ``[section]`` headers and ``key = value`` lines.

Every key has a typed default; a profile (``desk`` or ``paper``) supplies the
size-related defaults, the file overrides them, and unknown sections or keys
are rejected by name.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .solvers import BURGERS, SHALLOW_WATER, BurgersConfig, SweConfig


class ConfigError(ValueError):
    pass


SYSTEM_ALIASES = {"burgers": BURGERS, "swe": SHALLOW_WATER, "shallow_water": SHALLOW_WATER}

# section -> key -> default; the default's type is the key's type (tuples hold ints)
SCHEMA: dict[str, dict[str, object]] = {
    "run": {"system": "burgers", "seed": 0, "threads": 1},
    "burgers": {
        "length": 2.0, "viscosity": 0.01, "background": 1.0, "patch_fraction": 0.5,
        "patch_min": 1.5, "patch_max": 5.0, "snapshot_dt": 0.005, "n_steps": 40, "safety": 0.2,
    },
    "swe": {
        "length": 32.0, "g": 9.81, "depth": 1.0, "height_min": 0.2, "height_max": 1.0,
        "radius_min": 4.0, "radius_max": 8.0, "center_jitter": 2.0, "snapshot_dt": 0.25,
        "n_steps": 40, "safety": 0.2, "blend": 0.25,
    },
    "data": {"grid_high": 0, "grid_low": 0, "n_train": 20, "n_test": 5, "val_fraction": 0.1},
    "cae": {
        "latent_dim": 128, "widths_high": (16, 32, 64, 128), "widths_low": (16, 32, 64),
        "epochs": 30, "lr": 1e-3, "batch_size": 16,
    },
    "lstm": {
        "hidden": 256, "k_in": 3, "k_out": 3, "epochs": 40, "lr": 1e-3, "batch_size": 16,
        "lr_schedule": "cosine", "latent_source": "high",
    },
    "constraints": {
        "energy": False, "alpha_energy": 0.3, "flow": False, "alpha_flow": 10.0, "fidelity": "low",
    },
    "tune": {
        "budget": 6, "energy_min": 1e-2, "energy_max": 3.0, "flow_min": 0.3, "flow_max": 100.0,
        "trial_fraction": 0.2,
    },
    "eval": {"horizon": 30, "split": "test", "ssim": True, "bins": 20},
    "noise": {"length_scale": 4.0, "sigma_fraction": 0.05, "seed": 0},
}

# size-related defaults per profile; grids are keyed by system
PROFILES: dict[str, dict] = {
    "desk": {
        "grids": {BURGERS: (65, 17), SHALLOW_WATER: (32, 16)},
        "data": {"n_train": 20, "n_test": 5},
        "lstm": {"epochs": 10},
        "cae": {"epochs": 30},
    },
    "paper": {
        "grids": {BURGERS: (129, 33), SHALLOW_WATER: (64, 32)},
        "data": {"n_train": 300, "n_test": 30},
        "lstm": {"epochs": 100},
        "cae": {"epochs": 100},
        # coefficient ranges of the order used for the published tables
        "tune": {"energy_min": 1e-6, "energy_max": 1e-2, "flow_min": 1e-4, "flow_max": 1e-2},
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(section: str, key: str, raw: str, default):
    where = f"[{section}] {key}"
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(p) for p in text.replace(" ", "").split(",") if p)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return text


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]]
    profile: str = "desk"

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @property
    def system(self) -> str:
        return str(self.values["run"]["system"])

    @property
    def seed(self) -> int:
        return int(self.values["run"]["seed"])

    def solver_config(self, fidelity: str):
        d = self.values["data"]
        n = int(d["grid_high"] if fidelity == "high" else d["grid_low"])
        if self.system == BURGERS:
            return BurgersConfig(n=n, **self.values["burgers"])
        return SweConfig(n=n, n_high=int(d["grid_high"]), **self.values["swe"])

    def dumps(self) -> str:
        lines = [f"# profile = {self.profile}"]
        for section, items in self.values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {_render(v)}" for k, v in items.items())
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def load_config(path=None, profile: str = "desk", overrides: dict[str, dict[str, object]] | None = None) -> RunConfig:
    """Resolve defaults, profile, file contents and ``overrides`` (in that order)."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose one of {sorted(PROFILES)}")
    values = {s: dict(items) for s, items in SCHEMA.items()}
    prof = PROFILES[profile]
    for section, items in prof.items():
        if section != "grids":
            values[section].update(items)
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except configparser.Error as err:
            raise ConfigError(f"malformed config {path}: {err}") from err
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown config key '{key}' in section [{section}]")
                values[section][key] = _coerce(section, key, raw, SCHEMA[section][key])
    for section, items in (overrides or {}).items():
        for key, value in items.items():
            if key not in SCHEMA.get(section, {}):
                raise ConfigError(f"unknown config key '{key}' in section [{section}]")
            values[section][key] = value

    system = SYSTEM_ALIASES.get(str(values["run"]["system"]).lower())
    if system is None:
        raise ConfigError(f"[run] system: expected one of {sorted(SYSTEM_ALIASES)}, got {values['run']['system']!r}")
    values["run"]["system"] = system
    high, low = prof["grids"][system]
    if not values["data"]["grid_high"]:
        values["data"]["grid_high"] = high
    if not values["data"]["grid_low"]:
        values["data"]["grid_low"] = low
    cfg = RunConfig(values, profile)
    try:
        cfg.solver_config("high")
        cfg.solver_config("low")
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid solver settings: {err}") from err
    return cfg
