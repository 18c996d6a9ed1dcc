import numpy as np
import pytest

from mspcnn.data import generate_dataset
from mspcnn.models import MultiFidelityCAE
from mspcnn.solvers import BurgersConfig, SweConfig


@pytest.fixture(scope="session")
def tiny_burgers(tmp_path_factory):
    """Four training pairs (one held out for validation) and two test pairs on 17/9 grids."""
    root = tmp_path_factory.mktemp("tiny_burgers")
    return generate_dataset(root, BurgersConfig(n=17, n_steps=12), BurgersConfig(n=9, n_steps=12), 4, 2, seed=3)


@pytest.fixture(scope="session")
def tiny_swe(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_swe")
    hi = SweConfig(n=16, n_high=16, n_steps=10, radius_min=4.0, radius_max=5.0)
    lo = SweConfig(n=8, n_high=16, n_steps=10, radius_min=4.0, radius_max=5.0)
    return generate_dataset(root, hi, lo, 3, 1, seed=4)


def tiny_cae(manifest, latent_dim=8, seed=0):
    channels = len(manifest.channels)
    return MultiFidelityCAE.build(
        channels, manifest.high_config.n, manifest.low_config.n, latent_dim, (4, 8), (4,), seed
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- desk-scale fixtures (acceptance)

ACCEPTANCE_LINES: list[str] = []
DESK_SEEDS = (0, 1, 2, 3, 4)


def record(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance measurements")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Desk-profile Burgers run (65/17 grids, 20 training pairs) with a trained autoencoder."""
    from mspcnn.config import load_config
    from mspcnn.pipeline import Run

    run = Run(load_config(profile="desk"), tmp_path_factory.mktemp("desk_burgers"))
    run.echo_config()
    run.gen_data()
    cae, _, _ = run.train_cae()
    return run, run.manifest(), cae


@pytest.fixture(scope="session")
def desk_models(desk_run):
    """LSTM variants trained on the shared desk data for each LSTM seed; values are (lstm, report)."""
    from mspcnn.training import train_lstm, training_windows

    run, manifest, cae = desk_run
    spec = run.window_spec()
    windows = {src: training_windows(manifest, cae, spec, src) for src in ("high", "multi")}
    models = {}
    for seed in DESK_SEEDS:
        for name in ("Basic", "MultiDataset", "LF-EC", "LF-FO", "LF-MulCons"):
            cons, source = run.constraints_for(name)
            lstm = run.new_lstm(seed)
            report = train_lstm(manifest, cae, lstm, run.train_config(cons, source, seed), windows=windows[source])
            models[seed, name] = (lstm, report)
    return models
