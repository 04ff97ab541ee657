import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from sewlab.eval.experiment import ExperimentConfig, run_experiment  # noqa: E402

SEEDS = (0, 1, 2)

# small enough to run end to end in a few seconds
TINY = dict(n_per_class=12, image_size=8, patch=3, conv_channels=(4,), epochs=2,
            key_size=8, calibration_period=2, measure_max_iter=20, measure_draws=2,
            measure_window=5, finetune_lrs=(1e-3,), finetune_epochs=1, prune_ratios=(0.5,),
            prune_epochs=1, reverse_steps=5, unlearn_epochs=1, sweep_sigmas=(0.0, 0.1),
            sweep_draws=1, ablation_sigmas=(0.1,))


@pytest.fixture
def tiny_config():
    return ExperimentConfig(run_id="tiny", **TINY)


@pytest.fixture(scope="session")
def desk():
    """Default-config experiments on three seeds; seed -> (report, kept objects)."""
    runs = {}
    for seed in SEEDS:
        keep = {}
        rep = run_experiment(ExperimentConfig(seed=seed), keep=keep)
        runs[seed] = (rep, keep)
    return runs


# one line per acceptance criterion, printed at the end of the session
VERDICTS = []


def verdict(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


def pytest_collection_modifyitems(items):
    for item in items:
        if "desk" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
