import pytest

from gridflow.synth import CitySpec, generate_scenario
from gridflow.train import load_scenario
from gridflow.unet import ArchConfig

MINI_ARCH = ArchConfig(depth=2, growth=2, base_channels=4, layers_per_block=2)


@pytest.fixture(scope="session")
def mini_scenario_dir(tmp_path_factory):
    """Three first-half and two second-half days on a 32x32 city."""
    out = tmp_path_factory.mktemp("mini_scenario")
    generate_scenario(CitySpec(seed=2, height=32, width=32), 3, 2, out)
    return out


@pytest.fixture(scope="session")
def mini_data(mini_scenario_dir):
    return load_scenario(mini_scenario_dir, train_stride=24, val_stride=24, test_stride=12)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one verdict line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        verdict = "PASS" if passed else "FAIL"
        request.config._acceptance_lines.append((number, f"[{verdict}] criterion {number}: {detail}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
