import numpy as np
import pytest
from hypothesis import settings

from quadtrack import data_io as dio
from quadtrack import embed_net as en

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_net():
    return en.init_params(en.DESK_SPECS, 0)


@pytest.fixture(scope="session")
def small_spec():
    return dio.SynthSpec(num_sequences=3, frames_per_sequence=6, image_size=96, target_min=14, target_max=20)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return [dio.in_memory_sequence(f"s{i}", *dio.render_sequence(small_spec, 0, i)) for i in range(3)]


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, passed, detail)``."""
    lines = request.config.stash[ACCEPTANCE]

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
