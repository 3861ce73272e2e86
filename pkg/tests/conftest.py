import json
from pathlib import Path

import numpy as np
import pytest

from vitreforge.hier import surgery
from vitreforge.plain import PlainVitModel
from vitreforge.synthetic import make_nano, make_vit_b

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def nano():
    return make_nano(seed=0)


@pytest.fixture(scope="session")
def nano_plain(nano):
    return PlainVitModel(nano)


@pytest.fixture
def nano_hier(nano):
    return surgery(nano)


@pytest.fixture(scope="session")
def vit_b():
    return make_vit_b(seed=0)


@pytest.fixture(scope="session")
def golden():
    return json.loads((FIXTURES / "golden.json").read_text())


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one ``ACCEPTANCE <n> PASS|FAIL`` line; the test body must call ``done``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    class Recorder:
        def __init__(self):
            self.number = None

        def done(self, number, passed, detail):
            self.number = number
            line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'} {detail}"
            lines.append(line)
            print(line)
            assert passed, line

    rec = Recorder()
    yield rec
    if rec.number is None:
        name = request.node.name
        lines.append(f"ACCEPTANCE {name} FAIL (raised before reporting)")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: l.split()[1].zfill(3)):
            terminalreporter.write_line(line)
