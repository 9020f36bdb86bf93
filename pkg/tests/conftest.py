import pytest

from sdcontrol import verify
from sdcontrol.reconstruction import build_reconstruction
from sdcontrol.spaces import build_spaces

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def smooth():
    return verify.default_octet()


@pytest.fixture(scope="session")
def coarse(smooth):
    """Coarsest mesh of the studies (two 2x2 squares) with spaces and Pi."""
    mesh = verify.make_mesh(smooth, 2, 0)
    spaces = build_spaces(mesh)
    return mesh, spaces, build_reconstruction(mesh, spaces)


@pytest.fixture(scope="session")
def fine(smooth):
    """One refinement of the coarsest mesh."""
    mesh = verify.make_mesh(smooth, 2, 1)
    spaces = build_spaces(mesh)
    return mesh, spaces, build_reconstruction(mesh, spaces)


@pytest.fixture(scope="session")
def smooth_data(smooth):
    return verify.derive_data(smooth)


@pytest.fixture
def report_criterion():
    def add(number, passed, detail):
        line = "criterion %d: %s  %s" % (number, "PASS" if passed else "FAIL", detail)
        ACCEPTANCE_LINES.append(line)
        print(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
