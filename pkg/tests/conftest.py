import pytest

from srnkit.anchors import PyramidConfig, generate_pyramid_anchors


@pytest.fixture(scope="session")
def anchors_1024():
    return generate_pyramid_anchors()


@pytest.fixture(scope="session")
def anchors_256():
    return generate_pyramid_anchors(PyramidConfig(input_width=256, input_height=256))


# one line per acceptance criterion, echoed again at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
