import pytest

from jsynth.data import PhantomSpec, generate_phantom


@pytest.fixture(scope="session")
def phantom_small():
    return generate_phantom(PhantomSpec(seed=3, n_subjects=4, slices=2, size=(16, 16), lesion_radius=(1.0, 2.0)))


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
