import pytest

from fluoronav.phantom import PhantomSpec, carm_pose, default_intrinsics, make_scene


@pytest.fixture(scope="session")
def k():
    return default_intrinsics()


@pytest.fixture(scope="session")
def spec():
    return PhantomSpec()


@pytest.fixture(scope="session")
def ap_scene(spec, k):
    return make_scene(spec, carm_pose(0.0, 0.0), k)


@pytest.fixture(scope="session")
def lao20_scene(spec, k):
    return make_scene(spec, carm_pose(20.0, 0.0), k, seed=3)


def pytest_terminal_summary(terminalreporter):
    from _support import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
