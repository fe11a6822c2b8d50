import numpy as np
import pytest

from reachguard import dynamics as D
from reachguard import hj_grid as H
from reachguard.track import SplineTrack


@pytest.fixture(scope="session")
def di_grid():
    m = D.double_integrator()
    spec = H.default_spec("di")
    V, res = H.solve(spec, m, H.default_l("di"), H.make_control_mesh(m, 21), 0.05, 0.9999,
                     tol=1e-8, max_iters=3000, scheme="rk4")
    return V, res


@pytest.fixture(scope="session")
def small_track():
    th = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    return SplineTrack(np.column_stack([120 * np.cos(th), 60 * np.sin(th)]), 10.0)


@pytest.fixture(scope="session")
def small_segments(small_track):
    return H.segment_solve(small_track, D.bike(), h_xy=2.0, n_v=4, n_phi=16, max_iters=80, tol=1e-4)


@pytest.fixture(scope="session")
def stadium():
    return SplineTrack.default()


@pytest.fixture(scope="session")
def stadium_segments(request, stadium):
    """Default-resolution tubes for the built-in track, cached between runs."""
    cache = request.config.cache.mkdir("reachguard_stadium_v2")
    model = D.bike()
    if (cache / "segments.json").exists():
        try:
            return H.SegmentedValue.load(cache, stadium, model)
        except H.GridFormatError:
            pass
    sv = H.segment_solve(stadium, model)
    sv.save(cache)
    return sv


# -- acceptance report ------------------------------------------------------------

def pytest_configure(config):
    config._criteria = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        measured = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
        item.config._criteria.append((marker.args[0], marker.args[1], rep.passed, measured))


def pytest_terminal_summary(terminalreporter, config):
    rows = getattr(config, "_criteria", [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, passed, measured in sorted(rows, key=lambda r: r[0]):
        line = f"criterion {num}: {'PASS' if passed else 'FAIL'}  {title}"
        if measured:
            line += f"  [{measured}]"
        terminalreporter.write_line(line)
