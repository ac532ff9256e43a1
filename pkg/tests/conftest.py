from pathlib import Path

import pytest

from helpers import toy_config
from lindit.harness.commands import run


class TrainedRuns:
    """Train each (objective, seed) toy run once per session."""

    def __init__(self, root: Path):
        self.root, self.cache = root, {}

    def get(self, objective: str, seed: int) -> Path:
        key = (objective, seed)
        if key not in self.cache:
            out = self.root / f"{objective}_{seed}"
            run(toy_config(objective, seed, out))
            self.cache[key] = out
        return self.cache[key]


@pytest.fixture(scope="session")
def trained_runs(tmp_path_factory):
    return TrainedRuns(tmp_path_factory.mktemp("toy_runs"))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.user_properties.append(("criterion", marker.args))


def pytest_terminal_summary(terminalreporter):
    verdicts = {}
    for reports in terminalreporter.stats.values():
        for rep in reports:
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" not in props or rep.when == "teardown":
                continue
            n, title = props["criterion"]
            failed = rep.outcome != "passed"
            if rep.when == "call" or failed:
                status = "SKIP" if rep.outcome == "skipped" else "FAIL" if failed else "PASS"
                verdicts[n] = (status, title, props.get("detail", ""))
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        status, title, detail = verdicts[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title}" + (f" | {detail}" if detail else ""))
