import json
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pvhc.cli import main  # noqa: E402

SEED = 2024
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


class PipelineRun:
    def __init__(self, out: Path, seconds: float):
        self.out = out
        self.seconds = seconds

    def json(self, name):
        return json.loads((self.out / name).read_text())

    @property
    def report(self):
        return self.json("hc_report.json")

    @property
    def models(self):
        return self.json("models.json")

    def results(self, method, bound=None):
        return [
            r for r in self.report["results"]
            if r["method"] == method and (bound is None or r.get("bound") == bound)
        ]

    def hc(self, method, bound=None, **params):
        for r in self.results(method, bound):
            if all(r["parameters"].get(k) == v for k, v in params.items()):
                return r["hc"]
        raise KeyError((method, bound, params))


def run_pipeline(out: Path, *overrides: str) -> PipelineRun:
    argv = ["pipeline", "--seed", str(SEED), "--out", str(out), "-q"]
    for o in overrides:
        argv += ["--set", o]
    t0 = time.perf_counter()
    code = main(argv)
    elapsed = time.perf_counter() - t0
    assert code == 0, f"pipeline exited with {code}"
    return PipelineRun(out, elapsed)


@pytest.fixture(scope="session")
def run_none(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("none"))


@pytest.fixture(scope="session")
def run_volt_var(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("vv"), 'control.mode="volt_var"')


@pytest.fixture(scope="session")
def run_power_factor(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("pf"), 'control.mode="power_factor"')
