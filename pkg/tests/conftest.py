"""Shared fixtures: the shipped benchmark pipelines, run once per session.

Each pipeline fixture drives the command line exactly as a user would,
into a session-scoped temporary directory, and records per-stage wall
times for the acceptance budget checks.
"""

import time
from pathlib import Path

import pytest

from rbrom import cli


def preset_path(name):
    return Path(cli.__file__).parent / "presets" / f"{name}.json"


def run_cli(args):
    argv = [str(a) for a in args]
    code = cli.main(argv)
    assert code == 0, f"rbrom {' '.join(argv)} exited with {code}"


def run_pipeline(name, out):
    config = preset_path(name)
    stages = [
        ("fom", ["--threads", "4"]),
        ("pod", []),
        ("train", []),
        ("eval", ["--threads", "4", "--svg"]),
        ("baseline", ["--threads", "4", "--svg"]),
    ]
    timings = {}
    for stage, extra in stages:
        start = time.perf_counter()
        run_cli([stage, "--config", config, "--out", out, *extra])
        timings[stage] = time.perf_counter() - start
    return {"name": name, "config": config, "out": out, "timings": timings}


@pytest.fixture(scope="session")
def pipeline_1d(tmp_path_factory):
    return run_pipeline("advdiff1d", tmp_path_factory.mktemp("advdiff1d"))


@pytest.fixture(scope="session")
def pipeline_2d(tmp_path_factory):
    return run_pipeline("advdiff2d", tmp_path_factory.mktemp("advdiff2d"))


@pytest.fixture(scope="session")
def pipeline_na(tmp_path_factory):
    return run_pipeline("nonaffine2d", tmp_path_factory.mktemp("nonaffine2d"))
