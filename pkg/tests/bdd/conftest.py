import json
import os
import shutil
import tempfile
import time
from pathlib import Path
from typing import Callable, Generator

import pytest
from pytest_bdd import given, parsers, then

from diffdf.cli import RUN_FILE, main
from diffdf.reporting import report

# Set DESK_SCALE=1 (or pass --desk-scale) to run the minutes-long experiments.
DESK_SCALE = os.environ.get("DESK_SCALE", "0") == "1"

# Set KEEP_TMP=1 to preserve the session temp directory after the run.
KEEP_TMP = os.environ.get("KEEP_TMP", "0") == "1"

_ENV_PREFIXES = ("DIFFDF_", "DIFFDF__")


# ── Collection-time helpers ───────────────────────────────────────────────────


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--desk-scale",
        action="store_true",
        default=False,
        help="Run the desk-scale training experiments (same as DESK_SCALE=1).",
    )
    parser.addoption(
        "--artifacts-dir",
        action="store",
        default=None,
        metavar="PATH",
        help="Directory for run outputs (defaults to a temp directory).",
    )


def pytest_collection_modifyitems(
    config: pytest.Config, items: list[pytest.Item]
) -> None:
    """Skip desk-scale scenarios unless they were asked for."""
    if DESK_SCALE or config.getoption("desk_scale", default=False):
        return
    skip = pytest.mark.skip(reason="desk-scale experiment; set DESK_SCALE=1")
    for item in items:
        if item.get_closest_marker("desk_scale") or item.get_closest_marker(
            "desk-scale"
        ):
            item.add_marker(skip)


# ── Session fixtures ─────────────────────────────────────────────────────────


@pytest.fixture(scope="session")
def session_tmp_dir(pytestconfig: pytest.Config) -> Generator[Path, None, None]:
    """Session-scoped directory for command run outputs.

    Deleted automatically at session end unless ``KEEP_TMP=1`` is set.
    """
    artifacts_dir_opt = pytestconfig.getoption("artifacts_dir", default=None)
    if artifacts_dir_opt:
        artifacts_dir = Path(artifacts_dir_opt).expanduser().resolve()
        artifacts_dir.mkdir(parents=True, exist_ok=True)
        yield artifacts_dir
        return

    tmp = Path(tempfile.mkdtemp(prefix="diffdf-acceptance-"))
    try:
        yield tmp
    finally:
        if KEEP_TMP:
            print(f"\nSession tmp dir preserved: {tmp}", flush=True)
        else:
            shutil.rmtree(tmp, ignore_errors=True)


@pytest.fixture(scope="session")
def run_cli() -> Callable[..., dict]:
    """Run one ``diffdf`` command in-process and return its ``run.json``.

    ``DIFFDF_*`` variables from the calling shell are hidden so scenarios
    only see the configuration they pass explicitly.
    """

    def _run(*argv: str, out: Path, expect: int = 0) -> dict:
        saved = {k: v for k, v in os.environ.items() if k.startswith(_ENV_PREFIXES)}
        for key in saved:
            del os.environ[key]
        try:
            with report.step(f"diffdf {argv[0]}"):
                code = main([*argv, "--out", str(out)])
        finally:
            os.environ.update(saved)
        run = json.loads((Path(out) / RUN_FILE).read_text())
        assert code == expect, f"diffdf {argv[0]} exited {code}: {run['error']}"
        return run

    return _run


# ── Shared step definitions ───────────────────────────────────────────────────


@pytest.fixture
def context() -> dict:
    """Mutable container shared by the steps of one scenario."""
    return {}


@given(parsers.parse("the seed {seed:d}"), target_fixture="seed")
def fixed_seed(seed: int) -> int:
    report.note(f"seed {seed}")
    return seed


@pytest.fixture
def timer(context: dict) -> Callable[[], None]:
    """Start the clock read by 'it finishes in under N seconds'."""

    def _start() -> None:
        context["started"] = time.perf_counter()

    _start()
    return _start


@then(parsers.parse("it finishes in under {seconds:d} seconds"))
def finishes_within(context: dict, seconds: int) -> None:
    elapsed = time.perf_counter() - context["started"]
    report.note(f"elapsed {elapsed:.1f}s")
    assert elapsed < seconds, f"took {elapsed:.1f}s, budget {seconds}s"
