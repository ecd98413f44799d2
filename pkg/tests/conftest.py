import os

import pytest
import torch

os.environ.setdefault("PROMPTCRAFT_DETERMINISTIC", "1")

from promptcraft import numerics as nx  # noqa: E402

nx.configure_determinism()


@pytest.fixture(autouse=True)
def _f32_default():
    nx.set_precision("f32")
    yield
    nx.set_precision("f32")


@pytest.fixture
def f64():
    with nx.precision("f64"):
        yield torch.float64


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
