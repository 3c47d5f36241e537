import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def pytest_addoption(parser):
    parser.addoption("--run-full", action="store_true", default=False,
                     help="run the hours-long 14,000-node experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "full: hours-long full-scale experiment tier")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-full"):
        return
    skip = pytest.mark.skip(reason="full tier; pass --run-full")
    for item in items:
        if "full" in item.keywords:
            item.add_marker(skip)
