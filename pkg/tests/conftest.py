import os

import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains a model; runs only with DYNFLOW_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.getenv("DYNFLOW_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set DYNFLOW_RUN_SLOW=1 to run trained-model checks")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
