import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ci", derandomize=True, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


def pytest_collection_modifyitems(config, items):
    if os.environ.get("KBTSC_LIVE") == "1":
        return
    skip = pytest.mark.skip(reason="live endpoint test; set KBTSC_LIVE=1 to run")
    for item in items:
        if "live" in item.keywords:
            item.add_marker(skip)
