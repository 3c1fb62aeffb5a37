from __future__ import annotations

import os
import sys
from pathlib import Path

import pytest

# Ensure "src" is importable when running pytest from the repo root.
ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if SRC.exists() and str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: CPU で数十分かかる受け入れテスト (GEOFORGE_RUN_SLOW=1 で実行)")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("GEOFORGE_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set GEOFORGE_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
