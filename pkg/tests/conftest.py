import sys
from pathlib import Path

# make acceptance_configs importable when pytest is invoked from anywhere
sys.path.insert(0, str(Path(__file__).resolve().parent))


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance: full acceptance criteria (trains real models)")
