import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from deblurlab.synth import SynthSpec, generate  # noqa: E402


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Two 10-frame sequences of 32x32 frames; returns the split directory."""
    root = tmp_path_factory.mktemp("synth")
    return generate(root, SynthSpec(sequences=2, frames=10, height=32, width=32, subframes=3, seed=0))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
