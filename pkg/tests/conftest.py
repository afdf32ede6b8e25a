import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import toy_cache  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not toy_cache.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(toy_cache.ACCEPTANCE):
        ok, line = toy_cache.ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {line}")
