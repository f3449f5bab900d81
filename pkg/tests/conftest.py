import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gpusched.workload import load_workload  # noqa: E402

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def tiny_yaml(chains: str, duration: float = 0.05, cores: int = 8, sync_us=(50, 50), alpha: float = 0.0,
              f_tight: float = 0.0) -> str:
    """A hand-sized workload: no jitter, fixed sync cost, no contention."""
    return f"""
seed: 0
duration: {duration}
jitter_ms: 0
factors: {{f_a: 1.0, f_d: 1.0, f_tight: {f_tight}}}
device: {{cpu_cores: {cores}, sync_cost_us: [{sync_us[0]}, {sync_us[1]}], contention_alpha: {alpha}}}
chains:
{chains}
"""


ONE_KERNEL_CHAIN = """
  - id: 0
    period_ms: 100
    deadline_ms: 100
    tasks:
      - cpu_ms: [1, 1]
        kernels:
          - {id: 0, grid: 4, block: 256, exec_us: 2000, util: 0.5}
"""


@pytest.fixture
def one_kernel_config():
    return load_workload(tiny_yaml(ONE_KERNEL_CHAIN))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
