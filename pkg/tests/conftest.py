import numpy as np
import pytest

from adapter_fusion.model import AdapterLayout, TaskHead, init_adapter, init_backbone


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_backbone():
    return init_backbone(6, 8, 2, np.random.default_rng(7)).freeze()


@pytest.fixture
def small_problem(small_backbone):
    """Backbone, non-trivial adapter, head and a 10-sample, 3-class dataset."""
    rng = np.random.default_rng(99)
    layout = AdapterLayout(small_backbone.d, 2, small_backbone.n_layers)
    theta = init_adapter(layout, rng)
    theta = theta.like(theta.data + 0.3 * rng.standard_normal(layout.size))
    head = TaskHead.init(small_backbone.d, 3, rng)
    x = rng.standard_normal((10, small_backbone.d_in))
    y = rng.integers(0, 3, size=10)
    return small_backbone, theta, head, x, y


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
