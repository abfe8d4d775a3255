import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sglosa import _fallback, backend
from sglosa.model import SCENARIOS

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

try:
    from sglosa import _core
except ImportError:  # extension not built
    _core = None

KERNELS = [pytest.param(_fallback, id="python")]
if _core is not None:
    KERNELS.insert(0, pytest.param(_core, id="compiled"))

needs_compiled = pytest.mark.skipif(_core is None, reason="compiled extension not built")


@pytest.fixture(params=KERNELS)
def kernels(request):
    return request.param


@pytest.fixture(params=[1, 2, 3], ids=lambda i: f"scenario{i}")
def scenario(request):
    return SCENARIOS[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
