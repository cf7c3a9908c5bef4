import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def both_backends():
    """Yield a callable running ``fn`` under each backend; restores numba afterwards."""
    from shehit import _backend

    def run(fn):
        out = {}
        for name in ("numpy", "numba"):
            if name == "numba" and not _backend.HAVE_NUMBA:
                continue
            _backend.set_backend(name)
            out[name] = fn()
        return out

    prev = _backend.backend()
    yield run
    _backend.set_backend(prev)
