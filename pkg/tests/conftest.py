import numpy as np
import pytest

from plexsim.core import DeviceProfile, Membership


def make_membership(n, uplink=None, downlink=None, step=None, cities=1):
    """Uniform-profile membership helper; per-node overrides via lists."""
    nodes = [f"n{i:03d}" for i in range(n)]
    profiles = {}
    for i, nid in enumerate(nodes):
        profiles[nid] = DeviceProfile(
            uplink_bps=uplink[i] if isinstance(uplink, (list, tuple)) else (uplink or 1e6),
            downlink_bps=downlink[i] if isinstance(downlink, (list, tuple)) else (downlink or 1e6),
            sec_per_local_step=step[i] if isinstance(step, (list, tuple)) else (step or 0.1),
            city_index=i % cities,
        )
    return Membership(nodes, profiles)


@pytest.fixture
def small_membership():
    return make_membership(8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
