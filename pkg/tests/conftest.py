import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from seamcap import simulator as sim

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_dataset():
    """Two subjects, four 60 s sessions each."""
    return sim.build_dataset(2, 4.0, sim.SplitSpec(4, 3, 1), seed=5)


@pytest.fixture(scope="session")
def small_windows(small_dataset):
    sp = small_dataset.splits(0)
    return {k: sim.stack_windows(v, hop=16) for k, v in sp.items()}


@pytest.fixture(scope="session")
def tiny_regressor(small_windows):
    from seamcap.estimator import SeamPoseRegressor

    tr = small_windows["independent_train"]
    return SeamPoseRegressor(hidden=8, embed=8, dec_hidden=16, epochs=1, batch_size=32,
                             random_state=0).fit(tr["X"], tr["pose"], tr["arm_length"])


@pytest.fixture
def rng():
    return np.random.default_rng(0)
