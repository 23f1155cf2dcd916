import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

FIXTURES = Path(__file__).parent / "fixtures"

# desk-scale training settings used wherever a test trains on a synthetic task
DESK = {"learning_rate": 0.1, "frame_width": 2, "tau": 0.05}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_task():
    from dvp.synth import SynthSpec, generate_task

    spec = SynthSpec(num_classes=3, samples_per_class=6, val_per_class=4, test_per_class=10,
                     embed_dim=12, hidden=12, seed=3)
    return generate_task(spec)


@pytest.fixture(scope="session")
def task_dir(tmp_path_factory, small_task):
    from dvp.synth import save_task

    return save_task(small_task, tmp_path_factory.mktemp("task"))


def desc_set(class_ids, causes=None, dim=3, seed=0):
    """Description set with random embeddings for the given class ids."""
    from dvp.descriptions import Description, DescriptionSet

    r = np.random.default_rng(seed)
    causes = causes or [None] * len(class_ids)
    return DescriptionSet([Description(f"a{i}", int(c), r.standard_normal(dim) + 0.1, k)
                           for i, (c, k) in enumerate(zip(class_ids, causes))])
