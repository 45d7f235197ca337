import warnings

import pytest

from rgal.experiments import toy_teacher as _toy_teacher


@pytest.fixture(scope="session")
def toy_teacher():
    """(teacher, held-out test set, accuracy) for seed 0, trained once per session."""
    return _toy_teacher(0)


@pytest.fixture(autouse=True)
def _quiet_triplet_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="no valid triplets", category=RuntimeWarning)
        yield
