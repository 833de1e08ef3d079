import pytest

from somnoscore.model import ModelConfig
from somnoscore.store import SplitSpec, patient_split
from somnoscore.synth import synth_generate


@pytest.fixture(scope="session")
def tiny_config():
    """Smallest architecture that still exercises every code path."""
    return ModelConfig(model_dim=8, head_dim=8, heads=2, blocks=2,
                       mlp_hidden=16, feature_dim=8)


@pytest.fixture(scope="session")
def small_store():
    """60 balanced synthetic epochs over 20 patients, split by patient."""
    store = synth_generate(12, seed=2024)
    assignment = patient_split(store.patients(), SplitSpec(seed=2024))
    return store.with_splits(assignment)
