import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_label_map(rng, h, w, require_target=True, require_background=True):
    """Random ternary map with the requested regions guaranteed non-empty."""
    labels = rng.integers(0, 3, size=(h, w)).astype(np.uint8)
    if require_target and not (labels == 0).any():
        labels[rng.integers(h), rng.integers(w)] = 0
    if require_background and not (labels == 2).any():
        labels[rng.integers(h), rng.integers(w)] = 2
    return labels
