import numpy as np
import pytest

from lucenet.data import SampleImage


@pytest.fixture(scope="session")
def pretext_checkpoint(tmp_path_factory):
    """Backbone checkpoint from a default-settings pretext run (shared: slow)."""
    from lucenet.model import DenseNetConfig
    from lucenet.train import PretextConfig, pretext_pretrain

    path = tmp_path_factory.mktemp("pretext") / "pretext.ckpt"
    _, accuracy = pretext_pretrain(DenseNetConfig(), PretextConfig(seed=0), path)
    return path, accuracy


def toy_separable_set(n=20, size=16, seed=0):
    """Linearly separable brightness toy set at the tiny test resolution."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        loose = i % 2 == 0
        base = 0.75 if loose else 0.25
        pixels = np.clip(base + 0.05 * rng.standard_normal((size, size)), 0, 1)
        samples.append(SampleImage(pixels.astype(np.float32),
                                   "loose" if loose else "well_fixed",
                                   f"toy_{i:02d}"))
    return samples
