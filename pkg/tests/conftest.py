import numpy as np
import pytest

from patchbmi.data import Sample, prepare
from patchbmi.ensemble import EnsembleModel
from patchbmi.landmarks import REGIONS
from patchbmi.model import ModelConfig, PatchModelParams
from patchbmi.synthetic import make_face


def make_samples(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        bmi = float(rng.uniform(18, 45))
        img, lm = make_face(bmi, rng)
        img, lm = prepare(img, lm)
        out.append(Sample(img, lm, bmi, f"face{i}"))
    return out


@pytest.fixture(scope="session")
def samples():
    return make_samples(8, seed=0)


def stub_head(value: float, config: ModelConfig = ModelConfig()) -> PatchModelParams:
    """A head that outputs ``value`` for every input: relu(fc1_b[0]) * fc2_w[0, 0]."""
    arrays = {n: np.zeros(s, np.float32) for n, s in config.param_shapes().items()}
    arrays["fc1_b"][0] = 1.0
    arrays["fc2_w"][0, 0] = value
    return PatchModelParams.from_arrays(arrays)


def stub_ensemble(values, **kwargs) -> EnsembleModel:
    assert len(values) == len(REGIONS)
    return EnsembleModel([stub_head(v) for v in values], **kwargs)


def overfit_data(n=32, seed=42):
    """Patches whose mean intensity encodes the target: y = 20 + 15 u."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(0, 1, n)
    texture = rng.uniform(-0.1, 0.1, (n, 1, 32, 32))
    X = np.clip(u[:, None, None, None] * 0.8 + 0.1 + texture, 0, 1)
    X = np.repeat(X, 3, axis=1).astype(np.float32)
    y = (20 + 15 * u).astype(np.float32)
    return X, y
