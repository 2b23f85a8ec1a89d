import numpy as np
import pytest

from staininvariant.stain_estimation import canonical_stain_order, reference_stain_matrix
from staininvariant.synthetic import (
    SOURCE_HE,
    TARGET_HE,
    ClassPrototype,
    SyntheticDomainSpec,
    render_synthetic,
)

# Mostly single-stain pixels: concentrations clamped around zero.
SPARSE = (ClassPrototype("sparse", (0.0, 0.0), noise=0.8, smoothing=0.8),)


@pytest.fixture(scope="session")
def known_matrices():
    return [SOURCE_HE, TARGET_HE, reference_stain_matrix()]


@pytest.fixture(scope="session")
def sparse_tile():
    spec = SyntheticDomainSpec(reference_stain_matrix(), SPARSE, n_per_class=1, side=64, seed=7)
    return render_synthetic(spec).images[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_stains(rng) -> "object":
    """A random but plausible H&E-like stain matrix."""
    while True:
        w = rng.uniform(0.05, 1.0, size=(3, 2))
        w /= np.linalg.norm(w, axis=0)
        cos = float(w[:, 0] @ w[:, 1])
        if cos < 0.9 and abs(w[0, 0] - w[0, 1]) > 1e-3:
            return canonical_stain_order(w)
