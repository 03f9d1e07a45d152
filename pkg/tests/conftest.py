import numpy as np
import pytest

from treeguide.models import ObservationModel, linear_gaussian_ar_kernel
from treeguide.tree import EdgeDynamics, balanced_tree


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, d, scale=1.0, cond=10.0):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eig = scale * np.exp(rng.uniform(0.0, np.log(cond), size=d))
    return (q * eig) @ q.T


@pytest.fixture
def linear22():
    """Balanced (2,2) discrete tree with an AR kernel and random leaf data."""
    d = 2
    rng = np.random.default_rng(3)
    tree = balanced_tree(2, 2, EdgeDynamics.discrete(), np.array([0.3, -0.2]))
    tree = tree.with_observations({l: rng.standard_normal(d) for l in tree.leaves})
    kernel = linear_gaussian_ar_kernel(0.4, d)
    obs = ObservationModel.isotropic(0.1, d)
    return tree, kernel, obs
