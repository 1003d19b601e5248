import numpy as np
import pytest

from lbcf.dgb import AllocationProblem

# Six users, two treatments, unit and double costs; budget 6.
TOY_THETA = np.array([[20, 30], [15, 36], [15, 32], [4, 2], [3, 6], [2, 2]], dtype=float)
TOY_COST = np.array([[1.0, 2.0]] * 6)
TOY_BUDGET = 6.0


@pytest.fixture
def toy_problem():
    return AllocationProblem(TOY_THETA, TOY_COST, TOY_BUDGET)


def random_rct(rng, n=200, K=3, d=4, probs=None):
    """Small random RCT arrays with every arm guaranteed non-empty."""
    X = rng.normal(size=(n, d))
    t = rng.choice(K + 1, size=n, p=probs)
    t[: K + 1] = np.arange(K + 1)
    y = X[:, 0] + t * (X[:, 1] > 0) + rng.normal(scale=0.5, size=n)
    return X, t, y
