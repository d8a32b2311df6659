import numpy as np
import pytest

import mbirnet as mn


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def deblur_problem():
    """Convex 32x32 deblurring: mild normalized kernel, light noise, box set."""
    n = 32
    truth = mn.shepp_logan(n)
    op = mn.build_blur(mn.binomial_kernel(0.3), (n, n))
    noise_rng = np.random.default_rng(7)
    y = op.forward(truth.data) + 0.01 * noise_rng.standard_normal(n * n)
    datafit = mn.QuadraticDataFit(op, np.ones(n * n), y)
    feasible = mn.FeasibleSet.box(0.0, 1.0)
    x0 = mn.ImageVector(np.zeros(n * n), (n, n))
    return {"n": n, "truth": truth, "datafit": datafit, "feasible": feasible, "x0": x0}


@pytest.fixture(scope="session")
def tf_bank4():
    return mn.make_tf_filterbank(4)
