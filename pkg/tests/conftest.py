import numpy as np
import pytest

from dndf.synthetic import gaussian_blobs
from dndf.trainer import Dataset


def central_difference(f, params, step=1e-6):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of the
    arrays in ``params`` (a name -> array dict, perturbed in place)."""
    out = {}
    for name, v in params.items():
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            orig = v[idx]
            v[idx] = orig + step
            fp = f()
            v[idx] = orig - step
            fm = f()
            v[idx] = orig
            g[idx] = (fp - fm) / (2 * step)
        out[name] = g
    return out


def normwise_error(analytic, numeric):
    """max |a - n| / max |n| over the flattened gradient."""
    a = np.concatenate([np.ravel(analytic[k]) for k in sorted(numeric)])
    n = np.concatenate([np.ravel(numeric[k]) for k in sorted(numeric)])
    return np.abs(a - n).max() / max(np.abs(n).max(), 1e-300)


def blob_dataset(n, seed, spread=1.0):
    x, y = gaussian_blobs(n, seed, spread)
    return Dataset(x, y, ["a", "b", "c"])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
