"""Shared synthetic-data helpers for the test suite."""

import numpy as np
import pandas as pd
import pytest

from spwarp.basis import build_kernel_proximity, extract_basis


def make_basis(n=100, seed=0, box=10.0):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, box, size=(n, 2))
    prox = build_kernel_proximity(coords)
    return coords, prox, extract_basis(prox)


def spatial_field(basis, seed=1, scale=1.0, decay=1.0):
    """Draw one realization of an eigenvector-based spatial process."""
    rng = np.random.default_rng(seed)
    lam = basis.eigenvalues
    gamma = rng.normal(0, 1, basis.n_components) * np.sqrt((lam / lam[0]) ** decay)
    return scale * (basis.vectors @ gamma)


@pytest.fixture(scope="session")
def gaussian_spatial_data():
    """Gaussian response with spatial structure and one covariate."""
    coords, prox, basis = make_basis(n=120, seed=42)
    rng = np.random.default_rng(7)
    x1 = rng.normal(0, 1, 120)
    w = spatial_field(basis, seed=8, scale=1.5)
    y = 2.0 + 1.5 * x1 + w + rng.normal(0, 0.5, 120)
    data = pd.DataFrame({"y": y, "x1": x1})
    return {"coords": coords, "basis": basis, "data": data}


def skew_t_sample(n=5000, nu=4, alpha=3, seed=1):
    """Azzalini-type skew-t draws: skew-normal over sqrt(chi2/nu)."""
    from scipy import stats
    sn = stats.skewnorm.rvs(alpha, size=n, random_state=np.random.RandomState(seed))
    w = stats.chi2.rvs(nu, size=n, random_state=np.random.RandomState(seed + 1))
    return sn / np.sqrt(w / nu)


def gaussian_mixture_sample(n=5000, seed=3):
    from scipy import stats
    half = n // 2
    a = stats.norm.rvs(-1.25, 1.0, size=half, random_state=np.random.RandomState(seed))
    b = stats.norm.rvs(1.25, 0.75, size=n - half,
                       random_state=np.random.RandomState(seed + 1))
    return np.concatenate([a, b])
