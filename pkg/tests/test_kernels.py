import numpy as np
import pytest

from htprior import hough, kernels

BACKENDS = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_scatter_matches_loop(backend, dtype, small_mask, rng):
    src = rng.normal(size=(7, 9, 3)).astype(dtype)
    src[src < 0] = 0
    R = small_mask.grid.n_rho
    out = kernels.vote_scatter(src, small_mask.bin_of, R, 0.5, backend=backend)
    expect = np.zeros((R, small_mask.grid.n_theta, 3))
    H, W, T = small_mask.bin_of.shape
    for y in range(H):
        for x in range(W):
            for t in range(T):
                expect[small_mask.bin_of[y, x, t], t] += src[y, x]
    assert out.dtype == dtype
    np.testing.assert_allclose(out, 0.5 * expect, atol=1e-6)


@pytest.mark.parametrize("backend", BACKENDS)
def test_gather_matches_loop(backend, small_mask, rng):
    R, T = small_mask.grid.n_rho, small_mask.grid.n_theta
    hmap = rng.normal(size=(R, T, 2)).astype(np.float32)
    out = kernels.vote_gather(hmap, small_mask.bin_of, 2.0, backend=backend)
    H, W, _ = small_mask.bin_of.shape
    expect = np.zeros((H, W, 2))
    for t in range(T):
        expect += hmap[small_mask.bin_of[:, :, t], t]
    np.testing.assert_allclose(out, 2.0 * expect, rtol=1e-5, atol=1e-5)


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled extension not built")
def test_backends_agree_on_exp_geometry(exp_mask, rng):
    img = (rng.uniform(size=(100, 100, 1)) < 0.1).astype(np.float32)
    a = kernels.vote_scatter(img, exp_mask.bin_of, 183, 1 / 100, backend="python")
    b = kernels.vote_scatter(img, exp_mask.bin_of, 183, 1 / 100, backend="cython")
    np.testing.assert_allclose(a, b, atol=1e-6)
    c = kernels.vote_gather(a, exp_mask.bin_of, 1 / 60, backend="python")
    d = kernels.vote_gather(a, exp_mask.bin_of, 1 / 60, backend="cython")
    np.testing.assert_allclose(c, d, atol=1e-6)


def test_unknown_backend_rejected(small_mask):
    with pytest.raises(ValueError):
        kernels.vote_gather(np.zeros((21, 12, 1), np.float32), small_mask.bin_of, 1.0, backend="fortran")


def test_env_forces_fallback():
    import os
    import subprocess
    import sys
    env = dict(os.environ, HTPRIOR_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import htprior; print(htprior.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
