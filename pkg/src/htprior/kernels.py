"""Backend selection for the vote kernels.

The compiled extension is used when it imports; set ``HTPRIOR_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

import numpy as np

from htprior import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("HTPRIOR_PURE_PYTHON") != "1":
    try:
        from htprior import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass


def _prep(a):
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float32)
    return np.ascontiguousarray(a)


def vote_scatter(src, bin_of, n_rho, scale, backend=None):
    """Scatter pixel values of ``src`` [H,W,C] into a [n_rho, n_theta, C] map."""
    impl = _backend(backend)
    return impl.vote_scatter(_prep(src), bin_of, int(n_rho), float(scale))


def vote_gather(hmap, bin_of, scale, backend=None):
    """Gather, for every pixel, the sum of the bins it votes into."""
    impl = _backend(backend)
    return impl.vote_gather(_prep(hmap), bin_of, float(scale))


def _backend(name):
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        from htprior import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
