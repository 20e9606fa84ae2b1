"""Numpy implementations of the vote kernels, used when the extension is absent."""
import numpy as np


def vote_scatter(src, bin_of, n_rho, scale):
    H, W, C = src.shape
    T = bin_of.shape[2]
    flat = (bin_of.astype(np.intp) * T + np.arange(T)).reshape(-1)
    out = np.empty((n_rho * T, C), dtype=src.dtype)
    for c in range(C):
        weights = np.repeat(src[:, :, c].reshape(-1), T)
        out[:, c] = np.bincount(flat, weights=weights, minlength=n_rho * T)
    out *= src.dtype.type(scale)
    return out.reshape(n_rho, T, C)


def vote_gather(hmap, bin_of, scale):
    R, T, C = hmap.shape
    H, W, _ = bin_of.shape
    flat = (bin_of.astype(np.intp) * T + np.arange(T)).reshape(-1)
    picked = hmap.reshape(R * T, C)[flat].reshape(H, W, T, C)
    return picked.sum(axis=2) * hmap.dtype.type(scale)
