"""Prompt-bank synthesis, low-rank domain experts on a small conditional
denoiser, factor-wise expert merging, and distribution-trust metrics."""

from hers.linalg import GaussianStats, SeededRng, gaussian_fit, matmul, mvn_sample, sqrtm_psd, sym_eig

__all__ = [
    "GaussianStats",
    "SeededRng",
    "gaussian_fit",
    "matmul",
    "mvn_sample",
    "sqrtm_psd",
    "sym_eig",
]

__version__ = "0.1.0"
