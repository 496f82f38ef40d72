"""Spline error weighting: predicted spline-fit residuals, knot spacing and IMU weights.

The frequency response ``H`` of least-squares cubic spline fitting is measured
numerically: every DFT basis signal is fitted with a spline at the requested
knot spacing and ``H`` is the fraction of it that survives the fit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse

from .splines import BASIS, _powers

log = logging.getLogger(__name__)

N_CANDIDATES = 64
DEFAULT_QUALITY = 0.99
_BIN_CHUNK = 512


class DegenerateSignalError(ValueError):
    pass


def fit_design(n, sample_rate, dt):
    """Sparse B-spline design matrix for ``n`` samples and knot count ``K``.

    The first control point sits at ``-dt`` so the spline support starts at
    the first sample.
    """
    t = np.arange(n) / sample_rate
    # segments cover [0, t_last]; the final sample may sit at u = 1
    count = max(int(np.ceil(t[-1] / dt - 1e-9)), 1) + 3
    s = t / dt
    seg = np.minimum(np.floor(s).astype(int), count - 4)
    u = s - seg
    w = _powers(u)[0] @ BASIS.T
    rows = np.repeat(np.arange(n), 4)
    cols = (seg[:, None] + np.arange(4)).ravel()
    return scipy.sparse.csr_matrix((w.ravel(), (rows, cols)), shape=(n, count))


def _banded_gram(B):
    """Gram matrix ``B^T B`` in upper banded storage for ``solveh_banded``."""
    G = (B.T @ B).toarray()
    k = G.shape[0]
    ab = np.zeros((4, k))
    for d in range(4):
        ab[3 - d, d:] = np.diagonal(G, d)
    return ab


def spline_fit(signal, sample_rate, dt):
    """Least-squares spline fit of ``signal`` (N,) or (N, d); returns the fitted samples."""
    x = np.asarray(signal, dtype=float)
    B = fit_design(len(x), sample_rate, dt)
    coef = scipy.linalg.solveh_banded(_banded_gram(B), B.T @ x)
    return B @ coef


@lru_cache(maxsize=512)
def _response_cached(dt, sample_rate, n):
    B = fit_design(n, sample_rate, dt)
    ab = _banded_gram(B)
    Bt = B.T.tocsr()
    m = n // 2 + 1
    H = np.empty(m)
    k = np.arange(n)
    for start in range(0, m, _BIN_CHUNK):
        bins = np.arange(start, min(m, start + _BIN_CHUNK))
        X = np.exp(2j * np.pi * np.outer(k, bins) / n)
        BtX = Bt @ X
        C = scipy.linalg.solveh_banded(ab, BtX)
        H[bins] = np.real(np.sum(np.conj(BtX) * C, axis=0)) / n
    full = np.empty(n)
    full[:m] = H
    full[m:] = H[1:n - m + 1][::-1]
    full.setflags(write=False)
    return full


def frequency_response(dt, sample_rate, n):
    """Per-bin gain of spline fitting for an ``n``-sample window (full FFT ordering)."""
    if n < 64:
        raise ValueError("need at least 64 samples")
    if dt < 2.0 / sample_rate * (1 - 1e-9):
        raise ValueError("knot spacing below two samples")
    if (n - 1) / sample_rate / dt < 1.0:
        raise ValueError("degenerate grid: fewer than 4 knots across the window")
    return _response_cached(round(float(dt), 15), float(sample_rate), int(n))


def _spectrum(signal):
    x = np.asarray(signal, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.fft.fft(x, axis=0) / np.sqrt(len(x))


@dataclass
class SewAnalysis:
    n: int
    sample_rate: float
    dt: float
    spectrum: np.ndarray = field(repr=False)
    response: np.ndarray = field(repr=False)
    sigma_n: float
    sigma_e: float
    sigma_f: float
    sigma_r: float
    quality: float


def analyze(signal, dt, sigma_n, sample_rate) -> SewAnalysis:
    X = _spectrum(signal)
    n, d = X.shape
    H = frequency_response(dt, sample_rate, n)
    energy = float(np.sum(np.abs(X) ** 2))
    kept = float(np.sum(np.abs(H[:, None] * X) ** 2))
    # per-component variances: energies summed over axes, averaged per axis
    var_e = float(np.sum(np.abs((1.0 - H)[:, None] * X) ** 2)) / (n * d)
    var_f = sigma_n ** 2 * float(np.sum(H ** 2)) / n
    q = kept / energy if energy > 0 else float("nan")
    return SewAnalysis(n, sample_rate, dt, X, H, sigma_n,
                       np.sqrt(var_e), np.sqrt(var_f), np.sqrt(var_e + var_f), q)


def predict_residual_std(signal, dt, sigma_n, sample_rate):
    """Predicted ``(sigma_e, sigma_f, sigma_r)`` for a spline fit at knot spacing ``dt``."""
    a = analyze(signal, dt, sigma_n, sample_rate)
    return a.sigma_e, a.sigma_f, a.sigma_r


def quality(signal, dt, sample_rate):
    """Fraction of signal energy retained by a spline fit at knot spacing ``dt``."""
    X = _spectrum(signal)
    energy = float(np.sum(np.abs(X) ** 2))
    if energy <= 0.0:
        raise DegenerateSignalError("degenerate signal")
    H = frequency_response(dt, sample_rate, X.shape[0])
    return float(np.sum(np.abs(H[:, None] * X) ** 2)) / energy


def candidate_spacings(n, sample_rate, count=N_CANDIDATES):
    lo = 2.0 / sample_rate
    hi = n / sample_rate / 8.0
    if hi <= lo:
        raise ValueError("signal too short for a knot-spacing search")
    return np.geomspace(lo, hi, count)


@dataclass
class KnotSelection:
    dt: float
    quality: float
    satisfied: bool


def select_knot_spacing(signal, q_hat=DEFAULT_QUALITY, sample_rate=1.0) -> KnotSelection:
    """Largest candidate knot spacing whose quality is at least ``q_hat``."""
    if not 0.0 < q_hat < 1.0:
        raise ValueError("quality target must lie in (0, 1)")
    X = _spectrum(signal)
    n = X.shape[0]
    energy = float(np.sum(np.abs(X) ** 2))
    if energy <= 0.0:
        raise DegenerateSignalError("degenerate signal")
    power = np.sum(np.abs(X) ** 2, axis=1)
    cands = candidate_spacings(n, sample_rate)
    for dt in cands[::-1]:
        H = frequency_response(dt, sample_rate, n)
        q = float(np.sum(H ** 2 * power)) / energy
        if q >= q_hat:
            return KnotSelection(float(dt), q, True)
    log.warning("no knot spacing reaches quality %.4f; using the smallest candidate", q_hat)
    return KnotSelection(float(cands[0]), q, False)


@dataclass
class SewResult:
    dt: float
    dt_so3: float
    dt_r3: float
    W_g: np.ndarray
    W_a: np.ndarray
    sigma_r_gyro: float
    sigma_r_accel: float
    satisfied: bool


def compute_weights(gyro, accel, sigma_n_gyro, sigma_n_accel, q_hat=DEFAULT_QUALITY,
                    sample_rate=1.0) -> SewResult:
    """Shared knot spacing (min over modalities) and IMU residual weights."""
    sel_g = select_knot_spacing(gyro, q_hat, sample_rate)
    sel_a = select_knot_spacing(accel, q_hat, sample_rate)
    dt = min(sel_g.dt, sel_a.dt)
    sr_g = predict_residual_std(gyro, dt, sigma_n_gyro, sample_rate)[2]
    sr_a = predict_residual_std(accel, dt, sigma_n_accel, sample_rate)[2]
    # guard against exactly zero variance on noise-free constant signals
    tiny = 1e-9
    sr_g = max(sr_g, tiny)
    sr_a = max(sr_a, tiny)
    return SewResult(dt, sel_g.dt, sel_a.dt, np.eye(3) / sr_g ** 2, np.eye(3) / sr_a ** 2,
                     sr_g, sr_a, sel_g.satisfied and sel_a.satisfied)
