"""Batched evaluation kernels for the model-fitting hot path.

The likelihood engine evaluates the PT log pmf for thousands of
(count, mean) rows sharing one (dispersion, power) pair per call.  The
positive-term recursion is run per row in linear space with a per-row
log-offset (initialized at log P(0) and rescaled when the working values
leave the representable range).  A numba-compiled kernel is used when
available; a vectorized numpy implementation provides the fallback and
serves as an independent check in the tests.

Rows whose dynamic range exceeds what a single per-row offset can hold
(log pmf hundreds of nats below the row's running scale) may come back as
-inf; the optimizer treats such parameter points as rejected.  The
reference implementation in ptdist handles those regimes exactly.

Closed-form negative binomial and Poisson rows are plain numpy.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap

_LOG_RESCALE = 200.0 * np.log(10.0)


@njit(cache=True)
def _pt_rows_numba(y, log_mu, kappa, rho, out):
    kmax = 0
    for i in range(y.shape[0]):
        if y[i] > kmax:
            kmax = y[i]
    w = np.empty(kmax + 1)
    for i in range(y.shape[0]):
        yi = y[i]
        mu = np.exp(log_mu[i])
        off = -mu * kappa
        if yi == 0:
            out[i] = off
            continue
        w[0] = 1.0
        dead = False
        for k in range(yi):
            s = 0.0
            for j in range(k + 1):
                s += rho[j] * w[k - j]
            v = mu * s / (k + 1.0)
            if v > 1e250:
                for t in range(k + 1):
                    w[t] *= 1e-200
                off += _LOG_RESCALE
                v *= 1e-200
            elif v < 1e-250:
                mx = 0.0
                for t in range(k + 1):
                    if w[t] > mx:
                        mx = w[t]
                if mx == 0.0:
                    dead = True
                    break
                if mx < 1e50:
                    for t in range(k + 1):
                        w[t] *= 1e200
                    off -= _LOG_RESCALE
                    s = 0.0
                    for j in range(k + 1):
                        s += rho[j] * w[k - j]
                    v = mu * s / (k + 1.0)
                # else: range too wide for one offset; v may stay tiny or 0
            w[k + 1] = v
        if dead or w[yi] == 0.0:
            out[i] = -np.inf
        else:
            out[i] = np.log(w[yi]) + off
    return out


def _pt_rows_numpy(y, log_mu, kappa, rho):
    """Vectorized fallback: rows sorted by count, shrinking active set."""
    n = y.shape[0]
    order = np.argsort(-y, kind="stable")
    ys = y[order]
    mu = np.exp(log_mu[order])
    kmax = int(ys[0]) if n else 0
    out_s = np.empty(n)
    off = -mu * kappa
    zero_rows = ys == 0
    out_s[zero_rows] = off[zero_rows]
    if kmax == 0:
        out = np.empty(n)
        out[order] = out_s
        return out
    # searchsorted over -ys gives, for each step k, how many rows still
    # need p_k.
    active = np.searchsorted(-ys, -np.arange(1, kmax + 1), side="right")
    w = np.zeros((n, kmax + 1))
    w[:, 0] = 1.0
    for k in range(kmax):
        na = active[k]
        col = mu[:na] * (w[:na, : k + 1] @ rho[k::-1]) / (k + 1.0)
        over = np.flatnonzero(col > 1e250)
        if over.size:
            w[over, : k + 1] *= 1e-200
            off[over] += _LOG_RESCALE
            col[over] *= 1e-200
        wmax = w[:na, : k + 1].max(axis=1)
        under = np.flatnonzero((col < 1e-250) & (wmax < 1e50) & (wmax > 0.0))
        if under.size:
            w[under, : k + 1] *= 1e200
            off[under] -= _LOG_RESCALE
            col[under] = mu[under] * (w[under, : k + 1] @ rho[k::-1]) / (k + 1.0)
        w[:na, k + 1] = col
    nz = ~zero_rows
    with np.errstate(divide="ignore"):
        out_s[nz] = np.log(w[nz, ys[nz]]) + off[nz]
    out = np.empty(n)
    out[order] = out_s
    return out


def pt_logpmf_rows(y: np.ndarray, log_mu: np.ndarray, c: float, kappa: float,
                   rho: np.ndarray) -> np.ndarray:
    """PT log pmf per (count, log-mean) row at shared tail decay c.

    Args:
        y: int64 counts per row.
        log_mu: log means per row.
        c: shared tail-decay parameter (0 for the Poisson corner).
        kappa: shared zero-rate (P(0) = exp(-mu * kappa)).
        rho: recursion coefficients in linear space, length >= max(y).
    """
    if c == 0.0:
        return pois_logpmf_rows(y, log_mu)
    if HAVE_NUMBA:
        out = np.empty(y.shape[0])
        return _pt_rows_numba(y, log_mu, kappa, rho, out)
    return _pt_rows_numpy(y, log_mu, kappa, rho)


def nb_logpmf_rows(y: np.ndarray, log_mu: np.ndarray, dispersion: float,
                   lgamma_y1: np.ndarray | None = None) -> np.ndarray:
    """Closed-form negative binomial rows: size mu/(D-1), success 1/D."""
    mu = np.exp(log_mu)
    r = mu / (dispersion - 1.0)
    if lgamma_y1 is None:
        lgamma_y1 = gammaln(y + 1.0)
    return (
        gammaln(y + r)
        - gammaln(r)
        - lgamma_y1
        - r * np.log(dispersion)
        + y * (np.log(dispersion - 1.0) - np.log(dispersion))
    )


def pois_logpmf_rows(y: np.ndarray, log_mu: np.ndarray,
                     lgamma_y1: np.ndarray | None = None) -> np.ndarray:
    """Closed-form Poisson rows."""
    if lgamma_y1 is None:
        lgamma_y1 = gammaln(y + 1.0)
    return y * log_mu - np.exp(log_mu) - lgamma_y1


@njit(cache=True)
def _pt_sample_rows_numba(u, mu, kappa, rho, cap):
    n = u.shape[0]
    out = np.empty(n, dtype=np.int64)
    w = np.empty(cap + 1)
    for i in range(n):
        m = mu[i]
        off = -m * kappa
        scale = np.exp(off)
        cdf = scale
        if u[i] <= cdf:
            out[i] = 0
            continue
        w[0] = 1.0
        k = 0
        found = False
        while k < cap:
            s = 0.0
            for j in range(k + 1):
                s += rho[j] * w[k - j]
            v = m * s / (k + 1.0)
            if v > 1e250:
                for t in range(k + 1):
                    w[t] *= 1e-200
                off += _LOG_RESCALE
                scale = np.exp(off)
                v *= 1e-200
            w[k + 1] = v
            cdf += v * scale
            k += 1
            if u[i] <= cdf:
                out[i] = k
                found = True
                break
        if not found:
            out[i] = -1
    return out


def _pt_sample_rows_numpy(u, mu, kappa, rho, cap):
    n = u.shape[0]
    out = np.full(n, -1, dtype=np.int64)
    w = np.zeros((n, cap + 1))
    w[:, 0] = 1.0
    off = -mu * kappa
    with np.errstate(under="ignore"):
        cdf = np.exp(off)
    hit = u <= cdf
    out[hit] = 0
    pending = np.flatnonzero(~hit)
    k = 0
    while pending.size and k < cap:
        rows = pending
        col = mu[rows] * (w[rows][:, : k + 1] @ rho[k::-1]) / (k + 1.0)
        over = col > 1e250
        if np.any(over):
            w[rows[over], : k + 1] *= 1e-200
            off[rows[over]] += _LOG_RESCALE
            col[over] *= 1e-200
        w[rows, k + 1] = col
        with np.errstate(under="ignore"):
            cdf[rows] += col * np.exp(off[rows])
        k += 1
        done = u[rows] <= cdf[rows]
        out[rows[done]] = k
        pending = rows[~done]
    return out


def pt_sample_rows(mu: np.ndarray, c: float, kappa: float, rho: np.ndarray,
                   u: np.ndarray) -> np.ndarray:
    """Inverse-cdf draw of one count per row (shared c, per-row mean).

    Returns -1 for rows whose uniform was not covered within len(rho)-1
    counts; callers extend rho and retry those rows.
    """
    cap = rho.shape[0] - 1
    if HAVE_NUMBA:
        return _pt_sample_rows_numba(u, mu, kappa, rho, cap)
    return _pt_sample_rows_numpy(u, mu, kappa, rho, cap)
