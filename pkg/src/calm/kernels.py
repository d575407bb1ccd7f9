"""Hot kernels with a compiled backend and a pure-numpy fallback.

The compiled module ``calm._scan`` is built from ``_scan.pyx`` at install
time. If it is missing (no compiler, or ``CALM_PURE_PYTHON=1`` is set) the
numpy implementations below are used instead. Both backends compute the
same recurrence:

    h_j = exp(delta_j * A) * h_{j-1} + delta_j * B_j * u_j,   h_{-1} = 0
    y_j = <h_j, C_j>                                           (over S)

with one independent state per (n, d) channel.
"""
from __future__ import annotations

import os

import numpy as np

try:
    if os.environ.get("CALM_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("compiled kernels disabled by CALM_PURE_PYTHON")
    from . import _scan as _compiled
except ImportError:  # pragma: no cover - depends on build environment
    _compiled = None

HAVE_COMPILED = _compiled is not None
BACKEND = "cython" if HAVE_COMPILED else "numpy"


def _c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def scan_forward_numpy(u, delta, A, B, C):
    N, J, D = u.shape
    S = A.shape[1]
    h = np.zeros((N, D, S))
    y = np.empty((N, J, D))
    for j in range(J):
        dt = delta[:, j, :, None]
        h = np.exp(dt * A[None]) * h + (dt * u[:, j, :, None]) * B[:, j, None, :]
        y[:, j, :] = np.einsum("nds,ns->nd", h, C[:, j, :])
    return y


def scan_backward_numpy(u, delta, A, B, C, gy):
    """O(N*J*D*S) time and memory: keeps the full state history."""
    N, J, D = u.shape
    S = A.shape[1]
    hist = np.empty((J, N, D, S))
    decay = np.empty((J, N, D, S))
    h = np.zeros((N, D, S))
    for j in range(J):
        dt = delta[:, j, :, None]
        decay[j] = np.exp(dt * A[None])
        h = decay[j] * h + (dt * u[:, j, :, None]) * B[:, j, None, :]
        hist[j] = h

    gu = np.empty((N, J, D))
    gdelta = np.empty((N, J, D))
    gA = np.zeros((D, S))
    gB = np.empty((N, J, S))
    gC = np.empty((N, J, S))
    carry = np.zeros((N, D, S))
    for j in range(J - 1, -1, -1):
        gyj = gy[:, j, :, None]
        gh = gyj * C[:, j, None, :] + carry
        gC[:, j, :] = np.einsum("nd,nds->ns", gy[:, j, :], hist[j])
        hprev = hist[j - 1] if j > 0 else np.zeros((N, D, S))
        ga = gh * hprev * decay[j]
        dt = delta[:, j, :]
        uj = u[:, j, :]
        Bj = B[:, j, None, :]
        gdelta[:, j, :] = (ga * A[None]).sum(-1) + uj * (gh * Bj).sum(-1)
        gA += np.einsum("nds,nd->ds", ga, dt)
        gB[:, j, :] = np.einsum("nds,nd->ns", gh, dt * uj)
        gu[:, j, :] = dt * (gh * Bj).sum(-1)
        carry = gh * decay[j]
    return gu, gdelta, gA, gB, gC


def scan_forward(u, delta, A, B, C, backend=None):
    """Selective-scan output (without the skip term); shape (N, J, D)."""
    backend = backend or BACKEND
    args = tuple(_c64(a) for a in (u, delta, A, B, C))
    if backend == "cython":
        if not HAVE_COMPILED:
            raise RuntimeError("compiled scan kernel is not available")
        return _compiled.scan_forward(*args)
    return scan_forward_numpy(*args)


def scan_backward(u, delta, A, B, C, gy, backend=None):
    """Gradients of sum(gy * y) w.r.t. (u, delta, A, B, C)."""
    backend = backend or BACKEND
    args = tuple(_c64(a) for a in (u, delta, A, B, C, gy))
    if backend == "cython":
        if not HAVE_COMPILED:
            raise RuntimeError("compiled scan kernel is not available")
        return _compiled.scan_backward(*args)
    return scan_backward_numpy(*args)
