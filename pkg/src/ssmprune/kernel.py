"""Discretized selective-scan recurrence.

Shapes used throughout::

    T        sequence length
    d        inner channels (d_inner)
    n        state width (d_state)

The recurrence per channel ``d`` and state slot ``n`` is::

    abar[t] = exp(delta[t, d] * A[d, n])          (zero-order hold)
    bbar[t] = delta[t, d] * B[t, n]               (Euler)
    h[t]    = abar[t] * h[t-1] + bbar[t] * x[t, d],  h[-1] = 0
    y[t, d] = sum_n C[t, n] * h[t, d, n]

Positions are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# time steps per block when materializing exp(delta * A); bounds memory at
# block * d * n elements
SCAN_BLOCK = 64


@dataclass(frozen=True)
class ScanParams:
    """Inputs of one selective scan.

    ``a_log`` parameterizes the diagonal decay ``A = -exp(a_log)``.
    """

    a_log: np.ndarray  # [d, n]
    delta: np.ndarray  # [T, d], > 0
    b: np.ndarray  # [T, n]
    c: np.ndarray  # [T, n]
    x: np.ndarray  # [T, d]

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.a_log)

    @property
    def length(self) -> int:
        return self.delta.shape[0]

    def validate(self) -> None:
        if self.a_log.ndim != 2:
            raise ValueError(f"a_log must be 2-D [d, n], got shape {self.a_log.shape}")
        d, n = self.a_log.shape
        T = self.delta.shape[0] if self.delta.ndim == 2 else 0
        if T < 1:
            raise ValueError("sequence must contain at least one token")
        for name, arr, shape in (
            ("delta", self.delta, (T, d)),
            ("b", self.b, (T, n)),
            ("c", self.c, (T, n)),
            ("x", self.x, (T, d)),
        ):
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        for name in ("a_log", "delta", "b", "c", "x"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")
        if np.any(self.delta <= 0):
            raise ValueError("delta must be strictly positive")

    def astype(self, dtype) -> "ScanParams":
        return ScanParams(*(np.asarray(getattr(self, f), dtype=dtype) for f in ("a_log", "delta", "b", "c", "x")))

    def truncate(self, stop: int) -> "ScanParams":
        """Prefix ``[0, stop)`` of the sequence."""
        return ScanParams(self.a_log, self.delta[:stop], self.b[:stop], self.c[:stop], self.x[:stop])


@dataclass(frozen=True)
class ScanTrace:
    """Per-step discretized matrices, states and outputs of a scan."""

    abar: np.ndarray  # [T, d, n]
    bbar: np.ndarray  # [T, d, n]
    h: np.ndarray  # [T, d, n]
    y: np.ndarray  # [T, d]


def discretize(params: ScanParams) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(abar, bbar)``, each ``[T, d, n]``."""
    params.validate()
    abar = np.exp(params.delta[:, :, None] * params.A[None, :, :])
    bbar = params.delta[:, :, None] * params.b[:, None, :]
    return abar, bbar


def _check_finite(y: np.ndarray) -> None:
    bad = ~np.all(np.isfinite(y.reshape(y.shape[0], -1)), axis=1)
    if bad.any():
        step = int(np.argmax(bad))
        raise FloatingPointError(f"scan produced a non-finite value at step {step}")


def scan_from_trace(abar: np.ndarray, bbar: np.ndarray, c: np.ndarray, x: np.ndarray) -> ScanTrace:
    """Run the recurrence on already-discretized matrices.

    Lets callers inject ``abar``/``bbar`` directly, e.g. ``abar = 1`` for a
    decay-free prefix sum.
    """
    T = abar.shape[0]
    h = np.empty_like(abar)
    state = np.zeros(abar.shape[1:], dtype=abar.dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            state = abar[t] * state + bbar[t] * x[t][:, None]
            h[t] = state
    y = np.einsum("tdn,tn->td", h, c)
    _check_finite(y)
    return ScanTrace(abar=abar, bbar=bbar, h=h, y=y)


def selective_scan(params: ScanParams) -> ScanTrace:
    """Full scan keeping every intermediate; memory is ``O(T * d * n)``."""
    abar, bbar = discretize(params)
    return scan_from_trace(abar, bbar, params.c, params.x)


def scan(params: ScanParams, *, check: bool = True) -> np.ndarray:
    """Outputs ``y`` [T, d] of the scan without storing the trace.

    This is the path the model's forward pass uses. Works in the dtype of
    ``params``.
    """
    if check:
        params.validate()
    T, d = params.delta.shape
    dtype = params.delta.dtype
    # state kept as [n, d] so the long axis is innermost in every broadcast
    A = np.ascontiguousarray(params.A.T.astype(dtype))
    n = A.shape[0]
    y = np.empty((T, d), dtype=dtype)
    state = np.zeros((n, d), dtype=dtype)
    block = min(SCAN_BLOCK, T)
    abar = np.empty((block, n, d), dtype=dtype)
    bx = np.empty((block, n, d), dtype=dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        for start in range(0, T, block):
            stop = min(start + block, T)
            k = stop - start
            dt = params.delta[start:stop]
            np.multiply(dt[:, None, :], A, out=abar[:k])
            np.exp(abar[:k], out=abar[:k])
            np.multiply(params.b[start:stop, :, None], (dt * params.x[start:stop])[:, None, :], out=bx[:k])
            c = params.c[start:stop]
            for i in range(k):
                state *= abar[i]
                state += bx[i]
                np.dot(c[i], state, out=y[start + i])
    _check_finite(y)
    return y


def leave_one_out(params: ScanParams, t: int, *, drop_decay: bool = False) -> np.ndarray:
    """Final output row ``y[T-1]`` with the input injection at ``t`` suppressed.

    By default step ``t`` still applies its decay (``h[t] = abar[t] * h[t-1]``),
    so ``y[T-1] - leave_one_out(params, t)`` is exactly the contribution of
    ``x[t]``. ``drop_decay=True`` skips step ``t`` entirely instead, which is a
    different quantity and is kept only for comparison.
    """
    T = params.length
    if not 0 <= t < T:
        raise IndexError(f"position {t} out of range for length {T}")
    abar, bbar = discretize(params)
    bbar = bbar.copy()
    bbar[t] = 0.0
    if drop_decay:
        abar = abar.copy()
        abar[t] = 1.0
    state = np.zeros(abar.shape[1:], dtype=abar.dtype)
    for k in range(T):
        state = abar[k] * state + bbar[k] * params.x[k][:, None]
    out = state @ params.c[T - 1]
    _check_finite(out[None, :])
    return out
