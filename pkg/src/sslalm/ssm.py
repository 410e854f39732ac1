"""State-space sequence kernels.

Covers the continuous-to-discrete zero-order-hold transform, the recurrent
scan, the LTI convolutional-kernel view, and the input-dependent selective
scan (sequential reference plus a chunked prefix-scan variant that must
match it). The selective scan is differentiable through the tensor tape;
the LTI helpers are plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, NumericError, ShapeError, Tensor, _record

__all__ = [
    "SsmParams", "DiscreteSsm", "SelectiveParams",
    "discretize_zoh", "recurrent_scan", "conv_kernel", "conv_apply",
    "selective_scan", "selective_scan_chunked", "selective_scan_ref",
]

_ZOH_LIMIT = 1e-8  # below this norm of delta*A, use the B_bar -> delta*B limit


@dataclass
class SsmParams:
    """Continuous-time SSM parameters for one channel: h' = Ah + Bx, y = Ch."""

    A: np.ndarray      # (N, N) evolution
    B: np.ndarray      # (N, 1) projection in
    C: np.ndarray      # (1, N) projection out
    delta: float       # timescale > 0

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.B = np.asarray(self.B, dtype=np.float64).reshape(-1, 1)
        self.C = np.asarray(self.C, dtype=np.float64).reshape(1, -1)
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape != (n, 1) or self.C.shape != (1, n):
            raise ShapeError("SsmParams: inconsistent shapes A %r B %r C %r"
                             % (self.A.shape, self.B.shape, self.C.shape))
        if not self.delta > 0:
            raise ContractError("SsmParams: delta must be positive, got %g" % self.delta)

    @property
    def N(self) -> int:
        return self.A.shape[0]


@dataclass
class DiscreteSsm:
    """Discrete-time parameters: h_t = A_bar h_{t-1} + B_bar x_t, y_t = C h_t."""

    A_bar: np.ndarray  # (N, N)
    B_bar: np.ndarray  # (N, 1)
    C: np.ndarray      # (1, N)

    def __post_init__(self):
        self.A_bar = np.atleast_2d(np.asarray(self.A_bar, dtype=np.float64))
        self.B_bar = np.asarray(self.B_bar, dtype=np.float64).reshape(-1, 1)
        self.C = np.asarray(self.C, dtype=np.float64).reshape(1, -1)


def _expm(m: np.ndarray) -> np.ndarray:
    """Matrix exponential via eigendecomposition (diagonalizable m)."""
    if np.allclose(m, np.diag(np.diagonal(m))):
        return np.diag(np.exp(np.diagonal(m)))
    w, v = np.linalg.eig(m)
    out = v @ np.diag(np.exp(w)) @ np.linalg.inv(v)
    return np.real_if_close(out).astype(np.float64)


def discretize_zoh(params: SsmParams) -> DiscreteSsm:
    """Zero-order hold: A_bar = exp(dA), B_bar = (dA)^-1 (exp(dA) - I) dB.

    Falls back to the small-norm limit B_bar = delta*B when ||delta*A|| is
    below 1e-8 (the two branches agree there to first order).
    """
    da = params.delta * params.A
    a_bar = _expm(da)
    if np.linalg.norm(da) < _ZOH_LIMIT:
        b_bar = params.delta * params.B
    else:
        rhs = (a_bar - np.eye(params.N)) @ (params.delta * params.B)
        try:
            b_bar = np.linalg.solve(da, rhs)
        except np.linalg.LinAlgError:
            raise NumericError("discretize_zoh: delta*A is singular (A=%r)" % (params.A,))
    return DiscreteSsm(A_bar=a_bar, B_bar=b_bar, C=params.C)


def recurrent_scan(d: DiscreteSsm, x, h0=None):
    """Run the discrete recurrence over a 1-d input sequence.

    Returns (y, h_final); threading h_final into a subsequent call is
    equivalent to scanning the concatenated sequence.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ShapeError("recurrent_scan: x must be a non-empty 1-d sequence")
    n = d.A_bar.shape[0]
    h = np.zeros((n, 1)) if h0 is None else np.asarray(h0, dtype=np.float64).reshape(n, 1)
    if not np.all(np.isfinite(h)):
        raise ContractError("recurrent_scan: h0 must be finite")
    y = np.empty_like(x)
    for t in range(x.size):
        h = d.A_bar @ h + d.B_bar * x[t]
        y[t] = (d.C @ h)[0, 0]
    return y, h.reshape(-1)


def conv_kernel(d: DiscreteSsm, length: int) -> np.ndarray:
    """Global kernel [C B_bar, C A_bar B_bar, ..., C A_bar^(M-1) B_bar].

    Built by propagating the state vector, never by explicit matrix powers.
    """
    if length < 1:
        raise ContractError("conv_kernel: length must be >= 1")
    v = d.B_bar.copy()
    k = np.empty(length)
    for i in range(length):
        k[i] = (d.C @ v)[0, 0]
        v = d.A_bar @ v
    return k


def conv_apply(kernel, x) -> np.ndarray:
    """Causal convolution y_t = sum_{k<=t} kernel[k] * x[t-k]."""
    kernel = np.asarray(kernel, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return np.convolve(x, kernel)[: x.size]


@dataclass
class SelectiveParams:
    """Input-dependent scan parameters over an L-step, D-channel sequence.

    delta may be shared across channels (shape (L,)) or per channel (L, D);
    A is a negative diagonal, shared (N,) or per channel (D, N). skip is the
    per-channel passthrough coefficient (zeros when absent).
    """

    delta: object          # Tensor or array, (L,) or (L, D), positive
    B: object              # Tensor or array, (L, N)
    C: object              # Tensor or array, (L, N)
    A: object              # Tensor or array, (N,) or (D, N), negative entries
    skip: object = None    # Tensor or array, (D,), optional


def _param_arrays(p: SelectiveParams, L: int, D: int):
    def data(v):
        return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)

    delta = data(p.delta)
    if delta.ndim == 1:
        delta = np.broadcast_to(delta[:, None], (L, D))
    A = data(p.A)
    if A.ndim == 1:
        A = np.broadcast_to(A[None, :], (D, A.shape[0]))
    B, C = data(p.B), data(p.C)
    N = A.shape[1]
    if delta.shape != (L, D) or B.shape != (L, N) or C.shape != (L, N) or A.shape != (D, N):
        raise ShapeError("selective_scan: delta %r B %r C %r A %r for L=%d D=%d"
                         % (delta.shape, B.shape, C.shape, A.shape, L, D))
    if np.any(delta <= 0):
        raise ContractError("selective_scan: delta must be positive (producer bug)")
    return delta, B, C, A


def selective_scan_ref(p: SelectiveParams, x) -> np.ndarray:
    """Sequential reference scan (plain numpy, normative semantics).

    Per channel d: h_t = exp(delta_t A) h_{t-1} + (delta_t B_t) x_td,
    y_td = C_t . h_t + skip_d x_td, with h0 = 0.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    L, D = x.shape
    delta, B, C, A = _param_arrays(p, L, D)
    skip = p.skip
    skip = (np.zeros(D) if skip is None
            else np.asarray(skip.data if isinstance(skip, Tensor) else skip))
    h = np.zeros((D, A.shape[1]))
    y = np.empty((L, D))
    for t in range(L):
        a_t = np.exp(delta[t][:, None] * A)
        h = a_t * h + (delta[t] * x[t])[:, None] * B[t][None, :]
        y[t] = h @ C[t] + skip * x[t]
    return y


def selective_scan_chunked(p: SelectiveParams, x, chunk: int = 16) -> np.ndarray:
    """Chunked scan: within each chunk, an offset-doubling inclusive prefix
    scan over (a, b) pairs under (a2,b2)∘(a1,b1) = (a1 a2, a2 b1 + b2);
    state is carried across chunk boundaries. Matches the sequential
    reference up to reassociation error.
    """
    if chunk < 1:
        raise ContractError("selective_scan_chunked: chunk must be >= 1")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    L, D = x.shape
    delta, B, C, A = _param_arrays(p, L, D)
    skip = p.skip
    skip = (np.zeros(D) if skip is None
            else np.asarray(skip.data if isinstance(skip, Tensor) else skip))
    N = A.shape[1]
    a_all = np.exp(delta[:, :, None] * A[None, :, :])                 # (L, D, N)
    b_all = (delta * x)[:, :, None] * B[:, None, :]                   # (L, D, N)
    h0 = np.zeros((D, N))
    y = np.empty((L, D))
    for start in range(0, L, chunk):
        stop = min(start + chunk, L)
        a = a_all[start:stop].copy()
        b = b_all[start:stop].copy()
        m = stop - start
        offset = 1
        while offset < m:
            # combine (a,b)[i-offset] into (a,b)[i] for i >= offset
            a_hi, b_hi = a[offset:].copy(), b[offset:].copy()
            b[offset:] = a_hi * b[:m - offset] + b_hi
            a[offset:] = a[:m - offset] * a_hi
            offset *= 2
        h = a * h0[None, :, :] + b                                    # (m, D, N)
        y[start:stop] = np.einsum("tdn,tn->td", h, C[start:stop]) + skip * x[start:stop]
        h0 = h[-1]
    return y


def selective_scan(p: SelectiveParams, x) -> Tensor:
    """Differentiable selective scan (records one node on the active tape).

    Semantics are those of :func:`selective_scan_ref`; gradients flow to
    delta, B, C, A, skip, and x wherever those are Tensors.
    """
    xt = x if isinstance(x, Tensor) else Tensor(x)
    if xt.data.ndim != 2:
        raise ShapeError("selective_scan: x must be (L, D), got %r" % (xt.shape,))
    L, D = xt.data.shape
    delta, B, C, A = _param_arrays(p, L, D)
    skip_in = p.skip
    skip = (np.zeros(D) if skip_in is None
            else np.asarray(skip_in.data if isinstance(skip_in, Tensor) else skip_in))
    N = A.shape[1]
    xd = xt.data

    a_all = np.exp(delta[:, :, None] * A[None, :, :])     # (L, D, N)
    u_all = delta * xd                                    # (L, D)
    H = np.empty((L + 1, D, N))
    H[0] = 0.0
    for t in range(L):
        H[t + 1] = a_all[t] * H[t] + u_all[t][:, None] * B[t][None, :]
    y = np.einsum("tdn,tn->td", H[1:], C) + skip * xd

    inputs = []
    slots = {}
    for name, v in (("delta", p.delta), ("B", p.B), ("C", p.C),
                    ("A", p.A), ("skip", skip_in), ("x", xt)):
        if isinstance(v, Tensor):
            slots[name] = (len(inputs), v)
            inputs.append(v)

    def bwd(gy):
        g_delta = np.zeros((L, D))
        g_B = np.zeros((L, N))
        g_C = np.zeros((L, N))
        g_A = np.zeros((D, N))
        g_skip = (gy * xd).sum(axis=0)
        g_x = gy * skip
        gh = np.zeros((D, N))
        for t in range(L - 1, -1, -1):
            gh = gh + gy[t][:, None] * C[t][None, :]
            g_C[t] = (gy[t][:, None] * H[t + 1]).sum(axis=0)
            ga = gh * H[t]                                   # wrt a_t
            gu = (gh * B[t][None, :]).sum(axis=1)            # wrt u_t, (D,)
            g_B[t] = (gh * u_all[t][:, None]).sum(axis=0)
            # a_t = exp(delta_t A): d/d delta = A * a, d/dA = delta * a
            g_delta[t] = (ga * A * a_all[t]).sum(axis=1) + gu * xd[t]
            g_A += delta[t][:, None] * ga * a_all[t]
            g_x[t] += gu * delta[t]
            gh = gh * a_all[t]
        grads = [None] * len(inputs)
        if "delta" in slots:
            i, v = slots["delta"]
            grads[i] = g_delta.sum(axis=1) if v.data.ndim == 1 else g_delta
        if "B" in slots:
            grads[slots["B"][0]] = g_B
        if "C" in slots:
            grads[slots["C"][0]] = g_C
        if "A" in slots:
            i, v = slots["A"]
            grads[i] = g_A.sum(axis=0) if v.data.ndim == 1 else g_A
        if "skip" in slots:
            grads[slots["skip"][0]] = g_skip
        if "x" in slots:
            grads[slots["x"][0]] = g_x
        return tuple(grads)

    return _record("selective_scan", tuple(inputs), y, bwd)
