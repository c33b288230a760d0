'''Selective state-space scan.

For an input sequence x (L x d) the scan computes, per timestep t,

    delta_t = softplus(x_t W_delta + b_delta)          (d,)
    B_t, C_t = x_t W_B + b_B, x_t W_C + b_C            (n,)
    Abar_t = exp(delta_t A),  Bbar_t = delta_t B_t      (d x n)
    h_t = Abar_t * h_{t-1} + Bbar_t x_t,  h_0 = 0
    y_t = C_t . h_t + D x_t

with A = -exp(log_A), so every Abar_t entry lies in (0, 1).

The recurrence itself is the primitive ``linear_recurrence``; its
backward pass is the same recurrence run in reverse time, so the
sequential and chunked evaluators share one adjoint.
'''
import numpy as np

from . import numkernel as nk
from .base import DimensionError, NumericError, ParameterError
from .layers import Linear, make_rng
from .numkernel import Module, Parameter


def scan_sequential(a, b):
    '''h_t = a_t * h_{t-1} + b_t, one timestep at a time'''
    h = np.empty_like(b)
    state = np.zeros_like(b[0])
    for t in range(b.shape[0]):
        state = a[t] * state + b[t]
        h[t] = state
    return h


def compose_prefix(a, b):
    '''Inclusive prefix of affine maps by recursive doubling

    After the loop (a[t], b[t]) is the composition of maps 0..t, using
    (a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2).'''
    a = a.copy()
    b = b.copy()
    shift = 1
    while shift < a.shape[0]:
        b[shift:] = a[shift:] * b[:-shift] + b[shift:]
        a[shift:] = a[shift:] * a[:-shift]
        shift *= 2
    return a, b


def scan_chunked(a, b, chunk):
    '''Prefix-compose each chunk, then carry the state across chunks'''
    if chunk < 1:
        raise ParameterError('chunk must be at least 1, got {0}'.format(chunk))
    h = np.empty_like(b)
    state = np.zeros_like(b[0])
    for start in range(0, b.shape[0], chunk):
        stop = min(start + chunk, b.shape[0])
        ca, cb = compose_prefix(a[start:stop], b[start:stop])
        h[start:stop] = ca * state + cb
        state = h[stop - 1]
    return h


def _run(a, b, chunk):
    if chunk is None:
        return scan_sequential(a, b)
    return scan_chunked(a, b, chunk)


def _check_finite(h):
    bad = ~np.isfinite(h.reshape(h.shape[0], -1)).all(axis=1)
    if bad.any():
        raise NumericError('non-finite scan state at t={0}'.format(
            int(np.flatnonzero(bad)[0])))


def linear_recurrence(a, b, chunk=None):
    '''Differentiable h_t = a_t * h_{t-1} + b_t over axis 0

    ``chunk=None`` runs the plain sequential loop.'''
    a, b = nk.as_tensor(a), nk.as_tensor(b)
    if a.shape != b.shape or a.ndim < 1 or a.shape[0] < 1:
        raise DimensionError('linear_recurrence: coefficient shape {0} vs '
                             'input shape {1}'.format(a.shape, b.shape))
    h = _run(a.data, b.data, chunk)
    _check_finite(h)

    def backward(g):
        # lam_t = g_t + a_{t+1} lam_{t+1}
        shifted = np.concatenate([a.data[1:], np.zeros_like(a.data[:1])])
        lam = _run(shifted[::-1], g[::-1], chunk)[::-1]
        h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]])
        return lam * h_prev, lam
    return nk._result(h, (a, b), backward, 'linear_recurrence')


class SsmParams(Module):
    '''Learnable parameters of one selective SSM'''

    def __init__(self, d_model, d_state=16, rng=None, dt_min=1e-3,
                 dt_max=1e-1):
        if d_model < 1 or d_state < 1:
            raise ParameterError('d_model and d_state must be positive')
        rng = make_rng(rng)
        self.d_model = d_model
        self.d_state = d_state
        # S4D-real initialisation: A[:, k] = -(k + 1)
        self.log_A = Parameter(np.log(np.tile(
            np.arange(1, d_state + 1, dtype=np.float64), (d_model, 1))))
        self.proj_B = Linear(d_model, d_state, rng)
        self.proj_C = Linear(d_model, d_state, rng)
        self.proj_delta = Linear(d_model, d_model, rng)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), d_model))
        # inverse softplus, so softplus(bias) starts at dt
        self.proj_delta.bias.data = dt + np.log(-np.expm1(-dt))
        self.D = Parameter(np.ones(d_model))

    def discretize(self, x):
        '''Return (Abar, Bbar x, C) for an L x d input'''
        if x.ndim != 2 or x.shape[1] != self.d_model:
            raise DimensionError('SSM with d_model={0} got input {1}'.format(
                self.d_model, x.shape))
        L, d, n = x.shape[0], self.d_model, self.d_state
        full = (L, d, n)
        delta = nk.softplus(self.proj_delta(x))
        delta3 = nk.broadcast_to(nk.reshape(delta, (L, d, 1)), full)
        A = nk.mul(nk.exp(self.log_A), -1.0)
        A3 = nk.broadcast_to(nk.reshape(A, (1, d, n)), full)
        a = nk.exp(delta3 * A3)
        B = self.proj_B(x)
        B3 = nk.broadcast_to(nk.reshape(B, (L, 1, n)), full)
        x3 = nk.broadcast_to(nk.reshape(x, (L, d, 1)), full)
        u = delta3 * B3 * x3
        C = self.proj_C(x)
        return a, u, C

    def readout(self, h, C, x):
        L, d, n = h.shape
        C3 = nk.broadcast_to(nk.reshape(C, (L, 1, n)), h.shape)
        y = nk.tsum(h * C3, axis=2)
        skip = nk.broadcast_to(nk.reshape(self.D, (1, d)), x.shape)
        return y + skip * x

    def zero_(self):
        '''Silence the scan: zero readout and skip'''
        self.proj_C.zero_()
        self.D.data = np.zeros(self.D.shape)


def _scan(x, params, chunk):
    x = nk.as_tensor(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError('scan input must be L x d with L >= 1, got '
                             '{0}'.format(x.shape))
    a, u, C = params.discretize(x)
    h = linear_recurrence(a, u, chunk)
    return params.readout(h, C, x)


def selective_scan_sequential(x, params):
    return _scan(x, params, None)


def selective_scan_chunked(x, params, chunk):
    if chunk < 1:
        raise ParameterError('chunk must be at least 1, got {0}'.format(chunk))
    return _scan(x, params, chunk)


def selective_scan(x, params, chunk=None):
    return _scan(x, params, chunk)
