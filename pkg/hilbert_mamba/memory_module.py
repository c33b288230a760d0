'''Slice-by-slice memory with GRU-like gating.

    u_t  = sigma(W_u [f_t, M_{t-1}])
    r_t  = sigma(W_r [f_t, M_{t-1}])
    M~_t = tanh(W_m [f_t, r_t * M_{t-1}])
    M_t  = (1 - u_t) * M_{t-1} + u_t * M~_t

[a, b] is channel concatenation; the W_* are 1x1 maps applied at every
pixel (or 3x3 convolutions with ``gate_kernel=3``).  M_0 = 0 and slices
are visited in ascending depth order.
'''
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .base import DimensionError, ParameterError
from .blocks import FeedForward, HilbertMambaBlock, HmbConfig
from .layers import Conv3d, PointwiseConv, make_rng
from .numkernel import Module


@dataclass
class MemoryState(object):
    M: nk.Tensor
    t: int


@dataclass
class MemoryConfig(object):
    channels: int
    d_state: int = 16
    scheme: str = 'hilbert'
    chunk: int = 64
    ffn_hidden: int = None
    gate_kernel: int = 1
    depth: int = 2

    def __post_init__(self):
        if self.gate_kernel not in (1, 3):
            raise ParameterError('gate_kernel must be 1 or 3, got {0}'.format(
                self.gate_kernel))
        if self.depth < 1:
            raise ParameterError('memory depth must be at least 1')
        if self.ffn_hidden is None:
            self.ffn_hidden = 2 * self.channels


class GateWeights(Module):
    '''W_u, W_r, W_m: maps from 2C concatenated channels to C'''

    def __init__(self, channels, kernel=1, rng=None):
        rng = make_rng(rng)
        self.channels = channels
        self.kernel = kernel
        if kernel == 1:
            self.W_u = PointwiseConv(2 * channels, channels, rng)
            self.W_r = PointwiseConv(2 * channels, channels, rng)
            self.W_m = PointwiseConv(2 * channels, channels, rng)
        else:
            conv = dict(kernel_size=(1, 3, 3), padding=(0, 1, 1), rng=rng)
            self.W_u = Conv3d(2 * channels, channels, **conv)
            self.W_r = Conv3d(2 * channels, channels, **conv)
            self.W_m = Conv3d(2 * channels, channels, **conv)

    def apply(self, layer, stacked):
        if self.kernel == 1:
            return layer(stacked)
        # a slice is a depth-1 volume for the 3x3 variant
        volume = nk.reshape(stacked, (stacked.shape[0], 1) + stacked.shape[1:])
        out = layer(volume)
        return nk.reshape(out, (self.channels,) + stacked.shape[1:])

    def zero_(self):
        for layer in (self.W_u, self.W_r, self.W_m):
            layer.zero_()


def gate_update(f_t, M_prev, w):
    '''One step of the gated memory; returns (M_t, u_t, r_t)'''
    if f_t.shape != M_prev.shape:
        raise DimensionError('slice {0} and memory {1} differ in shape'.format(
            f_t.shape, M_prev.shape))
    if f_t.shape[0] != w.channels:
        raise DimensionError('gates for {0} channels got slice {1}'.format(
            w.channels, f_t.shape))
    both = nk.concat([f_t, M_prev], axis=0)
    u = nk.sigmoid(w.apply(w.W_u, both))
    r = nk.sigmoid(w.apply(w.W_r, both))
    candidate = nk.tanh(w.apply(w.W_m, nk.concat([f_t, r * M_prev], axis=0)))
    M_t = (1.0 - u) * M_prev + u * candidate
    return M_t, u, r


class MemoryInfusedModule(Module):
    '''Intra-slice refinement (HMB + FFN) then the gated memory update'''

    def __init__(self, cfg, rng=None):
        rng = make_rng(rng)
        self.cfg = cfg
        c = cfg.channels
        self.hmb = HilbertMambaBlock(HmbConfig(
            d_model=c, d_state=cfg.d_state, scheme=cfg.scheme, dims=2,
            chunk=cfg.chunk), rng)
        self.ffn = FeedForward(c, cfg.ffn_hidden, rng)
        self.gates = GateWeights(c, cfg.gate_kernel, rng)
        self.condition = PointwiseConv(2 * c, c, rng)

    def step(self, f, M_prev):
        f = self.ffn(self.hmb(f))
        M_t, _, _ = gate_update(f, M_prev, self.gates)
        refined = self.condition(nk.concat([f, M_t], axis=0))
        return refined, M_t

    def __call__(self, slices):
        '''Roll over the slices; returns (refined, memories before each
        slice, final state)'''
        if not slices:
            raise ParameterError('memory rollout needs at least one slice')
        M = nk.zeros(slices[0].shape)
        refined, previous = [], []
        for f in slices:
            previous.append(M)
            out, M = self.step(f, M)
            refined.append(out)
        return refined, previous, MemoryState(M=M, t=len(slices))


class MemoryStack(Module):
    '''``depth`` memory-infused modules applied in series'''

    def __init__(self, cfg, rng=None):
        rng = make_rng(rng)
        self.cfg = cfg
        self.modules = [MemoryInfusedModule(cfg, rng)
                        for _ in range(cfg.depth)]

    def __call__(self, slices):
        states, previous = [], None
        for module in self.modules:
            slices, previous, state = module(slices)
            states.append(state)
        return slices, previous, states


def memory_module_forward(slices, stack):
    '''Returns (refined slices, final MemoryState of the last module)'''
    refined, _, states = stack(slices)
    return refined, states[-1]


def split_slices(volume):
    '''C x D x H x W -> D slices of C x H x W'''
    return [volume[:, t] for t in range(volume.shape[1])]


def join_slices(slices):
    return nk.stack(slices, axis=1)


def zeros_like_slices(volume):
    return nk.constant(np.zeros(volume.shape))
