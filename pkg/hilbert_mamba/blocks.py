'''Composite blocks: Hilbert-Mamba block, feed-forward, cross-modal fusion.

Every block is pre-norm and residual-anchored, so zeroing its output
weights turns it into the identity map.  Volume inputs are C x D x H x W
(or C x H x W for slices); internally they are serialized to an N x C
token sequence along the configured curve.  ``forward_sequence`` skips
serialization for inputs that already are token sequences.
'''
from dataclasses import dataclass
import math

import numpy as np

from . import numkernel as nk
from .base import DimensionError, ParameterError
from .hilbert_codec import (
    SCHEMES, hilbert_flatten, hilbert_unflatten, map_for)
from .layers import LayerNorm, Linear, make_rng
from .numkernel import Module
from .ssm_core import SsmParams, selective_scan


INTERACTIONS = ('attention', 'mamba')


@dataclass
class HmbConfig(object):
    d_model: int
    d_state: int = 16
    scheme: str = 'hilbert'
    dims: int = 3
    order: int = None
    norm: bool = True
    chunk: int = 64
    bidirectional: bool = False
    pad_policy: str = 'drop'

    def __post_init__(self):
        if self.d_model < 1:
            raise ParameterError('d_model must be positive')
        if self.scheme not in SCHEMES:
            raise ParameterError('unknown scan scheme {0!r}'.format(
                self.scheme))

    def map_for(self, extents):
        if len(extents) != self.dims:
            raise ParameterError('{0}D block got {1}D extents {2}'.format(
                self.dims, len(extents), tuple(extents)))
        return map_for(self.scheme, extents, self.order)


def to_tokens(x, scan_map, pad_policy='drop'):
    '''C x spatial volume -> N x C tokens in curve order'''
    return nk.transpose(hilbert_flatten(x, scan_map, pad_policy))


def from_tokens(tokens, scan_map, extents, pad_policy='drop'):
    return hilbert_unflatten(nk.transpose(tokens), scan_map, extents,
                             pad_policy)


def reverse_tokens(tokens):
    return nk.take(tokens, np.arange(tokens.shape[0] - 1, -1, -1), axis=0)


class HilbertMambaBlock(Module):
    '''y = unflatten(SSM(norm(flatten(x)))) + x'''

    def __init__(self, cfg, rng=None):
        rng = make_rng(rng)
        self.cfg = cfg
        self.norm = LayerNorm(cfg.d_model) if cfg.norm else None
        self.ssm = SsmParams(cfg.d_model, cfg.d_state, rng)
        self.ssm_reverse = SsmParams(cfg.d_model, cfg.d_state, rng) \
            if cfg.bidirectional else None

    def forward_sequence(self, tokens):
        if tokens.ndim != 2 or tokens.shape[1] != self.cfg.d_model:
            raise DimensionError('block with d_model={0} got tokens '
                                 '{1}'.format(self.cfg.d_model, tokens.shape))
        z = self.norm(tokens) if self.norm is not None else tokens
        y = selective_scan(z, self.ssm, self.cfg.chunk)
        if self.ssm_reverse is not None:
            back = selective_scan(reverse_tokens(z), self.ssm_reverse,
                                  self.cfg.chunk)
            y = y + reverse_tokens(back)
        return tokens + y

    def __call__(self, x):
        if x.shape[0] != self.cfg.d_model:
            raise DimensionError('block with d_model={0} got volume '
                                 '{1}'.format(self.cfg.d_model, x.shape))
        extents = x.shape[1:]
        scan_map = self.cfg.map_for(extents)
        tokens = to_tokens(x, scan_map, self.cfg.pad_policy)
        out = self.forward_sequence(tokens)
        return from_tokens(out, scan_map, extents, self.cfg.pad_policy)

    def zero_(self):
        self.ssm.zero_()
        if self.ssm_reverse is not None:
            self.ssm_reverse.zero_()


def hmb_forward(x, block):
    return block(x)


class Mlp(Module):

    def __init__(self, d_in, hidden, d_out, rng=None):
        rng = make_rng(rng)
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng)

    def __call__(self, x):
        return self.fc2(nk.gelu(self.fc1(x)))


class FeedForward(Module):
    '''Pre-norm two-layer GELU MLP with a residual connection'''

    def __init__(self, d_model, hidden, rng=None):
        rng = make_rng(rng)
        self.d_model = d_model
        self.norm = LayerNorm(d_model)
        self.mlp = Mlp(d_model, hidden, d_model, rng)

    def forward_sequence(self, tokens):
        return tokens + self.mlp(self.norm(tokens))

    def __call__(self, x):
        '''Apply position-wise to a C x spatial feature map'''
        if x.shape[0] != self.d_model:
            raise DimensionError('FeedForward({0}) got input {1}'.format(
                self.d_model, x.shape))
        tokens = nk.transpose(nk.reshape(x, (self.d_model, -1)))
        out = self.forward_sequence(tokens)
        return nk.reshape(nk.transpose(out), x.shape)

    def zero_(self):
        self.mlp.fc2.zero_()


def ffn_forward(x, ffn):
    return ffn(x)


@dataclass
class HmcaConfig(object):
    d_model: int
    mlp_hidden: int = 32
    d_state: int = 16
    scheme: str = 'hilbert'
    dims: int = 3
    order: int = None
    chunk: int = 64
    bidirectional: bool = False
    interaction: str = 'attention'
    residual: bool = True

    def __post_init__(self):
        if self.interaction not in INTERACTIONS:
            raise ParameterError('unknown interaction {0!r}; expected one of '
                                 '{1}'.format(self.interaction, INTERACTIONS))
        if not self.residual:
            raise ParameterError('cross-modal fusion is always residual')

    def block_config(self):
        return HmbConfig(
            d_model=self.d_model, d_state=self.d_state, scheme=self.scheme,
            dims=self.dims, order=self.order, chunk=self.chunk,
            bidirectional=self.bidirectional)


def scaled_dot_product_attention(q, k, v):
    scale = 1.0 / math.sqrt(q.shape[1])
    weights = nk.softmax(nk.mul(nk.matmul(q, nk.transpose(k)), scale))
    return nk.matmul(weights, v)


class HilbertMambaCrossAttention(Module):
    '''Fuse a key/value modality into a query modality

    (K, V) come from MLP(HMB(kv)); the query stream attends to them and
    a second HMB refines the attended stream; the result is added back
    onto the query through ``out_proj``.  With ``interaction='mamba'``
    the second HMB instead scans the context tokens followed by the
    query tokens, and the query positions are read out.
    '''

    def __init__(self, cfg, rng=None):
        rng = make_rng(rng)
        self.cfg = cfg
        d = cfg.d_model
        self.kv_block = HilbertMambaBlock(cfg.block_config(), rng)
        self.kv_mlp = Mlp(d, cfg.mlp_hidden, 2 * d, rng)
        self.fuse_block = HilbertMambaBlock(cfg.block_config(), rng)
        self.out_proj = Linear(d, d, rng)

    def forward_sequence(self, q, kv):
        d = self.cfg.d_model
        if q.ndim != 2 or kv.ndim != 2 or q.shape[1] != d or kv.shape[1] != d:
            raise DimensionError('fusion width {0} got query {1} and context '
                                 '{2}'.format(d, q.shape, kv.shape))
        context = self.kv_mlp(self.kv_block.forward_sequence(kv))
        k, v = context[:, :d], context[:, d:]
        if self.cfg.interaction == 'attention':
            attended = q + scaled_dot_product_attention(q, k, v)
            fused = self.fuse_block.forward_sequence(attended)
        else:
            stream = nk.concat([k + v, q], axis=0)
            fused = self.fuse_block.forward_sequence(stream)[kv.shape[0]:]
        return q + self.out_proj(fused)

    def __call__(self, q_feat, kv_feat):
        if q_feat.shape != kv_feat.shape:
            raise DimensionError('fusion needs equal shapes, got {0} and '
                                 '{1}'.format(q_feat.shape, kv_feat.shape))
        if q_feat.shape[0] != self.cfg.d_model:
            raise DimensionError('fusion width {0} got volume {1}'.format(
                self.cfg.d_model, q_feat.shape))
        extents = q_feat.shape[1:]
        scan_map = map_for(self.cfg.scheme, extents, self.cfg.order)
        q = to_tokens(q_feat, scan_map)
        kv = to_tokens(kv_feat, scan_map)
        return from_tokens(self.forward_sequence(q, kv), scan_map, extents)

    def zero_(self):
        self.out_proj.zero_()


def hmca_fuse(q_feat, kv_feat, hmca):
    return hmca(q_feat, kv_feat)
