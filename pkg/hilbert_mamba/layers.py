import numpy as np

from . import numkernel as nk
from .base import DimensionError
from .numkernel import Module, Parameter


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def make_rng(rng=None, seed=0):
    if rng is None:
        return np.random.default_rng(seed)
    return rng


class Linear(Module):
    '''Token-wise affine map on an N x in_features tensor'''

    def __init__(self, in_features, out_features, rng=None, bias=True):
        rng = make_rng(rng)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            uniform_init(rng, (in_features, out_features), in_features))
        self.bias = Parameter(
            uniform_init(rng, (out_features,), in_features)) if bias else None

    def __call__(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError('Linear({0}, {1}) got input {2}'.format(
                self.in_features, self.out_features, x.shape))
        y = nk.matmul(x, self.weight)
        if self.bias is None:
            return y
        b = nk.reshape(self.bias, (1, self.out_features))
        return y + nk.broadcast_to(b, y.shape)

    def zero_(self):
        self.weight.data = np.zeros(self.weight.shape)
        if self.bias is not None:
            self.bias.data = np.zeros(self.bias.shape)


class LayerNorm(Module):
    '''Normalise the last axis of an N x d tensor'''

    def __init__(self, d, eps=1e-5):
        self.d = d
        self.eps = eps
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))

    def __call__(self, x):
        if x.ndim != 2 or x.shape[1] != self.d:
            raise DimensionError('LayerNorm({0}) got input {1}'.format(
                self.d, x.shape))
        mu = nk.broadcast_to(nk.mean(x, axis=1, keepdims=True), x.shape)
        centered = x - mu
        var = nk.mean(centered * centered, axis=1, keepdims=True)
        inv = nk.broadcast_to(nk.power(var + self.eps, -0.5), x.shape)
        g = nk.broadcast_to(nk.reshape(self.gamma, (1, self.d)), x.shape)
        b = nk.broadcast_to(nk.reshape(self.beta, (1, self.d)), x.shape)
        return centered * inv * g + b


class PointwiseConv(Module):
    '''A 1x1(x1) convolution: the same channel map at every position

    Works on any C x ... feature map by folding the spatial axes.
    '''

    def __init__(self, in_channels, out_channels, rng=None):
        rng = make_rng(rng)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = Parameter(
            uniform_init(rng, (out_channels, in_channels), in_channels))
        self.bias = Parameter(uniform_init(rng, (out_channels,), in_channels))

    def __call__(self, x):
        if x.shape[0] != self.in_channels:
            raise DimensionError('PointwiseConv({0}, {1}) got input '
                                 '{2}'.format(self.in_channels,
                                              self.out_channels, x.shape))
        spatial = x.shape[1:]
        flat = nk.reshape(x, (self.in_channels, -1))
        y = nk.matmul(self.weight, flat)
        b = nk.broadcast_to(
            nk.reshape(self.bias, (self.out_channels, 1)), y.shape)
        return nk.reshape(y + b, (self.out_channels,) + tuple(spatial))

    def zero_(self):
        self.weight.data = np.zeros(self.weight.shape)
        self.bias.data = np.zeros(self.bias.shape)


class Conv3d(Module):

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1,
                 padding=0, dilation=1, rng=None):
        rng = make_rng(rng)
        if isinstance(kernel_size, int):
            kernel_size = (kernel_size,) * 3
        fan_in = in_channels * int(np.prod(kernel_size))
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.weight = Parameter(uniform_init(
            rng, (out_channels, in_channels) + tuple(kernel_size), fan_in))
        self.bias = Parameter(uniform_init(rng, (out_channels,), fan_in))

    def __call__(self, x):
        return nk.conv3d(x, self.weight, self.bias, self.stride,
                         self.padding, self.dilation)

    def zero_(self):
        self.weight.data = np.zeros(self.weight.shape)
        self.bias.data = np.zeros(self.bias.shape)


class ConvTranspose3d(Module):
    '''Learned upsampling; kernel 2 / stride 2 doubles every extent'''

    def __init__(self, in_channels, out_channels, kernel_size=2, stride=2,
                 padding=0, rng=None):
        rng = make_rng(rng)
        if isinstance(kernel_size, int):
            kernel_size = (kernel_size,) * 3
        fan_in = in_channels * int(np.prod(kernel_size))
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(uniform_init(
            rng, (in_channels, out_channels) + tuple(kernel_size), fan_in))
        self.bias = Parameter(uniform_init(rng, (out_channels,), fan_in))

    def __call__(self, x):
        return nk.conv_transpose3d(x, self.weight, self.bias, self.stride,
                                   self.padding)
