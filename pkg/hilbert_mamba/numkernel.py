'''Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds its output with ``_result``, recording the parent
tensors and a closure mapping the output cotangent to one cotangent per
parent.  ``Tensor.backward`` walks the recorded graph once in reverse
topological order and then releases it; a second backward through the
same graph is a ContractError.

Broadcasting is deliberately narrow: two operands must have identical
shapes, or one of them must be a scalar.  Anything else has to be
spelled out with ``broadcast_to``.
'''
from collections import OrderedDict
import contextlib
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .base import ContractError, DimensionError, NumericError, as_tuple


_state = {
    'grad_enabled': True,
    'debug': os.environ.get('HVLM_DEBUG', '') == '1',
}


def set_debug(flag):
    _state['debug'] = bool(flag)


def is_grad_enabled():
    return _state['grad_enabled']


@contextlib.contextmanager
def no_grad():
    previous = _state['grad_enabled']
    _state['grad_enabled'] = False
    try:
        yield
    finally:
        _state['grad_enabled'] = previous


class Tensor(object):

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64, order='C')
        if not np.isfinite(arr).all():
            raise NumericError(
                'tensor of shape {0} contains NaN or Inf'.format(arr.shape))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return _wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return '<Tensor shape={0} requires_grad={1}>'.format(
            self.shape, self.requires_grad)

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and not isinstance(shape[0], int):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        '''Populate ``grad`` on every leaf tensor this scalar depends on'''
        if self.size != 1:
            raise ContractError(
                'backward needs a scalar loss, got shape {0}'.format(
                    self.shape))
        if not self.requires_grad:
            raise ContractError(
                'loss does not depend on any tensor requiring grad')
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._parents = ()
            node._backward = None
            node._released = True


class Parameter(Tensor):
    '''A learnable tensor; its name is assigned by the owning Module'''

    def __init__(self, data, name=None):
        super(Parameter, self).__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return '<Parameter {0} shape={1}>'.format(self.name, self.shape)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._released:
            raise ContractError(
                'graph already consumed by an earlier backward pass')
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _wrap(data):
    out = Tensor.__new__(Tensor)
    # asarray keeps 0-d scalars 0-d
    out.data = np.asarray(data, dtype=np.float64, order='C')
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out._released = False
    return out


def _result(data, parents, backward, opname):
    out = _wrap(data)
    if _state['debug'] and not np.isfinite(out.data).all():
        raise NumericError('{0} produced NaN or Inf'.format(opname))
    if _state['grad_enabled'] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return _wrap(x)


def constant(data):
    '''A tensor that never requires grad and skips the finiteness check'''
    return _wrap(data)


def zeros(shape):
    return _wrap(np.zeros(shape))


def ones(shape):
    return _wrap(np.ones(shape))


def _check_pair(a, b, opname):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError('{0}: cannot combine shapes {1} and {2}'.format(
        opname, a.shape, b.shape))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, 'add')

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.data + b.data, (a, b), backward, 'add')


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, 'sub')

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result(a.data - b.data, (a, b), backward, 'sub')


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, 'mul')

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))
    return _result(a.data * b.data, (a, b), backward, 'mul')


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, 'div')
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _result(out, (a, b), backward, 'div')


def power(x, exponent):
    '''Elementwise power with a constant exponent'''
    x = as_tensor(x)
    p = float(exponent)

    def backward(g):
        return (g * p * np.power(x.data, p - 1.0),)
    return _result(np.power(x.data, p), (x,), backward, 'power')


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError('matmul: cannot multiply {0} by {1}'.format(
            a.shape, b.shape))

    def backward(g):
        return g @ b.data.T, a.data.T @ g
    return _result(a.data @ b.data, (a, b), backward, 'matmul')


def sigmoid(x):
    x = as_tensor(x)
    out = special.expit(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)
    return _result(out, (x,), backward, 'sigmoid')


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)
    return _result(out, (x,), backward, 'tanh')


def relu(x):
    x = as_tensor(x)

    def backward(g):
        return (g * (x.data > 0),)
    return _result(np.maximum(x.data, 0.0), (x,), backward, 'relu')


def gelu(x):
    '''Exact GELU, x * Phi(x)'''
    x = as_tensor(x)
    cdf = special.ndtr(x.data)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x.data * pdf),)
    return _result(x.data * cdf, (x,), backward, 'gelu')


def softplus(x):
    x = as_tensor(x)

    def backward(g):
        return (g * special.expit(x.data),)
    return _result(np.logaddexp(0.0, x.data), (x,), backward, 'softplus')


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)
    return _result(out, (x,), backward, 'exp')


def log(x):
    x = as_tensor(x)

    def backward(g):
        return (g / x.data,)
    return _result(np.log(x.data), (x,), backward, 'log')


def softmax(x):
    '''Softmax over the last axis'''
    x = as_tensor(x)
    out = special.softmax(x.data, axis=-1)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _result(out, (x,), backward, 'softmax')


def log_softmax(x):
    x = as_tensor(x)
    out = special.log_softmax(x.data, axis=-1)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)
    return _result(out, (x,), backward, 'log_softmax')


ELEMENTWISE = {
    'add': add,
    'sub': sub,
    'mul': mul,
    'sigmoid': sigmoid,
    'tanh': tanh,
    'relu': relu,
    'softmax': softmax,
}


def elementwise(op, *inputs):
    '''Dispatch one of the named elementwise ops'''
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise DimensionError('unknown elementwise op {0!r}'.format(op))
    return fn(*inputs)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError('reshape: cannot view {0} as {1}'.format(
            x.shape, shape))

    def backward(g):
        return (g.reshape(x.shape),)
    return _result(out, (x,), backward, 'reshape')


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)
    return _result(np.transpose(x.data, axes), (x,), backward, 'transpose')


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _result(out, (x,), backward, 'sum')


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def broadcast_to(x, shape):
    '''Expand size-1 axes explicitly; ranks must already agree'''
    x = as_tensor(x)
    shape = tuple(shape)
    if len(shape) != x.ndim or any(
            s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise DimensionError('broadcast_to: cannot expand {0} to {1}'.format(
            x.shape, shape))
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s != t)

    def backward(g):
        return (g.sum(axis=axes, keepdims=True),)
    return _result(np.broadcast_to(x.data, shape), (x,), backward,
                   'broadcast_to')


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError('concat: incompatible shapes {0}'.format(
            [t.shape for t in tensors]))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _result(out, tensors, backward, 'concat')


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = set(t.shape for t in tensors)
    if len(shapes) != 1:
        raise DimensionError('stack: shapes differ {0}'.format(
            [t.shape for t in tensors]))
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:])
                for t in tensors]
    return concat(expanded, axis=axis)


def take(x, indices, axis=0):
    '''Gather along one axis; the gradient scatters back with add'''
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros(x.shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)
    return _result(np.take(x.data, indices, axis=axis), (x,), backward,
                   'take')


def getitem(x, index):
    x = as_tensor(x)

    def backward(g):
        full = np.zeros(x.shape)
        np.add.at(full, index, g)
        return (full,)
    return _result(x.data[index], (x,), backward, 'getitem')


def pad(x, widths):
    '''Zero padding, widths as for numpy.pad'''
    x = as_tensor(x)
    widths = tuple(tuple(w) for w in widths)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))

    def backward(g):
        return (g[crop],)
    return _result(np.pad(x.data, widths), (x,), backward, 'pad')


def _conv_geometry(spatial, kernel, stride, padding, dilation, opname):
    out = []
    for n, k, s, p, d in zip(spatial, kernel, stride, padding, dilation):
        effective = d * (k - 1) + 1
        if n + 2 * p < effective:
            raise DimensionError(
                '{0}: kernel {1} (dilation {2}) larger than padded input '
                '{3}'.format(opname, kernel, dilation, spatial))
        out.append((n + 2 * p - effective) // s + 1)
    return tuple(out)


def _windows(xp, kernel, stride, dilation, out_spatial):
    effective = tuple(d * (k - 1) + 1 for k, d in zip(kernel, dilation))
    win = sliding_window_view(xp, effective, axis=(1, 2, 3))
    win = win[:, ::stride[0], ::stride[1], ::stride[2],
              ::dilation[0], ::dilation[1], ::dilation[2]]
    return win[:, :out_spatial[0], :out_spatial[1], :out_spatial[2]]


def _scatter_windows(g, w, padded_shape, stride, dilation):
    '''Adjoint of the windowed contraction: accumulate w^T g into xp'''
    c_out, c_in, kd, kh, kw = w.shape
    _, do, ho, wo = g.shape
    xp = np.zeros((c_in,) + tuple(padded_shape))
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                z0, y0, x0 = i * dilation[0], j * dilation[1], k * dilation[2]
                xp[:,
                   z0:z0 + stride[0] * (do - 1) + 1:stride[0],
                   y0:y0 + stride[1] * (ho - 1) + 1:stride[1],
                   x0:x0 + stride[2] * (wo - 1) + 1:stride[2]] += \
                    np.tensordot(w[:, :, i, j, k], g, axes=([0], [0]))
    return xp


def _conv_params(shape, stride, padding, dilation):
    kernel = tuple(shape[2:])
    return (kernel, as_tuple(stride, 3, 'stride'),
            as_tuple(padding, 3, 'padding'), as_tuple(dilation, 3, 'dilation'))


def conv3d(x, w, bias=None, stride=1, padding=0, dilation=1):
    '''Direct 3D convolution (cross-correlation) of one C x D x H x W volume

    ``w`` has shape C_out x C_in x kD x kH x kW.
    '''
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 5 or x.shape[0] != w.shape[1]:
        raise DimensionError('conv3d: input {0} does not match kernel '
                             '{1}'.format(x.shape, w.shape))
    kernel, stride, padding, dilation = _conv_params(
        w.shape, stride, padding, dilation)
    out_spatial = _conv_geometry(
        x.shape[1:], kernel, stride, padding, dilation, 'conv3d')
    widths = ((0, 0),) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, widths)
    win = _windows(xp, kernel, stride, dilation, out_spatial)
    out = np.tensordot(w.data, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (w.shape[0],):
            raise DimensionError('conv3d: bias {0} for {1} output '
                                 'channels'.format(bias.shape, w.shape[0]))
        out = out + bias.data[:, None, None, None]
        parents.append(bias)

    def backward(g):
        dxp = _scatter_windows(g, w.data, xp.shape[1:], stride, dilation)
        crop = (slice(None),) + tuple(
            slice(p, p + n) for p, n in zip(padding, x.shape[1:]))
        dw = np.tensordot(g, win, axes=([1, 2, 3], [1, 2, 3]))
        grads = [dxp[crop], dw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return tuple(grads)
    return _result(out, parents, backward, 'conv3d')


def conv_transpose3d(y, w, bias=None, stride=1, padding=0, dilation=1,
                     output_padding=0):
    '''Adjoint of conv3d with the same kernel layout C_out x C_in x k^3

    Maps a C_out x Do x Ho x Wo volume back to C_in channels.
    '''
    y, w = as_tensor(y), as_tensor(w)
    if y.ndim != 4 or w.ndim != 5 or y.shape[0] != w.shape[0]:
        raise DimensionError('conv_transpose3d: input {0} does not match '
                             'kernel {1}'.format(y.shape, w.shape))
    kernel, stride, padding, dilation = _conv_params(
        w.shape, stride, padding, dilation)
    output_padding = as_tuple(output_padding, 3, 'output_padding')
    spatial = []
    for n, k, s, p, d, op in zip(y.shape[1:], kernel, stride, padding,
                                 dilation, output_padding):
        if op >= s:
            raise DimensionError('conv_transpose3d: output_padding {0} must '
                                 'be smaller than stride {1}'.format(op, s))
        size = (n - 1) * s + d * (k - 1) + 1 - 2 * p + op
        if size < 1:
            raise DimensionError('conv_transpose3d: empty output for input '
                                 '{0}'.format(y.shape))
        spatial.append(size)
    padded = tuple(n + 2 * p for n, p in zip(spatial, padding))
    outp = _scatter_windows(y.data, w.data, padded, stride, dilation)
    crop = (slice(None),) + tuple(
        slice(p, p + n) for p, n in zip(padding, spatial))
    out = outp[crop]
    parents = [y, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (w.shape[1],):
            raise DimensionError('conv_transpose3d: bias {0} for {1} output '
                                 'channels'.format(bias.shape, w.shape[1]))
        out = out + bias.data[:, None, None, None]
        parents.append(bias)

    def backward(g):
        widths = ((0, 0),) + tuple((p, p) for p in padding)
        gp = np.pad(g, widths)
        win = _windows(gp, kernel, stride, dilation, y.shape[1:])
        dy = np.tensordot(w.data, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
        dw = np.tensordot(y.data, win, axes=([1, 2, 3], [1, 2, 3]))
        grads = [dy, dw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return tuple(grads)
    return _result(out, parents, backward, 'conv_transpose3d')


def transposed_conv3d(y, w, bias=None, stride=1, padding=0, dilation=1,
                      output_padding=0):
    return conv_transpose3d(y, w, bias, stride, padding, dilation,
                            output_padding)


class Module(object):
    '''Base class for anything holding Parameters

    Parameters and sub-modules are discovered from instance attributes
    (including lists of modules) in assignment order, so names are
    dotted attribute paths and unique within a model.
    '''

    def named_parameters(self, prefix=''):
        for attr, value in vars(self).items():
            name = prefix + attr
            if isinstance(value, Parameter):
                value.name = name
                yield name, value
            elif isinstance(value, Module):
                for item in value.named_parameters(name + '.'):
                    yield item
            elif isinstance(value, (list, tuple)):
                for i, sub in enumerate(value):
                    if isinstance(sub, Module):
                        for item in sub.named_parameters(
                                '{0}.{1}.'.format(name, i)):
                            yield item
                    elif isinstance(sub, Parameter):
                        sub.name = '{0}.{1}'.format(name, i)
                        yield sub.name, sub

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return OrderedDict(
            (name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state):
        own = OrderedDict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ContractError('state mismatch: missing {0}, unexpected '
                                '{1}'.format(missing, unexpected))
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError('{0}: checkpoint shape {1}, model shape '
                                     '{2}'.format(name, value.shape, p.shape))
            p.data = value.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def parameter_count(self):
        return sum(p.size for p in self.parameters())


class SGD(object):

    def __init__(self, params, lr=1e-2):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


class Adam(object):

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * p.grad
            self.v[i] = self.beta2 * self.v[i] + \
                (1.0 - self.beta2) * p.grad * p.grad
            step = self.lr * (self.m[i] / c1) / (
                np.sqrt(self.v[i] / c2) + self.eps)
            p.data = p.data - step
