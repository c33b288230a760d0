'''Central finite-difference checks for every differentiable piece.

Each case builds fresh random inputs from a seed, contracts the output
with a fixed random cotangent and compares backward() against

    (f(x + h e_i) - f(x - h e_i)) / 2h

The error is max|analytic - numeric| / max(|analytic|, |numeric|, atol)
taken over all checked entries.  Large parameters are spot-checked on a
random subset of entries.
'''
from dataclasses import dataclass
import logging

import numpy as np

from . import numkernel as nk
from .base import ParameterError
from .blocks import (
    FeedForward, HilbertMambaBlock, HilbertMambaCrossAttention, HmbConfig,
    HmcaConfig)
from .layers import Linear
from .memory_module import GateWeights, MemoryConfig, MemoryInfusedModule, \
    gate_update
from .net import bce_with_logits, soft_dice_loss
from .prompt_fusion import jvlm_loss
from .ssm_core import (
    SsmParams, linear_recurrence, selective_scan_chunked,
    selective_scan_sequential)


logger = logging.getLogger(__name__)

POINTWISE_TOLERANCE = 1e-5
COMPOSITE_TOLERANCE = 1e-4
STEP = 1e-6
ATOL = 1e-8


@dataclass
class GradcheckResult(object):
    name: str
    seed: int
    max_rel_error: float
    threshold: float

    @property
    def passed(self):
        return self.max_rel_error <= self.threshold

    def to_dict(self):
        return {'name': self.name, 'seed': self.seed,
                'max_rel_error': self.max_rel_error,
                'threshold': self.threshold, 'passed': self.passed}


def relative_error(analytic, numeric, atol=ATOL):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0), atol)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numerical_grad(fn, tensor, h=STEP, entries=None):
    '''Central differences of scalar fn() w.r.t. the given flat entries'''
    if entries is None:
        entries = range(tensor.size)
    original = tensor.data
    out = np.zeros(len(entries))
    with nk.no_grad():
        for k, i in enumerate(entries):
            bumped = original.copy()
            bumped.flat[i] += h
            tensor.data = bumped
            up = fn().item()
            bumped = original.copy()
            bumped.flat[i] -= h
            tensor.data = bumped
            down = fn().item()
            out[k] = (up - down) / (2 * h)
    tensor.data = original
    return out


def check_gradients(fn, inputs, h=STEP, max_entries=None, rng=None):
    '''Largest relative error over ``inputs`` (leaf tensors)'''
    for t in inputs:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        entries = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            entries = np.sort(rng.choice(t.size, max_entries, replace=False))
        numeric = numerical_grad(fn, t, h, entries.tolist())
        worst = max(worst, relative_error(analytic.flat[entries], numeric))
    return worst


def _leaf(rng, shape, scale=1.0):
    return nk.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _projected(build, rng):
    '''Contract the output with a random cotangent drawn on first use'''
    cot = {}

    def fn():
        out = build()
        if 'g' not in cot:
            cot['g'] = nk.constant(rng.normal(size=out.shape))
        return nk.tsum(out * cot['g'])
    return fn


def _pointwise_cases(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    pos = nk.Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    m, n = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    return [
        ('add', lambda: a + b, [a, b]),
        ('sub', lambda: a - b, [a, b]),
        ('mul', lambda: a * b, [a, b]),
        ('div', lambda: a / pos, [a, pos]),
        ('power', lambda: nk.power(pos, 1.5), [pos]),
        ('matmul', lambda: nk.matmul(m, n), [m, n]),
        ('sigmoid', lambda: nk.sigmoid(a), [a]),
        ('tanh', lambda: nk.tanh(a), [a]),
        ('relu', lambda: nk.relu(a), [a]),
        ('gelu', lambda: nk.gelu(a), [a]),
        ('softplus', lambda: nk.softplus(a), [a]),
        ('exp', lambda: nk.exp(a), [a]),
        ('log', lambda: nk.log(pos), [pos]),
        ('softmax', lambda: nk.softmax(a), [a]),
        ('log_softmax', lambda: nk.log_softmax(a), [a]),
    ]


def _mlp_case(rng):
    layers = [Linear(5, 6, rng), Linear(6, 6, rng), Linear(6, 2, rng)]
    x = _leaf(rng, (4, 5))

    def build():
        h = nk.tanh(layers[0](x))
        h = nk.tanh(layers[1](h))
        return layers[2](h)
    params = [p for layer in layers for p in layer.parameters()]
    return [('mlp3', build, [x] + params)]


def _conv_cases(rng):
    x = _leaf(rng, (2, 4, 4, 4))
    w = _leaf(rng, (3, 2, 3, 3, 3), 0.3)
    bias = _leaf(rng, (3,))
    y = _leaf(rng, (3, 2, 2, 2))
    wt = _leaf(rng, (3, 2, 2, 2, 2), 0.3)
    return [
        ('conv3d', lambda: nk.conv3d(x, w, bias, padding=1), [x, w, bias]),
        ('conv3d_strided',
         lambda: nk.conv3d(x, w, None, stride=2, padding=1), [x, w]),
        ('conv3d_dilated',
         lambda: nk.conv3d(x, w, None, padding=2, dilation=2), [x, w]),
        ('conv_transpose3d',
         lambda: nk.conv_transpose3d(y, wt, None, stride=2), [y, wt]),
    ]


def _ssm_cases(rng):
    a = nk.Tensor(rng.uniform(0.2, 0.95, size=(12, 3, 2)), requires_grad=True)
    b = _leaf(rng, (12, 3, 2))
    x = _leaf(rng, (16, 4))
    params = SsmParams(4, 3, rng)
    return [
        ('linear_recurrence', lambda: linear_recurrence(a, b), [a, b]),
        ('linear_recurrence_chunked', lambda: linear_recurrence(a, b, 5),
         [a, b]),
        ('selective_scan', lambda: selective_scan_sequential(x, params),
         [x] + params.parameters()),
        ('selective_scan_chunked',
         lambda: selective_scan_chunked(x, params, 3),
         [x] + params.parameters()),
    ]


def _block_cases(rng):
    x = _leaf(rng, (4, 4, 4, 4))
    q, kv = _leaf(rng, (4, 2, 4, 4)), _leaf(rng, (4, 2, 4, 4))
    hmb = HilbertMambaBlock(HmbConfig(4, d_state=3), rng)
    ffn = FeedForward(4, 8, rng)
    hmca = HilbertMambaCrossAttention(HmcaConfig(4, mlp_hidden=8, d_state=3),
                                      rng)
    mamba = HilbertMambaCrossAttention(
        HmcaConfig(4, mlp_hidden=8, d_state=3, interaction='mamba'), rng)
    return [
        ('hmb', lambda: hmb(x), [x] + hmb.parameters()),
        ('ffn', lambda: ffn(x), [x] + ffn.parameters()),
        ('hmca', lambda: hmca(q, kv), [q, kv] + hmca.parameters()),
        ('hmca_mamba', lambda: mamba(q, kv), [q, kv] + mamba.parameters()),
    ]


def _memory_cases(rng):
    f, m = _leaf(rng, (3, 4, 4)), _leaf(rng, (3, 4, 4))
    gates = GateWeights(3, 1, rng)
    conv_gates = GateWeights(3, 3, rng)
    module = MemoryInfusedModule(MemoryConfig(3, d_state=2), rng)
    slices = [_leaf(rng, (3, 4, 4)) for _ in range(3)]

    def rollout():
        refined, _, state = module(slices)
        return nk.stack(refined + [state.M], axis=0)
    return [
        ('gate_update', lambda: gate_update(f, m, gates)[0],
         [f, m] + gates.parameters()),
        ('gate_update_3x3', lambda: gate_update(f, m, conv_gates)[0],
         [f, m] + conv_gates.parameters()),
        ('memory_rollout', rollout, slices + module.parameters()),
    ]


def _loss_cases(rng):
    logits = _leaf(rng, (2, 2, 4, 4))
    target = (rng.uniform(size=(2, 2, 4, 4)) > 0.5).astype(np.float64)
    cls_logits = _leaf(rng, (4, 3))
    y = rng.integers(0, 3, size=4)
    enhanced = [_leaf(rng, (5, 6)) for _ in range(4)]
    reference = [nk.constant(rng.normal(size=(3, 6))) for _ in range(4)]
    return [
        ('bce_with_logits', lambda: bce_with_logits(logits, target),
         [logits]),
        ('soft_dice', lambda: soft_dice_loss(nk.sigmoid(logits), target),
         [logits]),
        ('jvlm', lambda: jvlm_loss(cls_logits, y, enhanced, reference, 1.0),
         [cls_logits] + enhanced),
    ]


SUITES = {
    'elementwise': (_pointwise_cases, POINTWISE_TOLERANCE),
    'matmul': (_mlp_case, POINTWISE_TOLERANCE),
    'conv': (_conv_cases, COMPOSITE_TOLERANCE),
    'ssm': (_ssm_cases, COMPOSITE_TOLERANCE),
    'blocks': (_block_cases, COMPOSITE_TOLERANCE),
    'memory': (_memory_cases, COMPOSITE_TOLERANCE),
    'losses': (_loss_cases, COMPOSITE_TOLERANCE),
}

# cases held tighter than their suite
CASE_TOLERANCE = {'ffn': POINTWISE_TOLERANCE}

TARGETS = tuple(SUITES) + ('all',)


def run_suite(target, seeds=(0,), max_entries=12):
    '''One GradcheckResult per (case, seed)'''
    if target not in TARGETS:
        raise ParameterError('unknown gradcheck target {0!r}; expected one '
                             'of {1}'.format(target, TARGETS))
    names = list(SUITES) if target == 'all' else [target]
    results = []
    for name in names:
        make_cases, threshold = SUITES[name]
        for seed in seeds:
            rng = np.random.default_rng(seed)
            for case, build, inputs in make_cases(rng):
                fn = _projected(build, rng)
                error = check_gradients(fn, inputs, max_entries=max_entries,
                                        rng=rng)
                result = GradcheckResult(
                    case, seed, error, CASE_TOLERANCE.get(case, threshold))
                logger.debug('%s seed=%d rel=%.3e', case, seed, error)
                results.append(result)
    return results
