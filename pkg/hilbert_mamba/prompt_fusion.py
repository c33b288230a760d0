'''Mask-derived prompts for lesion classification.

A predicted mask is summarised as LesionAttributes, rendered to a fixed
sentence and embedded byte by byte.  A small conv encoder turns the mask
into visual tokens, cross-modal fusion merges the two streams into
R_enhanced, and the classifier reads R_enhanced, the image tokens and a
few learned query tokens with one Hilbert-Mamba scan.

Training minimises

    J = CE(logits, y) + lam * InfoNCE(pool(R_enhanced), pool(R_reference))

where R_reference encodes the sentence of the ground-truth mask.
'''
from dataclasses import dataclass
from enum import Enum
import itertools

import numpy as np

from . import numkernel as nk
from .base import ContractError, DimensionError, ParameterError, StateError
from .blocks import (
    HilbertMambaBlock, HilbertMambaCrossAttention, HmbConfig, HmcaConfig,
    to_tokens)
from .hilbert_codec import map_for
from .layers import Conv3d, LayerNorm, Linear, make_rng, uniform_init
from .numkernel import Module, Parameter


class DiagnosisLabel(Enum):
    '''Synthetic lesion classes; ties in argmax go to the lowest index'''

    GLIOMA = 'glioma-like'
    FCD = 'fcd-like'
    INFARCT = 'infarct-like'

    @property
    def index(self):
        return list(DiagnosisLabel).index(self)

    @classmethod
    def from_index(cls, i):
        return list(cls)[i]


# word for the low / high third of each axis, in label order
AXIS_WORDS = (
    ('y', 'anterior', 'posterior'),
    ('x', 'left', 'right'),
    ('z', 'inferior', 'superior'),
)

LOCATION_LABELS = tuple(
    '-'.join(w for w in words if w) or 'center'
    for words in itertools.product(
        *[(lo, None, hi) for _, lo, hi in AXIS_WORDS]))

NO_LESION = 'no lesion'


def _third(c, n):
    return min(2, int(3 * (c + 0.5) / n))


def location_label(centroid, extents):
    '''Region of a 3 x 3 x 3 partition; centroid and extents are (x, y, z)'''
    thirds = dict(zip('xyz', (_third(c, n) for c, n in zip(centroid,
                                                           extents))))
    words = []
    for axis, lo, hi in AXIS_WORDS:
        t = thirds[axis]
        if t != 1:
            words.append(lo if t == 0 else hi)
    return '-'.join(words) or 'center'


@dataclass(frozen=True)
class LesionAttributes(object):
    volume_voxels: int
    volume_ml: float
    centroid: tuple
    location_label: str
    bbox: tuple

    @property
    def is_empty(self):
        return self.volume_voxels == 0

    def to_dict(self):
        return {
            'volume_voxels': self.volume_voxels,
            'volume_ml': self.volume_ml,
            'centroid': list(self.centroid) if self.centroid else None,
            'location': self.location_label,
            'bbox': [list(c) for c in self.bbox] if self.bbox else None,
        }


def _mask_array(mask):
    data = np.asarray(getattr(mask, 'data', mask))
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise DimensionError('expected a single-channel mask, got '
                                 '{0}'.format(data.shape))
        data = data[0]
    if data.ndim != 3:
        raise DimensionError('expected a D x H x W mask, got {0}'.format(
            data.shape))
    return data != 0


def extract_attributes(mask, spacing=None):
    '''Count, centroid, location and bounding box of the on-voxels

    Coordinates are (x, y, z) with x along W and z along D; ``spacing``
    is mm per (D, H, W) axis and defaults to the mask's own.'''
    if spacing is None:
        spacing = getattr(mask, 'spacing', (1.0, 1.0, 1.0))
    m = _mask_array(mask)
    count = int(m.sum())
    if count == 0:
        return LesionAttributes(0, 0.0, None, NO_LESION, None)
    zz, yy, xx = np.nonzero(m)
    centroid = (float(xx.mean()), float(yy.mean()), float(zz.mean()))
    depth, height, width = m.shape
    bbox = ((int(xx.min()), int(yy.min()), int(zz.min())),
            (int(xx.max()), int(yy.max()), int(zz.max())))
    volume_ml = count * float(np.prod(spacing)) / 1000.0
    return LesionAttributes(
        volume_voxels=count, volume_ml=volume_ml, centroid=centroid,
        location_label=location_label(centroid, (width, height, depth)),
        bbox=bbox)


def render_sentence(attrs):
    if attrs.is_empty:
        return 'No lesion detected.'
    lo, hi = attrs.bbox
    return ('Lesion detected in the {0}; volume {1:.3f} ml; bounding box '
            'x {2}-{5}, y {3}-{6}, z {4}-{7}.').format(
                attrs.location_label, attrs.volume_ml, *(lo + hi))


def encode_bytes(sentence, max_len):
    ids = np.frombuffer(sentence.encode('utf-8'), dtype=np.uint8)[:max_len]
    if ids.size == 0:
        raise ParameterError('cannot embed an empty sentence')
    return ids.astype(np.int64)


class TextEmbedding(Module):
    '''Byte-level token table plus learned positions'''

    VOCAB = 256

    def __init__(self, d, max_len, rng=None):
        rng = make_rng(rng)
        self.max_len = max_len
        self.table = Parameter(rng.normal(0.0, 0.5, size=(self.VOCAB, d)))
        self.positions = Parameter(rng.normal(0.0, 0.1, size=(max_len, d)))

    def __call__(self, sentence):
        ids = encode_bytes(sentence, self.max_len)
        return nk.take(self.table, ids, axis=0) + self.positions[:len(ids)]


def average_pool(x, grid):
    '''C x D x H x W -> C x grid x grid x grid by block averaging'''
    c, extents = x.shape[0], x.shape[1:]
    if any(n % grid for n in extents):
        raise DimensionError('extents {0} do not split into a {1}-grid'.format(
            extents, grid))
    f = [n // grid for n in extents]
    blocks = nk.reshape(x, (c, grid, f[0], grid, f[1], grid, f[2]))
    return nk.mean(blocks, axis=(2, 4, 6))


class TokenEncoder(Module):
    '''Two strided convs, grid pooling, tokens in Hilbert order'''

    def __init__(self, in_channels, d, grid, rng=None):
        rng = make_rng(rng)
        self.grid = grid
        self.conv1 = Conv3d(in_channels, max(1, d // 2), 3, stride=2,
                            padding=1, rng=rng)
        self.conv2 = Conv3d(max(1, d // 2), d, 3, stride=2, padding=1,
                            rng=rng)

    def __call__(self, x):
        x = nk.gelu(self.conv2(nk.gelu(self.conv1(x))))
        pooled = average_pool(x, self.grid)
        return to_tokens(pooled, map_for('hilbert', (self.grid,) * 3))


def _mask_tensor(mask):
    return nk.constant(_mask_array(mask).astype(np.float64)[np.newaxis])


def encode_visual_tokens(mask, encoder):
    return encoder(_mask_tensor(mask))


@dataclass
class FusedPrompt(object):
    visual_tokens: nk.Tensor
    text_tokens: nk.Tensor
    R_enhanced: nk.Tensor

    @property
    def length(self):
        return self.R_enhanced.shape[0]


class PromptFusion(Module):
    '''Cross-modal fusion over 1D token streams'''

    def __init__(self, d, d_state=8, chunk=64, text_as_query=True, rng=None):
        self.text_as_query = text_as_query
        self.hmca = HilbertMambaCrossAttention(HmcaConfig(
            d_model=d, mlp_hidden=2 * d, d_state=d_state, dims=1,
            chunk=chunk), rng)

    def __call__(self, visual, textual):
        if visual.ndim != 2 or textual.ndim != 2 or \
                visual.shape[1] != textual.shape[1]:
            raise DimensionError('prompt streams differ in width: {0} vs '
                                 '{1}'.format(visual.shape, textual.shape))
        if self.text_as_query:
            fused = self.hmca.forward_sequence(textual, visual)
            R = nk.concat([visual, fused], axis=0)
        else:
            fused = self.hmca.forward_sequence(visual, textual)
            R = nk.concat([fused, textual], axis=0)
        return FusedPrompt(visual, textual, R)

    def zero_(self):
        self.hmca.zero_()


def fuse_prompt(visual, textual, fusion):
    return fusion(visual, textual).R_enhanced


@dataclass
class ClassifierConfig(object):
    d_model: int = 16
    d_state: int = 8
    visual_grid: int = 4
    text_tokens: int = 96
    query_tokens: int = 4
    in_channels: int = 2
    use_prompt: bool = True
    text_as_query: bool = True
    chunk: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.d_model < 2:
            raise ParameterError('d_model must be at least 2')
        if self.query_tokens < 1 or self.text_tokens < 1 or \
                self.visual_grid < 1:
            raise ParameterError('token counts must be positive')


@dataclass
class ClassifierOutput(object):
    logits: nk.Tensor
    prompt: FusedPrompt = None

    @property
    def probabilities(self):
        return nk.softmax(self.logits).data


class PromptClassifier(Module):

    def __init__(self, cfg=None):
        cfg = cfg or ClassifierConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.image_encoder = TokenEncoder(cfg.in_channels, d, cfg.visual_grid,
                                          rng)
        self.mask_encoder = TokenEncoder(1, d, cfg.visual_grid, rng)
        self.text_embedding = TextEmbedding(d, cfg.text_tokens, rng)
        self.fusion = PromptFusion(d, cfg.d_state, cfg.chunk,
                                   cfg.text_as_query, rng)
        self.query = Parameter(uniform_init(rng, (cfg.query_tokens, d), d))
        self.mixer = HilbertMambaBlock(HmbConfig(
            d_model=d, d_state=cfg.d_state, dims=1, chunk=cfg.chunk), rng)
        self.norm = LayerNorm(d)
        self.head = Linear(d, len(DiagnosisLabel), rng)
        self.trained = False

    def encode_text(self, sentence):
        return self.text_embedding(sentence)

    def build_prompt(self, mask, sentence=None):
        if sentence is None:
            sentence = render_sentence(extract_attributes(mask))
        visual = encode_visual_tokens(mask, self.mask_encoder)
        return self.fusion(visual, self.encode_text(sentence))

    def __call__(self, volume, mask=None):
        x = nk.as_tensor(getattr(volume, 'data', volume))
        image = self.image_encoder(x)
        prompt = None
        streams = [image, self.query]
        if self.cfg.use_prompt:
            if mask is None:
                raise ContractError('the fused-prompt classifier needs a mask')
            prompt = self.build_prompt(mask)
            streams.insert(0, prompt.R_enhanced)
        mixed = self.mixer.forward_sequence(nk.concat(streams, axis=0))
        q = self.norm(mixed[-self.cfg.query_tokens:])
        pooled = nk.mean(q, axis=0, keepdims=True)
        logits = nk.reshape(self.head(pooled), (len(DiagnosisLabel),))
        return ClassifierOutput(logits=logits, prompt=prompt)


def _pooled(representations):
    if isinstance(representations, nk.Tensor) and representations.ndim == 3:
        return nk.mean(representations, axis=1)
    return nk.stack([nk.mean(r, axis=0) for r in representations], axis=0)


def l2_normalize(x, eps=1e-12):
    '''Row-wise x / sqrt(sum(x^2) + eps)'''
    sq = nk.tsum(x * x, axis=1, keepdims=True)
    inv = nk.power(sq + eps, -0.5)
    return x * nk.broadcast_to(inv, x.shape)


def cross_entropy(logits, y_true):
    y = np.asarray(y_true, dtype=np.int64)
    n = logits.shape[0]
    picked = nk.log_softmax(logits)[np.arange(n), y]
    return nk.mul(nk.mean(picked), -1.0)


def info_nce(z, ref, tau):
    '''Positives on the diagonal, the rest of the batch as negatives'''
    n = z.shape[0]
    sim = nk.matmul(l2_normalize(z), nk.transpose(l2_normalize(ref)))
    logp = nk.log_softmax(nk.mul(sim, 1.0 / tau))
    return nk.mul(nk.mean(logp[np.arange(n), np.arange(n)]), -1.0)


def jvlm_loss(pred_logits, y_true, R_enhanced, R_reference, lam, tau=0.1):
    if lam < 0:
        raise ParameterError('lam must be non-negative, got {0}'.format(lam))
    if tau <= 0:
        raise ParameterError('tau must be positive, got {0}'.format(tau))
    ce = cross_entropy(pred_logits, y_true)
    if lam == 0:
        return ce
    z, ref = _pooled(R_enhanced), _pooled(R_reference)
    if z.shape[0] < 2:
        raise ContractError('the consistency loss needs a batch of at least '
                            '2 for negatives, got {0}'.format(z.shape[0]))
    if z.shape != ref.shape:
        raise DimensionError('pooled representations differ: {0} vs '
                             '{1}'.format(z.shape, ref.shape))
    return ce + nk.mul(info_nce(z, ref, tau), float(lam))


def classify(volume, mask, model):
    '''Returns (DiagnosisLabel, probabilities)'''
    if model is None or not getattr(model, 'trained', False):
        raise StateError('classifier is untrained; train it or load a '
                         'checkpoint first')
    with nk.no_grad():
        out = model(volume, mask)
    probabilities = out.probabilities
    # np.argmax keeps the first maximum
    return DiagnosisLabel.from_index(int(np.argmax(probabilities))), \
        probabilities
