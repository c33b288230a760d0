'''End-to-end segmentation network.

Two modality encoders produce four-scale pyramids (spatial extents
halving at every scale), cross-modal fusion merges them scale by scale,
memory modules refine each scale slice by slice, and a dual-path
decoder turns the result into coarse and refined logits which the head
combines into mask probabilities.

Scale j of the refinement path is fused as

    f_4 = Conv(Cat(f_4^t, f_4^{t-1}))
    f_j = Conv(Cat(f_j^t, f_j^{t-1}, UP(f_{j+1})))    j in {1, 2, 3}

where f_j^t is the main-path feature, f_j^{t-1} the memory-bank feature
(the memory state before each slice) and UP a transposed convolution.
'''
from dataclasses import dataclass, field
import logging

import numpy as np

from . import numkernel as nk
from .base import ContractError, DimensionError, NumericError, ParameterError
from .blocks import (
    HilbertMambaBlock, HilbertMambaCrossAttention, HmbConfig, HmcaConfig)
from .hilbert_codec import SCHEMES
from .layers import Conv3d, ConvTranspose3d
from .memory_module import (
    MemoryConfig, MemoryStack, join_slices, split_slices, zeros_like_slices)
from .numkernel import Module


logger = logging.getLogger(__name__)

SCALES = 4


@dataclass
class SegModelConfig(object):
    modalities: int = 2
    base_channels: int = 4
    scales: int = SCALES
    d_state: int = 8
    scan_order: str = 'hilbert'
    hilbert_orders: list = None
    memory: bool = True
    memory_depth: int = 2
    gate_kernel: int = 1
    chunk: int = 64
    bidirectional: bool = False
    hmca_interaction: str = 'attention'
    mlp_ratio: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.scales != SCALES:
            raise ParameterError('the decoder fusion needs exactly {0} '
                                 'scales, got {1}'.format(SCALES, self.scales))
        if self.modalities != 2:
            raise ParameterError('exactly two modalities are supported, got '
                                 '{0}'.format(self.modalities))
        if self.scan_order not in SCHEMES:
            raise ParameterError('unknown scan order {0!r}'.format(
                self.scan_order))
        if self.hilbert_orders is not None and \
                len(self.hilbert_orders) != SCALES:
            raise ParameterError('hilbert_orders needs one entry per scale')

    def channels(self, j):
        '''Channel width at scale j (1 = finest)'''
        return self.base_channels * 2 ** (j - 1)

    def order(self, j):
        if self.hilbert_orders is None:
            return None
        return self.hilbert_orders[j - 1]

    def block_config(self, j):
        return HmbConfig(
            d_model=self.channels(j), d_state=self.d_state,
            scheme=self.scan_order, dims=3, order=self.order(j),
            chunk=self.chunk, bidirectional=self.bidirectional)


class EncoderPyramid(object):
    '''Features f_1 (finest) .. f_4 (coarsest)'''

    def __init__(self, features):
        if len(features) != SCALES:
            raise ContractError('a pyramid has {0} scales, got {1}'.format(
                SCALES, len(features)))
        self.features = list(features)

    def __getitem__(self, j):
        return self.features[j - 1]

    def __iter__(self):
        return iter(self.features)

    def __len__(self):
        return len(self.features)

    @property
    def shapes(self):
        return [f.shape for f in self.features]


class ModalityEncoder(Module):
    '''Strided convolution + Hilbert-Mamba block per scale'''

    def __init__(self, cfg, rng):
        self.downs = []
        self.blocks = []
        in_channels = 1
        for j in range(1, SCALES + 1):
            self.downs.append(Conv3d(in_channels, cfg.channels(j), 3,
                                     stride=2, padding=1, rng=rng))
            self.blocks.append(HilbertMambaBlock(cfg.block_config(j), rng))
            in_channels = cfg.channels(j)

    def __call__(self, x):
        features = []
        for down, block in zip(self.downs, self.blocks):
            x = block(nk.gelu(down(x)))
            features.append(x)
        return EncoderPyramid(features)


class MultiScaleContext(Module):
    '''Parallel dilated 3x3x3 convolutions (rates 1, 2, 3), summed'''

    RATES = (1, 2, 3)

    def __init__(self, channels, rng):
        self.branches = [
            Conv3d(channels, channels, 3, padding=r, dilation=r, rng=rng)
            for r in self.RATES]

    def __call__(self, x):
        total = self.branches[0](x)
        for branch in self.branches[1:]:
            total = total + branch(x)
        return nk.gelu(total)


class DualPathDecoder(Module):

    def __init__(self, cfg, rng):
        self.cfg = cfg
        c = [cfg.channels(j) for j in range(1, SCALES + 1)]
        self.main_blocks = [HilbertMambaBlock(cfg.block_config(j), rng)
                            for j in range(1, SCALES + 1)]
        self.main_ups = [ConvTranspose3d(c[j], c[j - 1], rng=rng)
                         for j in range(1, SCALES)]
        self.coarse_out = ConvTranspose3d(c[0], 1, rng=rng)
        self.fusions = [
            Conv3d((2 if j == SCALES else 3) * c[j - 1], c[j - 1], 3,
                   padding=1, rng=rng)
            for j in range(1, SCALES + 1)]
        self.refine_ups = [ConvTranspose3d(c[j], c[j - 1], rng=rng)
                           for j in range(1, SCALES)]
        self.contexts = [MultiScaleContext(c[j - 1], rng)
                         for j in range(1, SCALES + 1)]
        self.refined_out = ConvTranspose3d(c[0], 1, rng=rng)
        self.fusion_arity = {}

    def main_path(self, fused):
        x = self.main_blocks[SCALES - 1](fused[SCALES])
        for j in range(SCALES - 1, 0, -1):
            x = self.main_blocks[j - 1](fused[j] + self.main_ups[j - 1](x))
        return self.coarse_out(x)

    def refinement_path(self, fused, bank):
        g = None
        for j in range(SCALES, 0, -1):
            inputs = [fused[j], bank[j]]
            if j < SCALES:
                inputs.append(self.refine_ups[j - 1](g))
            self.fusion_arity[j] = len(inputs)
            g = self.contexts[j - 1](
                nk.gelu(self.fusions[j - 1](nk.concat(inputs, axis=0))))
        return self.refined_out(g)

    def __call__(self, fused, bank):
        if bank is None or len(bank) != SCALES or \
                any(b is None for b in bank):
            raise ContractError('the refinement path needs memory-bank '
                                'features at all {0} scales'.format(SCALES))
        for j in range(1, SCALES + 1):
            if bank[j].shape != fused[j].shape:
                raise DimensionError('scale {0}: bank {1} vs features '
                                     '{2}'.format(j, bank[j].shape,
                                                  fused[j].shape))
        return self.main_path(fused), self.refinement_path(fused, bank)


@dataclass
class SegOutput(object):
    coarse_logits: nk.Tensor
    refined_logits: nk.Tensor
    final_logits: nk.Tensor
    probabilities: nk.Tensor
    extras: dict = field(default_factory=dict)

    def mask(self, threshold=0.5):
        return (self.probabilities.data[0] >= threshold).astype(np.uint8)


def _volume_tensor(volume):
    data = getattr(volume, 'data', volume)
    return nk.as_tensor(data)


class HilbertMambaSegmenter(Module):

    def __init__(self, cfg=None):
        cfg = cfg or SegModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoders = [ModalityEncoder(cfg, rng)
                         for _ in range(cfg.modalities)]
        self.fusion = [
            HilbertMambaCrossAttention(HmcaConfig(
                d_model=cfg.channels(j),
                mlp_hidden=cfg.mlp_ratio * cfg.channels(j),
                d_state=cfg.d_state, scheme=cfg.scan_order,
                order=cfg.order(j), chunk=cfg.chunk,
                bidirectional=cfg.bidirectional,
                interaction=cfg.hmca_interaction), rng)
            for j in range(1, SCALES + 1)]
        self.memory = [
            MemoryStack(MemoryConfig(
                channels=cfg.channels(j), d_state=cfg.d_state,
                scheme=cfg.scan_order, chunk=cfg.chunk,
                gate_kernel=cfg.gate_kernel, depth=cfg.memory_depth), rng)
            for j in range(1, SCALES + 1)] if cfg.memory else []
        self.decoder = DualPathDecoder(cfg, rng)
        self.head = Conv3d(2, 1, 1, rng=rng)
        self.trained = False

    def check_input(self, x):
        if x.ndim != 4 or x.shape[0] != self.cfg.modalities:
            raise ParameterError('expected a {0} x D x H x W volume, got '
                                 '{1}'.format(self.cfg.modalities, x.shape))
        factor = 2 ** SCALES
        if any(e % factor for e in x.shape[1:]):
            raise ParameterError('spatial extents {0} must be multiples of '
                                 '{1}'.format(x.shape[1:], factor))

    def encode(self, volume):
        x = _volume_tensor(volume)
        self.check_input(x)
        return tuple(encoder(x[m:m + 1])
                     for m, encoder in enumerate(self.encoders))

    def fuse_modalities(self, p1, p2):
        if p1.shapes != p2.shapes:
            raise DimensionError('pyramid shapes differ: {0} vs {1}'.format(
                p1.shapes, p2.shapes))
        return EncoderPyramid([
            hmca(p1[j], p2[j]) for j, hmca in enumerate(self.fusion, 1)])

    def infuse_memory(self, fused):
        '''Returns (main-path pyramid, memory-bank pyramid)'''
        if not self.memory:
            return fused, EncoderPyramid(
                [zeros_like_slices(f) for f in fused])
        main, bank = [], []
        for j, stack in enumerate(self.memory, 1):
            refined, previous, _ = stack(split_slices(fused[j]))
            main.append(join_slices(refined))
            bank.append(join_slices(previous))
        return EncoderPyramid(main), EncoderPyramid(bank)

    def decode_dual_path(self, fused, bank):
        return self.decoder(fused, bank)

    def head_logits(self, coarse_logits, refined_logits):
        if coarse_logits.shape != refined_logits.shape:
            raise DimensionError('head inputs differ: {0} vs {1}'.format(
                coarse_logits.shape, refined_logits.shape))
        return self.head(nk.concat([coarse_logits, refined_logits], axis=0))

    def seg_head(self, coarse_logits, refined_logits):
        return nk.sigmoid(self.head_logits(coarse_logits, refined_logits))

    def __call__(self, volume):
        p1, p2 = self.encode(volume)
        fused = self.fuse_modalities(p1, p2)
        main, bank = self.infuse_memory(fused)
        coarse, refined = self.decode_dual_path(main, bank)
        logits = self.head_logits(coarse, refined)
        return SegOutput(coarse_logits=coarse, refined_logits=refined,
                         final_logits=logits,
                         probabilities=nk.sigmoid(logits))


def encode(volume, model):
    return model.encode(volume)


def fuse_modalities(p1, p2, model):
    return model.fuse_modalities(p1, p2)


def decode_dual_path(fused, bank, model):
    return model.decode_dual_path(fused, bank)


def seg_head(coarse_logits, refined_logits, model):
    return model.seg_head(coarse_logits, refined_logits)


def _target(mask, shape):
    data = np.asarray(getattr(mask, 'data', mask), dtype=np.float64)
    data = data.reshape(shape)
    return nk.constant(data)


def bce_with_logits(logits, target):
    y = _target(target, logits.shape)
    return nk.mean(nk.softplus(logits) - logits * y)


def soft_dice_loss(probabilities, target, smooth=1e-6):
    y = _target(target, probabilities.shape)
    intersection = nk.tsum(probabilities * y)
    total = nk.tsum(probabilities) + nk.tsum(y)
    return 1.0 - (2.0 * intersection + smooth) / (total + smooth)


def head_loss(logits, target):
    return bce_with_logits(logits, target) + \
        soft_dice_loss(nk.sigmoid(logits), target)


def segmentation_loss(out, target):
    '''BCE + Dice on the final head and, as deep supervision, on both
    decoder paths, equally weighted'''
    return head_loss(out.final_logits, target) + \
        head_loss(out.coarse_logits, target) + \
        head_loss(out.refined_logits, target)


def train_step(batch, model, optimizer, batch_id=0):
    '''One Adam step on a batch of (volume, mask) pairs; returns the loss'''
    if not batch:
        raise ParameterError('empty training batch')
    optimizer.zero_grad()
    total = None
    for volume, mask in batch:
        loss = segmentation_loss(model(volume), mask)
        total = loss if total is None else total + loss
    total = nk.mul(total, 1.0 / len(batch))
    value = total.item()
    if not np.isfinite(value):
        raise NumericError('non-finite loss in batch {0}'.format(batch_id))
    total.backward()
    optimizer.step()
    model.trained = True
    return value
