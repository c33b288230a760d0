'''Fitting loops for the segmenter and the prompt classifier'''
import logging

import numpy as np

from . import numkernel as nk
from .base import NumericError, ParameterError
from .importer import MaskVolume
from .net import train_step
from .prompt_fusion import (
    DiagnosisLabel, extract_attributes, jvlm_loss, render_sentence)


logger = logging.getLogger(__name__)

OPTIMIZERS = {
    'adam': nk.Adam,
    'sgd': nk.SGD,
}


def make_optimizer(model, name='adam', lr=1e-3):
    try:
        cls = OPTIMIZERS[name]
    except KeyError:
        raise ParameterError('unknown optimizer {0!r}; expected one of '
                             '{1}'.format(name, sorted(OPTIMIZERS)))
    return cls(model.parameters(), lr=lr)


def _batches(n, steps, batch_size, seed):
    if n < 1:
        raise ParameterError('no training samples')
    rng = np.random.default_rng(seed)
    size = min(batch_size, n)
    for _ in range(steps):
        yield sorted(rng.choice(n, size=size, replace=False).tolist())


def _log_progress(step, steps, loss, log_every):
    if (step + 1) % log_every == 0 or step + 1 == steps:
        logger.info('step %d/%d loss=%.4f', step + 1, steps, loss)


def fit_segmenter(model, samples, steps, lr=1e-3, batch_size=1, seed=0,
                  optimizer='adam', log_every=10):
    '''Train on (volume, mask) pairs drawn from ``samples``; returns losses'''
    pairs = [(s.volume, s.mask) for s in samples]
    opt = make_optimizer(model, optimizer, lr)
    losses = []
    for step, idx in enumerate(_batches(len(pairs), steps, batch_size, seed)):
        loss = train_step([pairs[i] for i in idx], model, opt, batch_id=step)
        losses.append(loss)
        _log_progress(step, steps, loss, log_every)
    return losses


def predict_mask(model, volume, threshold=0.5):
    with nk.no_grad():
        out = model(volume)
    return MaskVolume(out.mask(threshold)[np.newaxis],
                      getattr(volume, 'spacing', (1.0, 1.0, 1.0)))


def classifier_loss(model, batch, lam, tau):
    '''J over a batch of (volume, mask, DiagnosisLabel) triples'''
    logits, enhanced, reference = [], [], []
    for volume, mask, label in batch:
        out = model(volume, mask)
        logits.append(out.logits)
        if out.prompt is not None:
            enhanced.append(out.prompt.R_enhanced)
            sentence = render_sentence(extract_attributes(mask))
            reference.append(model.encode_text(sentence).detach())
    y = [label.index for _, _, label in batch]
    weight = lam if enhanced else 0.0
    return jvlm_loss(nk.stack(logits, axis=0), y, enhanced, reference,
                     weight, tau)


def fit_classifier(model, samples, steps, lr=1e-3, batch_size=4, lam=0.5,
                   tau=0.1, seed=0, optimizer='adam', log_every=10):
    '''Train on ground-truth masks; returns losses'''
    triples = [(s.volume, s.mask, DiagnosisLabel(s.label)) for s in samples]
    opt = make_optimizer(model, optimizer, lr)
    losses = []
    for step, idx in enumerate(_batches(len(triples), steps, batch_size,
                                        seed)):
        opt.zero_grad()
        loss = classifier_loss(model, [triples[i] for i in idx], lam, tau)
        if not np.isfinite(loss.item()):
            raise NumericError('non-finite loss in batch {0}'.format(step))
        loss.backward()
        opt.step()
        model.trained = True
        losses.append(loss.item())
        _log_progress(step, steps, losses[-1], log_every)
    return losses
