# -*- coding: utf-8 -*-
import logging
from mock import Mock, patch
from unittest import TestCase

import numpy as np
import pytest

from .helpers import SLOW

from hilbert_mamba import numkernel as nk
from hilbert_mamba.base import NumericError, ParameterError
from hilbert_mamba.config import RunConfig
from hilbert_mamba.evalkit import (
    AblationRun, dice, evaluate_classifier, run_single)
from hilbert_mamba.net import HilbertMambaSegmenter, SegModelConfig
from hilbert_mamba.prompt_fusion import (
    ClassifierConfig, DiagnosisLabel, PromptClassifier)
from hilbert_mamba.synth import SynthSpec, synth_dataset
from hilbert_mamba.training import (
    _batches, classifier_loss, fit_classifier, fit_segmenter,
    make_optimizer, predict_mask)


logger = logging.getLogger(__name__)


def tiny_classifier(**kwargs):
    options = dict(d_model=4, d_state=2, visual_grid=2, text_tokens=16,
                   query_tokens=1)
    options.update(kwargs)
    return PromptClassifier(ClassifierConfig(**options))


def tiny_samples(n=4, seed=0, extent=8):
    return list(synth_dataset(SynthSpec(n=n, extent=extent), seed).samples)


class TestBatches(TestCase):

    def test_sizes_and_determinism(self):
        first = list(_batches(5, 4, 2, seed=1))
        assert len(first) == 4
        assert all(len(b) == 2 and b == sorted(b) for b in first)
        assert all(len(set(b)) == 2 for b in first)
        assert first == list(_batches(5, 4, 2, seed=1))

    def test_batch_is_capped_by_the_data(self):
        assert list(_batches(2, 1, 8, seed=0)) == [[0, 1]]

    def test_no_samples(self):
        with pytest.raises(ParameterError):
            list(_batches(0, 1, 1, seed=0))


class TestOptimizer(TestCase):

    def test_known(self):
        model = tiny_classifier()
        assert isinstance(make_optimizer(model, 'adam'), nk.Adam)
        assert isinstance(make_optimizer(model, 'sgd', 0.1), nk.SGD)

    def test_unknown(self):
        with pytest.raises(ParameterError):
            make_optimizer(tiny_classifier(), 'rmsprop')


class TestClassifierTraining(TestCase):

    def test_loss_uses_ground_truth_sentences(self):
        samples = tiny_samples(2)
        batch = [(s.volume, s.mask, DiagnosisLabel(s.label))
                 for s in samples]
        model = tiny_classifier()
        plain = classifier_loss(model, batch, 0.0, 0.1).item()
        joint = classifier_loss(model, batch, 0.5, 0.1).item()
        assert np.isfinite(plain) and joint > plain

    def test_without_prompt_the_loss_is_cross_entropy(self):
        samples = tiny_samples(1)
        batch = [(s.volume, s.mask, DiagnosisLabel(s.label))
                 for s in samples]
        model = tiny_classifier(use_prompt=False)
        # no prompt, nothing to contrast: lam drops out
        assert np.isfinite(classifier_loss(model, batch, 0.5, 0.1).item())

    def test_fit_marks_the_model_trained(self):
        model = tiny_classifier()
        losses = fit_classifier(model, tiny_samples(4), steps=2,
                                batch_size=2)
        assert len(losses) == 2
        assert model.trained

    @patch('hilbert_mamba.training.classifier_loss')
    def test_non_finite_loss(self, classifier_loss):
        classifier_loss.return_value = Mock(item=Mock(return_value=np.nan))
        with pytest.raises(NumericError) as excinfo:
            fit_classifier(tiny_classifier(), tiny_samples(2), steps=1)
        assert 'batch 0' in str(excinfo.value)


class TestSegmenterTraining(TestCase):

    def setUp(self):
        self.model = HilbertMambaSegmenter(SegModelConfig(
            base_channels=2, d_state=2, memory_depth=1))

    @patch('hilbert_mamba.training.train_step')
    def test_batches_are_passed_through(self, train_step):
        train_step.return_value = 0.25
        samples = [Mock(volume=i, mask=-i) for i in range(3)]
        losses = fit_segmenter(self.model, samples, steps=2, batch_size=3)
        assert losses == [0.25, 0.25]
        batch = train_step.call_args_list[0][0][0]
        assert batch == [(0, 0), (1, -1), (2, -2)]
        assert train_step.call_args_list[1][1] == {'batch_id': 1}

    def test_predict_mask_keeps_spacing(self):
        sample = tiny_samples(1, extent=16)[0]
        mask = predict_mask(self.model, sample.volume)
        assert mask.shape == (1,) + sample.volume.extents
        assert mask.spacing == sample.volume.spacing

    @pytest.mark.skipif(not SLOW, reason='set HVLM_SLOW=1')
    def test_fit(self):
        losses = fit_segmenter(self.model, tiny_samples(2, extent=16),
                               steps=3)
        assert len(losses) == 3
        assert all(np.isfinite(losses))


BENCHMARK = {'config': {'extent': 32, 'n_train': 60, 'n_test': 20},
             'data_seed': 7}


def benchmark_row(scan_order='hilbert', seed=0, use_prompt=True):
    run = AblationRun(index=0, scan_order=scan_order, memory=True, lam=0.5,
                      use_prompt=use_prompt, seed=seed)
    row = run_single(run, BENCHMARK)
    assert row['error'] is None, row['error']
    return row


def classifier_accuracy(use_prompt, seed):
    cfg = RunConfig(seed=seed, use_prompt=use_prompt, extent=32)
    samples = list(synth_dataset(cfg.synth_spec(), 7).samples)
    train, test = samples[:cfg.n_train], samples[cfg.n_train:]
    model = PromptClassifier(cfg.classifier_config())
    fit_classifier(model, train, cfg.cls_steps, cfg.cls_lr,
                   cfg.cls_batch_size, cfg.lam, cfg.tau, seed=seed)
    metrics, _ = evaluate_classifier(model, test)
    return metrics.acc


@pytest.mark.skipif(not SLOW, reason='set HVLM_SLOW=1')
class TestToyBenchmarks(TestCase):

    def test_single_sample_overfit(self):
        sample = tiny_samples(1, seed=3, extent=16)[0]
        model = HilbertMambaSegmenter(SegModelConfig())
        fit_segmenter(model, [sample], steps=200, lr=3e-3)
        assert dice(predict_mask(model, sample.volume), sample.mask) >= 0.95

    def test_full_model_segments_the_benchmark(self):
        assert benchmark_row()['dice'] >= 0.70

    def test_hilbert_scan_is_not_worse_than_raster(self):
        paired = [(benchmark_row('hilbert', seed)['dice'],
                   benchmark_row('raster', seed)['dice'])
                  for seed in range(3)]
        logger.info('hilbert vs raster dice per seed: %s', paired)
        hilbert, raster = np.mean(paired, axis=0)
        assert hilbert >= raster - 0.01

    def test_prompt_does_not_hurt_accuracy(self):
        fused = [classifier_accuracy(True, seed) for seed in range(3)]
        image_only = [classifier_accuracy(False, seed) for seed in range(3)]
        logger.info('fused %s vs image-only %s', fused, image_only)
        assert np.mean(fused) >= np.mean(image_only)
