# -*- coding: utf-8 -*-
import io
import itertools
import json
import os
from mock import Mock, patch
from unittest import TestCase

import numpy as np
import pytest

from .helpers import box_mask, example_dir

from hilbert_mamba.base import DimensionError, NumericError, ParameterError
from hilbert_mamba.config import RunConfig
from hilbert_mamba.evalkit import (
    ABLATION_FIELDS, AblationConfig, AblationRun, ClsMetrics, SegMetrics,
    classification_metrics, confusion_matrix, dice, hd95, iou,
    mean_seg_metrics, precision, run_ablation, run_single,
    segmentation_metrics, sensitivity, surface, write_ablation_csv,
    write_seg_metrics_csv)
from hilbert_mamba.importer import MaskVolume


EMPTY = np.zeros((4, 4, 4), dtype=np.uint8)


def random_mask(seed, shape, density):
    rng = np.random.default_rng(seed)
    return (rng.random(shape) < density).astype(np.uint8)


def random_pair(seed, density=0.4):
    shape = tuple(int(n) for n in
                  np.random.default_rng(seed).integers(4, 17, size=3))
    return (random_mask(seed + 1, shape, density),
            random_mask(seed + 2, shape, density))


def voxel_counts(pred, gt):
    tp = fp = fn = 0
    for idx in itertools.product(*map(range, pred.shape)):
        if pred[idx] and gt[idx]:
            tp += 1
        elif pred[idx]:
            fp += 1
        elif gt[idx]:
            fn += 1
    return tp, fp, fn


def all_pairs_hd95(pred, gt, spacing):
    scale = np.asarray(spacing)
    a = np.argwhere(surface(pred.astype(bool))) * scale
    b = np.argwhere(surface(gt.astype(bool))) * scale
    pairwise = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    directed = np.concatenate([pairwise.min(axis=1), pairwise.min(axis=0)])
    return np.percentile(directed, 95)


class TestOverlap(TestCase):

    def setUp(self):
        self.pred = box_mask((4, 4, 4), (0, 0, 0), (1, 1, 1))
        self.gt = box_mask((4, 4, 4), (0, 0, 0), (3, 1, 1))

    def test_by_hand(self):
        # tp 8, fp 0, fn 8
        assert dice(self.pred, self.gt) == pytest.approx(2.0 / 3.0)
        assert iou(self.pred, self.gt) == 0.5
        assert precision(self.pred, self.gt) == 1.0
        assert sensitivity(self.pred, self.gt) == 0.5

    def test_random_masks_against_voxel_counts(self):
        for seed in range(0, 600, 3):
            pred, gt = random_pair(seed)
            tp, fp, fn = voxel_counts(pred, gt)
            assert dice(pred, gt) == 2.0 * tp / (2 * tp + fp + fn)
            assert iou(pred, gt) == float(tp) / (tp + fp + fn)
            assert precision(pred, gt) == float(tp) / (tp + fp)
            assert sensitivity(pred, gt) == float(tp) / (tp + fn)

    def test_dice_follows_from_iou(self):
        for seed in range(0, 60, 3):
            pred, gt = random_pair(seed, density=0.2)
            j = iou(pred, gt)
            assert abs(dice(pred, gt) - 2 * j / (1 + j)) <= 1e-12

    def test_both_empty(self):
        for metric in (dice, iou, precision, sensitivity):
            assert metric(EMPTY, EMPTY) == 1.0

    def test_one_empty(self):
        for metric in (dice, iou, precision, sensitivity):
            assert metric(EMPTY, self.gt) == 0.0
            assert metric(self.pred, EMPTY) == 0.0

    def test_accepts_mask_volumes(self):
        assert dice(MaskVolume(self.gt), self.gt[np.newaxis]) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dice(self.pred, np.zeros((4, 4, 5)))


class TestSurfaceDistance(TestCase):

    def test_surface_of_a_cube(self):
        cube = box_mask((5, 5, 5), (1, 1, 1), (3, 3, 3)).astype(bool)
        shell = surface(cube)
        assert shell.sum() == 26
        assert not shell[2, 2, 2]

    def test_identical_masks(self):
        mask = box_mask((6, 6, 6), (1, 1, 1), (4, 3, 2))
        assert hd95(mask, mask) == 0.0

    def test_single_voxels(self):
        a = box_mask((4, 4, 4), (0, 0, 0), (0, 0, 0))
        b = box_mask((4, 4, 4), (0, 0, 3), (0, 0, 3))
        assert hd95(a, b) == pytest.approx(3.0)
        # spacing is per (D, H, W); the offset runs along W
        assert hd95(a, b, (1.0, 1.0, 2.0)) == pytest.approx(6.0)

    def test_random_masks_against_all_pairs(self):
        spacings = ((1.0, 1.0, 1.0), (2.0, 0.5, 1.5))
        for seed in range(0, 600, 3):
            pred, gt = random_pair(seed, density=0.3)
            spacing = spacings[seed % 2]
            assert abs(hd95(pred, gt, spacing) -
                       all_pairs_hd95(pred, gt, spacing)) <= 1e-9

    def test_undefined_when_empty(self):
        mask = box_mask((4, 4, 4), (0, 0, 0), (1, 1, 1))
        assert hd95(EMPTY, mask) is None
        assert hd95(mask, EMPTY) is None
        assert hd95(EMPTY, EMPTY) is None


class TestSegMetrics(TestCase):

    def test_uses_ground_truth_spacing(self):
        a = box_mask((4, 4, 4), (0, 0, 0), (0, 0, 0))
        b = MaskVolume(box_mask((4, 4, 4), (3, 0, 0), (3, 0, 0)),
                       spacing=(2.0, 1.0, 1.0))
        m = segmentation_metrics(a, b)
        assert m.hd95 == pytest.approx(6.0)
        assert m.dice == 0.0

    def test_mean_skips_undefined_hd95(self):
        mean = mean_seg_metrics([SegMetrics(1.0, 1.0, 1.0, 1.0, 2.0),
                                 SegMetrics(0.0, 0.0, 0.0, 0.0, None)])
        assert mean.dice == 0.5
        assert mean.hd95 == 2.0
        only_empty = mean_seg_metrics([SegMetrics(1.0, 1.0, 1.0, 1.0)])
        assert only_empty.hd95 is None

    def test_mean_of_nothing(self):
        with pytest.raises(ParameterError):
            mean_seg_metrics([])

    def test_csv(self):
        rows = [('s0', SegMetrics(1.0, 1.0, 1.0, 1.0, 0.0)),
                ('s1', SegMetrics(0.5, 0.25, 1.0, 0.5, None))]
        f = io.StringIO()
        write_seg_metrics_csv(rows, f)
        assert f.getvalue() == (
            'schema,id,dice,iou,precision,sensitivity,hd95\n'
            'hvlm.segmetrics/1,s0,1.0,1.0,1.0,1.0,0.0\n'
            'hvlm.segmetrics/1,s1,0.5,0.25,1.0,0.5,\n'
            'hvlm.segmetrics/1,mean,0.75,0.625,1.0,0.75,0.0\n')


class TestClassificationMetrics(TestCase):

    def test_confusion_matrix(self):
        cm = confusion_matrix([0, 0, 1, 2], [0, 1, 1, 2])
        assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [0, 0, 1]]

    def test_macro_average(self):
        m = classification_metrics([0, 0, 1, 2], [0, 1, 1, 2])
        assert m.acc == 0.75
        assert m.precision == pytest.approx(2.5 / 3.0)
        assert m.recall == pytest.approx(2.5 / 3.0)
        assert m.f1 == pytest.approx(2.5 / 3.0)

    def test_absent_classes_are_skipped(self):
        m = classification_metrics([0, 0], [0, 0])
        assert m.to_dict() == {'acc': 1.0, 'recall': 1.0, 'precision': 1.0,
                               'f1': 1.0}

    def test_all_wrong(self):
        m = classification_metrics([0, 1], [1, 0])
        assert m.acc == 0.0
        assert m.f1 == 0.0

    def test_validation(self):
        with pytest.raises(ParameterError):
            classification_metrics([], [])
        with pytest.raises(DimensionError):
            confusion_matrix([0, 1], [0])


class TestAblationConfig(TestCase):

    def test_default_grid(self):
        runs = AblationConfig().runs()
        assert len(runs) == 36
        assert [r.index for r in runs] == list(range(36))
        assert runs[0] == AblationRun(0, 'hilbert', True, 0.0, True, 0)
        assert runs[-1] == AblationRun(35, 'raster', False, 0.5, True, 2)

    def test_from_dict(self):
        config = AblationConfig.from_dict({
            'scan_orders': ['hilbert', 'raster'], 'lams': 0.3, 'seeds': [5],
            'memory': [True], 'base': {'steps': 2}})
        runs = config.runs()
        assert len(runs) == 2
        assert {r.lam for r in runs} == {0.3}
        assert config.base == {'steps': 2}

    def test_validation(self):
        with pytest.raises(ParameterError):
            AblationConfig.from_dict({'orders': ['hilbert']})
        with pytest.raises(ParameterError):
            AblationConfig(scan_orders=('zigzag',))
        with pytest.raises(ParameterError):
            AblationConfig(seeds=())


class TestAblationRuns(TestCase):

    def base(self):
        config = RunConfig().to_dict()
        config.pop('seed')
        return {'config': config, 'data_seed': 7}

    @patch('hilbert_mamba.evalkit.synth_dataset')
    def test_failures_are_recorded(self, synth_dataset):
        synth_dataset.side_effect = NumericError('non-finite loss in batch 3')
        run = AblationRun(4, 'morton', False, 0.5, True, 1)
        row = run_single(run, self.base())
        assert set(row) == set(ABLATION_FIELDS)
        assert row['error'] == 'NumericError: non-finite loss in batch 3'
        assert row['scan_order'] == 'morton'
        assert row['dice'] is None

    @patch('hilbert_mamba.evalkit.evaluate_classifier')
    @patch('hilbert_mamba.evalkit.fit_classifier')
    @patch('hilbert_mamba.evalkit.PromptClassifier')
    @patch('hilbert_mamba.evalkit.evaluate_segmenter')
    @patch('hilbert_mamba.evalkit.fit_segmenter')
    @patch('hilbert_mamba.evalkit.HilbertMambaSegmenter')
    @patch('hilbert_mamba.evalkit.synth_dataset')
    def test_any_failure_stays_in_its_row(self, synth_dataset, segmenter,
                                          fit_segmenter, evaluate_segmenter,
                                          classifier, fit_classifier,
                                          evaluate_classifier):
        synth_dataset.return_value = Mock(samples=[])
        fit_segmenter.side_effect = [ValueError('bad batch'), [0.1]]
        evaluate_segmenter.return_value = [
            ('s0', SegMetrics(0.75, 0.6, 0.8, 0.7, 2.0))]
        evaluate_classifier.return_value = (ClsMetrics(1.0, 1.0, 1.0, 1.0),
                                            [])
        config = AblationConfig(scan_orders=('hilbert',), memory=(True,),
                                lams=(0.5,), seeds=(0, 1))
        failed, done = run_ablation(config)
        assert failed['error'] == 'ValueError: bad batch'
        assert failed['dice'] is None
        assert done['error'] is None
        assert done['dice'] == 0.75
        assert done['f1'] == 1.0

    @patch('hilbert_mamba.evalkit.run_single')
    def test_rows_are_stored_in_run_order(self, run_single):
        run_single.side_effect = lambda run, base: {
            'index': run.index, 'seed': run.seed, 'data_seed': base[
                'data_seed']}
        config = AblationConfig(scan_orders=('hilbert',), memory=(True,),
                                lams=(0.5,), seeds=(0, 1))
        with example_dir() as directory:
            workdir = os.path.join(directory, 'runs')
            rows = run_ablation(config, workdir=workdir)
            assert sorted(os.listdir(workdir)) == ['run_0000.json',
                                                   'run_0001.json']
            with open(os.path.join(workdir, 'run_0001.json')) as f:
                assert json.load(f) == {'index': 1, 'seed': 1,
                                        'data_seed': 7}
        assert [r['index'] for r in rows] == [0, 1]

    def test_csv(self):
        row = dict((k, None) for k in ABLATION_FIELDS)
        row.update(schema='hvlm.ablation/1', index=0, scan_order='hilbert',
                   memory=True, lam=0.5, use_prompt=True, seed=0, dice=0.5)
        f = io.StringIO()
        write_ablation_csv([row], f)
        header, line = f.getvalue().splitlines()
        assert header.split(',') == list(ABLATION_FIELDS)
        assert line.startswith(
            'hvlm.ablation/1,0,hilbert,True,0.5,True,0,0.5,')
