# -*- coding: utf-8 -*-
import os
from mock import patch
from unittest import TestCase

import numpy as np
import pytest

from .helpers import example_dir, example_file, random_tensor

from hilbert_mamba.base import FormatError, ParameterError, StateError
from hilbert_mamba.config import (
    RunConfig, load_model, load_run_config, read_sidecar, sidecar_name,
    write_sidecar)
from hilbert_mamba.importer import save_checkpoint
from hilbert_mamba.prompt_fusion import ClassifierConfig, PromptClassifier


class TestRunConfig(TestCase):

    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.seed is None
        assert cfg.hilbert_variant == 'hilbert'
        assert cfg.lam == 0.5 and cfg.tau == 0.1

    def test_validation(self):
        for bad in ({'hilbert_variant': 'zigzag'},
                    {'hmca_interaction': 'conv'},
                    {'optimizer': 'lbfgs'},
                    {'gate_kernel': 2},
                    {'lam': -0.1},
                    {'tau': 0.0},
                    {'jobs': 0},
                    {'steps': -1}):
            with pytest.raises(ParameterError):
                RunConfig(**bad)

    def test_unknown_keys(self):
        with pytest.raises(ParameterError) as excinfo:
            RunConfig.from_dict({'steps': 3, 'epochs': 2, 'alpha': 1})
        assert 'alpha, epochs' in str(excinfo.value)

    def test_value_types(self):
        for bad in ({'steps': 'abc'}, {'memory': 'yes'}, {'steps': True},
                    {'lr': 'fast'}, {'hilbert_variant': 3}):
            with pytest.raises(ParameterError):
                RunConfig.from_dict(bad)

    def test_integers_are_accepted_as_floats(self):
        cfg = RunConfig.from_dict({'lr': 1, 'tau': 2})
        assert isinstance(cfg.lr, float) and cfg.lr == 1.0
        assert cfg.tau == 2.0

    def test_from_filename(self):
        with example_file(b'steps: 5\nhilbert_variant: morton\n',
                          '.yaml') as fname:
            cfg = RunConfig.from_filename(fname)
        assert cfg.steps == 5
        assert cfg.hilbert_variant == 'morton'

    def test_empty_file(self):
        with example_file(b'', '.yaml') as fname:
            assert RunConfig.from_filename(fname) == RunConfig()

    def test_file_must_hold_a_mapping(self):
        with example_file(b'- 1\n- 2\n', '.yaml') as fname:
            with pytest.raises(ParameterError):
                RunConfig.from_filename(fname)

    def test_merged_ignores_unset_flags(self):
        cfg = RunConfig(steps=5).merged(steps=None, lr=0.1)
        assert cfg.steps == 5
        assert cfg.lr == 0.1

    def test_derived_configs(self):
        cfg = RunConfig(seed=3, channels=2, hilbert_variant='raster',
                        memory=False, cls_width=8)
        seg = cfg.seg_model_config()
        assert (seg.base_channels, seg.scan_order, seg.memory, seg.seed) == \
            (2, 'raster', False, 3)
        assert cfg.classifier_config().d_model == 8
        assert cfg.synth_spec().n == 80
        assert cfg.synth_spec(4).n == 4


class TestSeed(TestCase):

    @patch.dict(os.environ, {'HVLM_SEED': '11'})
    def test_from_environment(self):
        assert RunConfig().resolved().seed == 11

    @patch.dict(os.environ, {'HVLM_SEED': '11'})
    def test_flag_wins(self):
        assert load_run_config(seed=4).seed == 4

    @patch.dict(os.environ, {'HVLM_SEED': '11'})
    def test_file_beats_environment(self):
        with example_file(b'seed: 2\n', '.yaml') as fname:
            assert load_run_config(fname).seed == 2
            assert load_run_config(fname, seed=9).seed == 9

    @patch.dict(os.environ, clear=True)
    def test_default(self):
        assert load_run_config().seed == 0

    @patch.dict(os.environ, {'HVLM_SEED': 'abc'})
    def test_bad_environment(self):
        with pytest.raises(ParameterError):
            RunConfig().resolved()


class TestSidecar(TestCase):

    def setUp(self):
        self.cfg = ClassifierConfig(d_model=4, d_state=2, visual_grid=2,
                                    text_tokens=16, query_tokens=1, seed=5)

    def test_round_trip(self):
        model = PromptClassifier(self.cfg)
        volume = random_tensor((2, 8, 8, 8))
        mask = np.zeros((8, 8, 8))
        mask[2:4, 2:4, 2:4] = 1
        with example_dir() as directory:
            ckpt = os.path.join(directory, 'cls.hvck')
            save_checkpoint(model, ckpt)
            write_sidecar(ckpt, model)
            assert os.path.exists(sidecar_name(ckpt))
            kind, config = read_sidecar(ckpt)
            assert kind == 'classifier'
            assert config['seed'] == 5
            loaded = load_model(ckpt, 'classifier')
        assert loaded.trained
        assert loaded.cfg == self.cfg
        assert np.array_equal(loaded(volume, mask).logits.data,
                              model(volume, mask).logits.data)

    def test_wrong_kind(self):
        model = PromptClassifier(self.cfg)
        with example_dir() as directory:
            ckpt = os.path.join(directory, 'cls.hvck')
            save_checkpoint(model, ckpt)
            write_sidecar(ckpt, model)
            with pytest.raises(StateError):
                load_model(ckpt, 'segmenter')

    def test_missing_files(self):
        with example_dir() as directory:
            ckpt = os.path.join(directory, 'none.hvck')
            with pytest.raises(StateError):
                load_model(ckpt)
            save_checkpoint(PromptClassifier(self.cfg), ckpt)
            with pytest.raises(StateError):
                load_model(ckpt)

    def test_unusable_model_config(self):
        with example_dir() as directory:
            ckpt = os.path.join(directory, 'x.hvck')
            save_checkpoint({}, ckpt)
            with open(sidecar_name(ckpt), 'w') as f:
                f.write('kind: classifier\nconfig: {width: 4}\n')
            with pytest.raises(FormatError):
                load_model(ckpt)

    def test_unknown_kind(self):
        with example_dir() as directory:
            ckpt = os.path.join(directory, 'x.hvck')
            with open(sidecar_name(ckpt), 'w') as f:
                f.write('kind: regressor\n')
            with pytest.raises(StateError):
                read_sidecar(ckpt)
