from unittest import TestCase

import numpy as np
import pytest

from .helpers import example_dir

from hilbert_mamba.base import ParameterError
from hilbert_mamba.importer import Dataset, MaskVolume, Volume
from hilbert_mamba.prompt_fusion import DiagnosisLabel
from hilbert_mamba.synth import (
    SynthSpec, class_counts, generate_sample, synth_dataset)


SMALL = SynthSpec(n=6, extent=16)


class TestSynthSpec(TestCase):

    def test_default_radius_scales_with_extent(self):
        assert SynthSpec(extent=32).radius_range == \
            pytest.approx((2.88, 5.76))
        assert SynthSpec(extent=16).radius_range == \
            pytest.approx((1.44, 2.88))

    def test_validation(self):
        with pytest.raises(ParameterError):
            SynthSpec(n=0)
        with pytest.raises(ParameterError):
            SynthSpec(extent=4)
        with pytest.raises(ParameterError):
            SynthSpec(extent=16, radius_range=(2, 6))
        with pytest.raises(ParameterError):
            SynthSpec(class_mix=(1, 1))
        with pytest.raises(ParameterError):
            SynthSpec(contrast_range=(0.0, 1.0))
        with pytest.raises(ParameterError):
            SynthSpec(noise=-0.1)

    def test_class_counts_largest_remainder(self):
        counts = class_counts(SynthSpec(n=10, class_mix=(1, 1, 1)))
        assert [counts[label] for label in DiagnosisLabel] == [4, 3, 3]
        counts = class_counts(SynthSpec(n=5, class_mix=(2, 0, 1)))
        assert [counts[label] for label in DiagnosisLabel] == [3, 0, 2]


class TestGenerators(TestCase):

    def test_every_class_has_a_lesion_inside_the_volume(self):
        for label in DiagnosisLabel:
            for seed in range(3):
                volume, mask = generate_sample(
                    label, np.random.default_rng(seed), SMALL)
                assert isinstance(volume, Volume)
                assert isinstance(mask, MaskVolume)
                assert volume.shape == (2, 16, 16, 16)
                assert mask.shape == (1, 16, 16, 16)
                assert mask.voxel_count > 0

    def test_values_survive_the_disk_format(self):
        volume, _ = generate_sample(DiagnosisLabel.GLIOMA,
                                    np.random.default_rng(0), SMALL)
        assert Volume.from_bytes(volume.to_bytes()) == volume

    def test_modality_contrast(self):
        def lesion_mean(label, channel):
            volume, mask = generate_sample(label, np.random.default_rng(1),
                                           SynthSpec(extent=32, noise=0.0))
            return volume.data[channel][mask.mask].mean()
        assert lesion_mean(DiagnosisLabel.GLIOMA, 1) > \
            lesion_mean(DiagnosisLabel.GLIOMA, 0)
        assert lesion_mean(DiagnosisLabel.INFARCT, 0) > \
            lesion_mean(DiagnosisLabel.INFARCT, 1)


class TestSynthDataset(TestCase):

    def test_deterministic_given_the_seed(self):
        a = synth_dataset(SMALL, 5)
        b = synth_dataset(SMALL, 5)
        assert a.json_data == b.json_data
        for x, y in zip(a.samples, b.samples):
            assert x.volume == y.volume
            assert x.mask == y.mask

    def test_different_seeds_differ(self):
        a = synth_dataset(SMALL, 5).samples[0].volume
        b = synth_dataset(SMALL, 6).samples[0].volume
        assert a != b

    def test_manifest(self):
        dataset = synth_dataset(SMALL, 5)
        assert dataset.json_data['seed'] == 5
        assert dataset.json_data['spec']['extent'] == 16
        assert [s.id for s in dataset.samples] == \
            ['s0000', 's0001', 's0002', 's0003', 's0004', 's0005']
        assert sorted(dataset.samples.labels) == sorted(
            ['glioma-like', 'fcd-like', 'infarct-like'] * 2)
        assert dataset.samples[0].volume_file == 's0000_vol.hvol'

    def test_write_and_reload(self):
        dataset = synth_dataset(SynthSpec(n=2, extent=16), 1)
        with example_dir() as directory:
            dataset.write(directory)
            reloaded = Dataset.from_filename(directory)
            assert reloaded.json_data == dataset.json_data
            assert reloaded.samples[1].volume == dataset.samples[1].volume
            assert reloaded.samples[1].mask == dataset.samples[1].mask
