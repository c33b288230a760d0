'''Synthetic two-modality phantoms with exact lesion masks.

The three lesion classes are geometric analogues only.  They are not
models of any disease:

* glioma-like: bright ellipsoid core with a fainter halo, strongest in
  modality 2
* fcd-like: small blurred patch inside the cortical ribbon, low contrast
* infarct-like: wedge of the brain ellipsoid, strongest in modality 1

A dataset is a pure function of ``(SynthSpec, seed)``.
'''
from dataclasses import dataclass, field
import logging

import numpy as np
from scipy import ndimage

from .base import ParameterError
from .importer import MANIFEST_SCHEMA, Dataset, MaskVolume, Volume
from .prompt_fusion import DiagnosisLabel


logger = logging.getLogger(__name__)

BRAIN_RADIUS = 0.42
RIBBON = (0.65, 0.98)


@dataclass
class SynthSpec(object):
    n: int = 60
    extent: int = 32
    class_mix: tuple = (1.0, 1.0, 1.0)
    radius_range: tuple = None
    contrast_range: tuple = (0.6, 1.0)
    noise: float = 0.05
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.class_mix = tuple(float(w) for w in self.class_mix)
        if self.radius_range is None:
            self.radius_range = (max(1.0, 0.09 * self.extent),
                                 max(1.0, 0.18 * self.extent))
        self.radius_range = tuple(float(r) for r in self.radius_range)
        self.contrast_range = tuple(float(c) for c in self.contrast_range)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.n < 1:
            raise ParameterError('a dataset needs at least one sample')
        if self.extent < 8:
            raise ParameterError('extent must be at least 8, got {0}'.format(
                self.extent))
        if len(self.class_mix) != len(DiagnosisLabel) or \
                min(self.class_mix) < 0 or sum(self.class_mix) <= 0:
            raise ParameterError('class_mix needs {0} non-negative weights '
                                 'with a positive sum'.format(
                                     len(DiagnosisLabel)))
        lo, hi = self.radius_range
        if lo < 1 or hi < lo:
            raise ParameterError('bad radius_range {0!r}'.format(
                self.radius_range))
        if 2 * hi > BRAIN_RADIUS * self.extent:
            raise ParameterError(
                'lesion radius {0} does not fit a volume of extent '
                '{1}'.format(hi, self.extent))
        lo, hi = self.contrast_range
        if lo <= 0 or hi < lo:
            raise ParameterError('bad contrast_range {0!r}'.format(
                self.contrast_range))
        if self.noise < 0:
            raise ParameterError('noise must be non-negative')

    def to_dict(self):
        return {
            'n': self.n, 'extent': self.extent,
            'class_mix': list(self.class_mix),
            'radius_range': list(self.radius_range),
            'contrast_range': list(self.contrast_range),
            'noise': self.noise, 'spacing': list(self.spacing),
        }


def class_counts(spec):
    '''Split ``spec.n`` by ``class_mix`` with largest remainders'''
    weights = np.asarray(spec.class_mix) / sum(spec.class_mix)
    exact = weights * spec.n
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind='stable')
    for i in order[:spec.n - counts.sum()]:
        counts[i] += 1
    return dict(zip(DiagnosisLabel, counts.tolist()))


@dataclass
class _Grid(object):
    extent: int
    center: float = field(init=False)
    z: np.ndarray = field(init=False)
    y: np.ndarray = field(init=False)
    x: np.ndarray = field(init=False)
    radius: float = field(init=False)
    r: np.ndarray = field(init=False)

    def __post_init__(self):
        self.center = (self.extent - 1) / 2.0
        self.z, self.y, self.x = np.indices((self.extent,) * 3) - self.center
        self.radius = BRAIN_RADIUS * self.extent
        self.r = np.sqrt(self.z ** 2 + self.y ** 2 + self.x ** 2) / self.radius

    @property
    def brain(self):
        return self.r <= 1.0

    def voxel(self, offset):
        return tuple(int(np.clip(np.rint(self.center + o), 0, self.extent - 1))
                     for o in offset)


def _background(grid):
    brain = grid.brain.astype(np.float64)
    ribbon = ((grid.r >= RIBBON[0]) & (grid.r <= RIBBON[1])).astype(
        np.float64)
    m1 = 0.6 * brain + 0.1 * ribbon
    m2 = 0.5 * brain - 0.05 * ribbon
    out = np.stack([ndimage.gaussian_filter(m, 0.7) for m in (m1, m2)])
    return out


def _unit_vector(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _glioma(grid, rng, spec, contrast):
    lo, hi = spec.radius_range
    radii = rng.uniform(lo, hi, size=3)
    offset = _unit_vector(rng) * rng.uniform(0, 0.4) * (grid.radius - hi)
    d = np.sqrt(((grid.z - offset[0]) / radii[0]) ** 2 +
                ((grid.y - offset[1]) / radii[1]) ** 2 +
                ((grid.x - offset[2]) / radii[2]) ** 2)
    core = d <= 1.0
    core[grid.voxel(offset)] = True
    halo = (d <= 1.6) & ~core & grid.brain
    signal = np.zeros((2,) + core.shape)
    signal[1] += contrast * core + 0.5 * contrast * halo
    signal[0] -= 0.3 * contrast * core
    return signal, core


def _fcd(grid, rng, spec, contrast):
    radius = spec.radius_range[0]
    offset = _unit_vector(rng) * 0.8 * grid.radius
    d = np.sqrt((grid.z - offset[0]) ** 2 + (grid.y - offset[1]) ** 2 +
                (grid.x - offset[2]) ** 2)
    ribbon = (grid.r >= RIBBON[0]) & (grid.r <= RIBBON[1])
    mask = (d <= radius) & ribbon
    mask[grid.voxel(offset)] = True
    blurred = ndimage.gaussian_filter(mask.astype(np.float64), 1.0)
    signal = np.stack([0.3 * contrast * blurred, 0.4 * contrast * blurred])
    return signal, mask


def _infarct(grid, rng, spec, contrast):
    theta = rng.uniform(-np.pi, np.pi)
    half_width = rng.uniform(np.pi / 8, np.pi / 5)
    height = spec.radius_range[1]
    angle = np.arctan2(grid.y, grid.x)
    delta = np.angle(np.exp(1j * (angle - theta)))
    mask = grid.brain & (np.abs(delta) <= half_width) & \
        (grid.r >= 0.35) & (grid.r <= 0.95) & (np.abs(grid.z) <= height)
    seed_offset = (0.0, 0.65 * grid.radius * np.sin(theta),
                   0.65 * grid.radius * np.cos(theta))
    mask[grid.voxel(seed_offset)] = True
    signal = np.zeros((2,) + mask.shape)
    signal[0] += 0.9 * contrast * mask
    signal[1] += 0.2 * contrast * mask
    return signal, mask


GENERATORS = {
    DiagnosisLabel.GLIOMA: _glioma,
    DiagnosisLabel.FCD: _fcd,
    DiagnosisLabel.INFARCT: _infarct,
}


def generate_sample(label, rng, spec):
    '''Return (Volume, MaskVolume) for one lesion of class ``label``'''
    grid = _Grid(spec.extent)
    contrast = rng.uniform(*spec.contrast_range)
    signal, mask = GENERATORS[label](grid, rng, spec, contrast)
    data = _background(grid) + signal
    data = data + rng.normal(0.0, spec.noise, size=data.shape)
    # stored as f32 on disk, so round now to keep memory and disk equal
    data = data.astype(np.float32).astype(np.float64)
    return (Volume(data, spec.spacing),
            MaskVolume(mask[np.newaxis].astype(np.uint8), spec.spacing))


def synth_dataset(spec, seed):
    '''Generate ``spec.n`` samples as an in-memory Dataset'''
    counts = class_counts(spec)
    labels = [label for label in DiagnosisLabel
              for _ in range(counts[label])]
    order = np.random.default_rng(seed).permutation(len(labels))
    children = np.random.SeedSequence(seed).spawn(spec.n)
    samples, volumes = [], {}
    for i, (k, child) in enumerate(zip(order, children)):
        label = labels[k]
        volume, mask = generate_sample(label, np.random.default_rng(child),
                                       spec)
        sample_id = 's{0:04d}'.format(i)
        entry = {
            'id': sample_id, 'label': label.value, 'seed': seed, 'index': i,
            'volume': sample_id + '_vol.hvol',
            'mask': sample_id + '_mask.hvol',
        }
        volumes[entry['volume']] = volume
        volumes[entry['mask']] = mask
        samples.append(entry)
        logger.debug('generated %s (%s, %d lesion voxels)', sample_id,
                     label.value, mask.voxel_count)
    logger.info('generated %d samples: %s', spec.n, ', '.join(
        '{0}={1}'.format(label.value, n) for label, n in counts.items()))
    manifest = {
        'schema': MANIFEST_SCHEMA, 'seed': seed, 'spec': spec.to_dict(),
        'samples': samples,
    }
    return Dataset(manifest, volumes=volumes)
