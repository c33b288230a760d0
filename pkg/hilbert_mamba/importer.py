'''Reading and writing volumes, checkpoints and dataset manifests.

HVOL (little-endian):

    b"HVOL"  u32 version (1)  u32 C, D, H, W  u8 dtype  f32 x 3 spacing

followed by C*D*H*W values in C-order: f32 for dtype 0 (image), u8 for
dtype 1 (mask).

HVCK (little-endian):

    b"HVCK"  u32 count

then per parameter: u32 name length, UTF-8 name, u32 rank, u32 extents,
f64 payload.
'''
from collections import OrderedDict
from contextlib import contextmanager
import io
import json
import os
import struct
from tempfile import NamedTemporaryFile

import numpy as np
import requests

from .base import (
    FormatError, MultipleObjectsReturned, ObjectDoesNotExist, ParameterError,
    Record, RecordCollection)
from . import numkernel as nk


HVOL_MAGIC = b'HVOL'
HVOL_VERSION = 1
HVOL_HEADER = struct.Struct('<4sIIIIIB3f')
DTYPE_IMAGE = 0
DTYPE_MASK = 1

HVCK_MAGIC = b'HVCK'

MANIFEST_NAME = 'dataset.json'
MANIFEST_SCHEMA = 'hvlm.dataset/1'


@contextmanager
def atomic_write(filename, binary=True):
    '''Write to a temporary file next to ``filename``, then rename it'''
    directory = os.path.dirname(os.path.abspath(filename))
    ntf = NamedTemporaryFile(
        mode='wb' if binary else 'w', dir=directory, delete=False,
        prefix='.' + os.path.basename(filename) + '.')
    try:
        with ntf:
            yield ntf
        os.replace(ntf.name, filename)
    except BaseException:
        if os.path.exists(ntf.name):
            os.remove(ntf.name)
        raise


def _fetch(url):
    r = requests.get(url)
    r.raise_for_status()
    return r


class Volume(object):
    '''A C x D x H x W image with voxel spacing in mm per (D, H, W) axis'''

    dtype = DTYPE_IMAGE

    def __init__(self, data, spacing=(1.0, 1.0, 1.0)):
        data = np.asarray(data)
        if data.ndim == 3:
            data = data[np.newaxis]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ParameterError('a volume is C x D x H x W with every extent '
                                 '>= 1, got shape {0}'.format(data.shape))
        # spacing is f32 on disk
        spacing = tuple(float(np.float32(s)) for s in spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ParameterError('spacing must be three positive values, got '
                                 '{0!r}'.format(spacing))
        self.data = self._coerce(data)
        self.spacing = spacing

    def _coerce(self, data):
        return np.ascontiguousarray(data, dtype=np.float64)

    @property
    def modalities(self):
        return self.data.shape[0]

    @property
    def extents(self):
        return self.data.shape[1:]

    @property
    def shape(self):
        return self.data.shape

    def tensor(self):
        return nk.constant(self.data)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return type(self) is type(other) and \
            self.spacing == other.spacing and \
            np.array_equal(self.data, other.data)

    def __ne__(self, other):
        result = self.__eq__(other)
        return result if result is NotImplemented else not result

    def __repr__(self):
        return '<{0}: {1} spacing={2}>'.format(
            type(self).__name__, 'x'.join(str(n) for n in self.shape),
            self.spacing)

    def to_bytes(self):
        header = HVOL_HEADER.pack(
            HVOL_MAGIC, HVOL_VERSION, *(self.shape + (self.dtype,) +
                                        self.spacing))
        if self.dtype == DTYPE_IMAGE:
            payload = self.data.astype('<f4').tobytes()
        else:
            payload = self.data.astype(np.uint8).tobytes()
        return header + payload

    def to_filename(self, filename):
        with atomic_write(filename) as f:
            f.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob):
        if len(blob) < HVOL_HEADER.size:
            raise FormatError('truncated HVOL header ({0} bytes)'.format(
                len(blob)))
        magic, version, c, d, h, w, dtype, s0, s1, s2 = \
            HVOL_HEADER.unpack_from(blob)
        if magic != HVOL_MAGIC:
            raise FormatError('not an HVOL file (magic {0!r})'.format(magic))
        if version != HVOL_VERSION:
            raise FormatError('unsupported HVOL version {0}'.format(version))
        if dtype not in (DTYPE_IMAGE, DTYPE_MASK):
            raise FormatError('unknown HVOL dtype {0}'.format(dtype))
        shape = (c, d, h, w)
        count = c * d * h * w
        numpy_dtype = '<f4' if dtype == DTYPE_IMAGE else np.uint8
        expected = count * np.dtype(numpy_dtype).itemsize
        payload = blob[HVOL_HEADER.size:]
        if len(payload) != expected:
            raise FormatError('HVOL payload has {0} bytes, expected '
                              '{1}'.format(len(payload), expected))
        data = np.frombuffer(payload, dtype=numpy_dtype).reshape(shape)
        spacing = (s0, s1, s2)
        if dtype == DTYPE_MASK:
            volume = MaskVolume(data, spacing)
        else:
            volume = Volume(data, spacing)
        if not isinstance(volume, cls):
            raise FormatError('expected a {0}, file holds a {1}'.format(
                cls.__name__, type(volume).__name__))
        return volume

    @classmethod
    def from_filename(cls, filename):
        with open(filename, 'rb') as f:
            return cls.from_bytes(f.read())

    @classmethod
    def from_url(cls, url):
        return cls.from_bytes(_fetch(url).content)


class MaskVolume(Volume):
    '''A single-channel binary label volume'''

    dtype = DTYPE_MASK

    def _coerce(self, data):
        if data.shape[0] != 1:
            raise ParameterError('a mask has one channel, got {0}'.format(
                data.shape[0]))
        values = np.unique(data)
        if not np.isin(values, (0, 1)).all():
            raise ParameterError('mask values must be 0 or 1, got {0}'.format(
                values[:5].tolist()))
        return np.ascontiguousarray(data, dtype=np.uint8)

    @property
    def mask(self):
        return self.data[0].astype(bool)

    @property
    def voxel_count(self):
        return int(self.data.sum())


def checkpoint_bytes(state):
    if hasattr(state, 'state_dict'):
        state = state.state_dict()
    out = io.BytesIO()
    out.write(HVCK_MAGIC)
    out.write(struct.pack('<I', len(state)))
    for name, value in state.items():
        value = np.asarray(value, dtype='<f8')
        encoded = name.encode('utf-8')
        out.write(struct.pack('<I', len(encoded)))
        out.write(encoded)
        out.write(struct.pack('<I', value.ndim))
        out.write(struct.pack('<{0}I'.format(value.ndim), *value.shape))
        out.write(value.tobytes())
    return out.getvalue()


def save_checkpoint(state, filename):
    '''Write a Module (or a name -> array mapping) as an HVCK file'''
    with atomic_write(filename) as f:
        f.write(checkpoint_bytes(state))


class _Reader(object):

    def __init__(self, blob):
        self.blob = blob
        self.offset = 0

    def read(self, n):
        if self.offset + n > len(self.blob):
            raise FormatError('truncated HVCK file at byte {0}'.format(
                self.offset))
        chunk = self.blob[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self, count=1):
        return struct.unpack('<{0}I'.format(count), self.read(4 * count))


def checkpoint_from_bytes(blob):
    reader = _Reader(blob)
    if reader.read(4) != HVCK_MAGIC:
        raise FormatError('not an HVCK checkpoint')
    state = OrderedDict()
    count, = reader.u32()
    for _ in range(count):
        length, = reader.u32()
        name = reader.read(length).decode('utf-8')
        rank, = reader.u32()
        shape = reader.u32(rank) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        state[name] = np.frombuffer(
            reader.read(8 * size), dtype='<f8').reshape(shape).astype(
                np.float64)
    if reader.offset != len(blob):
        raise FormatError('{0} trailing bytes after the last parameter'.format(
            len(blob) - reader.offset))
    return state


def load_checkpoint(filename):
    with open(filename, 'rb') as f:
        return checkpoint_from_bytes(f.read())


class Sample(Record):

    class DoesNotExist(ObjectDoesNotExist):
        pass

    class MultipleObjectsReturned(MultipleObjectsReturned):
        pass

    def __repr__(self):
        return self.repr_helper('{0} ({1})'.format(self.id, self.label))

    @property
    def id(self):
        return self.data['id']

    @property
    def label(self):
        return self.data['label']

    @property
    def seed(self):
        return self.data.get('seed')

    @property
    def volume_file(self):
        return self.data['volume']

    @property
    def mask_file(self):
        return self.data['mask']

    @property
    def volume(self):
        return self.owner.load(self.volume_file, Volume)

    @property
    def mask(self):
        return self.owner.load(self.mask_file, MaskVolume)


class SampleCollection(RecordCollection):

    def __init__(self, samples_data, dataset):
        super(SampleCollection, self).__init__(samples_data, Sample, dataset)

    @property
    def labels(self):
        return [s.label for s in self]


class Dataset(object):
    '''Samples listed in a ``dataset.json`` manifest

    Volumes are read lazily from ``base`` (a directory or a URL prefix)
    unless they were handed in as ``volumes``; those stay in memory.
    Volumes read from ``base`` are kept in an LRU of ``cache_size``
    entries.'''

    CACHE_SIZE = 64

    @classmethod
    def from_filename(cls, filename):
        if os.path.isdir(filename):
            filename = os.path.join(filename, MANIFEST_NAME)
        with open(filename) as f:
            return cls(json.load(f), base=os.path.dirname(
                os.path.abspath(filename)))

    @classmethod
    def from_url(cls, url):
        r = _fetch(url)
        return cls(r.json(), base=url.rsplit('/', 1)[0] + '/', remote=True)

    def __init__(self, json_data, base=None, remote=False, volumes=None,
                 cache_size=None):
        if json_data.get('schema', MANIFEST_SCHEMA) != MANIFEST_SCHEMA:
            raise FormatError('unknown manifest schema {0!r}'.format(
                json_data.get('schema')))
        self.json_data = json_data
        self.base = base
        self.remote = remote
        self.volumes = dict(volumes or {})
        self.cache_size = self.CACHE_SIZE if cache_size is None \
            else cache_size
        self._loaded = OrderedDict()

    @property
    def samples(self):
        return SampleCollection(self.json_data.get('samples', []), self)

    def subset(self, ids):
        wanted = set(ids)
        data = dict(self.json_data)
        data['samples'] = [s for s in self.json_data.get('samples', [])
                           if s['id'] in wanted]
        return Dataset(data, base=self.base, remote=self.remote,
                       volumes=self.volumes, cache_size=self.cache_size)

    def load(self, name, cls=Volume):
        if name in self.volumes:
            return self.volumes[name]
        if name in self._loaded:
            self._loaded.move_to_end(name)
            return self._loaded[name]
        if self.base is None:
            raise FormatError('{0} is not held in memory and the dataset has '
                              'no base location'.format(name))
        if self.remote:
            volume = cls.from_url(self.base + name)
        else:
            volume = cls.from_filename(os.path.join(self.base, name))
        if self.cache_size > 0:
            self._loaded[name] = volume
            while len(self._loaded) > self.cache_size:
                self._loaded.popitem(last=False)
        return volume

    @property
    def cached(self):
        '''Names read from ``base`` still held, least recent first'''
        return list(self._loaded)

    def write(self, directory):
        '''Write every volume plus the manifest into ``directory``'''
        if not os.path.isdir(directory):
            os.makedirs(directory)
        for sample in self.samples:
            sample.volume.to_filename(
                os.path.join(directory, sample.volume_file))
            sample.mask.to_filename(os.path.join(directory, sample.mask_file))
        with atomic_write(os.path.join(directory, MANIFEST_NAME),
                          binary=False) as f:
            json.dump(self.json_data, f, indent=2, sort_keys=True)
            f.write('\n')
