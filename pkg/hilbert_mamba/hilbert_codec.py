'''Serialization orders for 2D/3D grids: Hilbert, Morton and raster.

Hilbert indices use Skilling's transpose construction ("Programming the
Hilbert curve", AIP Conf. Proc. 707, 2004), vectorised over numpy
arrays.  The index bits are interleaved most significant level first,
axis 0 before axis 1 before axis 2, and the curve always starts at the
origin: index 0 maps to (0, ..., 0).  Component i of a coordinate
indexes array axis i of the volume being serialized.

Volumes whose extents are not a power of two are embedded in the
smallest enclosing 2^k cube; out-of-volume cells are dropped from the
sequence (``pad_policy='drop'``) or kept as zeros (``'zero'``).
'''
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import numkernel as nk
from .base import DimensionError, ParameterError


SCHEMES = ('hilbert', 'morton', 'raster')
PAD_POLICIES = ('drop', 'zero')
MAX_TABLE_BITS = 30
MAX_STREAM_BITS = 62
MAX_LOCALITY_EXTENT = 64


def _check_bits(dims, order, limit):
    if dims < 1:
        raise ParameterError('dims must be positive, got {0}'.format(dims))
    if order < 1:
        raise ParameterError('order must be at least 1, got {0}'.format(order))
    if dims * order > limit:
        raise ParameterError('dims * order = {0} exceeds {1} bits'.format(
            dims * order, limit))


def _pack_transpose(X, dims, order):
    h = np.zeros(X.shape[1], dtype=np.int64)
    for level in range(order):
        for i in range(dims):
            h |= ((X[i] >> level) & 1) << (level * dims + dims - 1 - i)
    return h


def _unpack_transpose(h, dims, order):
    X = np.zeros((dims, h.size), dtype=np.int64)
    for level in range(order):
        for i in range(dims):
            X[i] |= ((h >> (level * dims + dims - 1 - i)) & 1) << level
    return X


def _as_indices(indices, dims, order):
    h = np.asarray(indices, dtype=np.int64).reshape(-1)
    if h.size and (h.min() < 0 or h.max() >= 1 << (dims * order)):
        raise ParameterError('indices out of range for dims={0} '
                             'order={1}'.format(dims, order))
    return h


def _as_coords(coords, dims, order):
    c = np.asarray(coords, dtype=np.int64).reshape(-1, dims)
    if c.size and (c.min() < 0 or c.max() >= 1 << order):
        raise ParameterError('coordinates out of range for order '
                             '{0}'.format(order))
    return c


def hilbert_index_to_coords(indices, dims, order):
    '''Streaming index -> coordinate transform, no table needed'''
    _check_bits(dims, order, MAX_STREAM_BITS)
    h = _as_indices(indices, dims, order)
    X = _unpack_transpose(h, dims, order)
    # gray decode
    t = X[dims - 1] >> 1
    for i in range(dims - 1, 0, -1):
        X[i] ^= X[i - 1]
    X[0] ^= t
    # undo excess work
    N = 2 << (order - 1)
    Q = 2
    while Q != N:
        P = Q - 1
        for i in range(dims - 1, -1, -1):
            hit = (X[i] & Q) != 0
            t = np.where(hit, 0, (X[0] ^ X[i]) & P)
            x0 = np.where(hit, X[0] ^ P, X[0] ^ t)
            X[i] = X[i] ^ t
            X[0] = x0
        Q <<= 1
    return X.T.copy()


def hilbert_coords_to_index(coords, dims, order):
    '''Streaming coordinate -> index transform, no table needed'''
    _check_bits(dims, order, MAX_STREAM_BITS)
    X = _as_coords(coords, dims, order).T.copy()
    M = 1 << (order - 1)
    # inverse undo
    Q = M
    while Q > 1:
        P = Q - 1
        for i in range(dims):
            hit = (X[i] & Q) != 0
            t = np.where(hit, 0, (X[0] ^ X[i]) & P)
            x0 = np.where(hit, X[0] ^ P, X[0] ^ t)
            X[i] = X[i] ^ t
            X[0] = x0
        Q >>= 1
    # gray encode
    for i in range(1, dims):
        X[i] ^= X[i - 1]
    t = np.zeros(X.shape[1], dtype=np.int64)
    Q = M
    while Q > 1:
        t = np.where((X[dims - 1] & Q) != 0, t ^ (Q - 1), t)
        Q >>= 1
    for i in range(dims):
        X[i] ^= t
    return _pack_transpose(X, dims, order)


def morton_coords_to_index(coords, dims, order):
    _check_bits(dims, order, MAX_STREAM_BITS)
    return _pack_transpose(_as_coords(coords, dims, order).T, dims, order)


def morton_index_to_coords(indices, dims, order):
    _check_bits(dims, order, MAX_STREAM_BITS)
    h = _as_indices(indices, dims, order)
    return _unpack_transpose(h, dims, order).T.copy()


def raster_coords_to_index(coords, dims, order):
    c = _as_coords(coords, dims, order)
    return np.ravel_multi_index(tuple(c.T), (1 << order,) * dims)


def raster_index_to_coords(indices, dims, order):
    h = _as_indices(indices, dims, order)
    return np.stack(np.unravel_index(h, (1 << order,) * dims), axis=1)


class CurveMap(object):
    '''Precomputed bijection between curve indices and grid cells'''

    scheme = None

    def __init__(self, dims, order):
        if dims not in (2, 3):
            raise ParameterError('dims must be 2 or 3, got {0}'.format(dims))
        _check_bits(dims, order, MAX_TABLE_BITS)
        self.dims = dims
        self.order = order
        indices = np.arange(self.length, dtype=np.int64)
        self.index_to_coord = self.to_coords(indices)
        self.coord_to_index = np.empty((self.side,) * dims, dtype=np.int64)
        self.coord_to_index[tuple(self.index_to_coord.T)] = indices
        self.index_to_coord.setflags(write=False)
        self.coord_to_index.setflags(write=False)
        self._plans = {}

    @property
    def side(self):
        return 1 << self.order

    @property
    def length(self):
        return 1 << (self.dims * self.order)

    def to_coords(self, indices):
        raise NotImplementedError

    def to_index(self, coords):
        raise NotImplementedError

    def fits(self, extents):
        return len(extents) == self.dims and \
            all(1 <= e <= self.side for e in extents)

    def serialization_indices(self, extents, pad_policy='drop'):
        '''Raster offsets of the volume's cells, in curve order

        With ``'zero'`` the sequence covers the whole cube and padding
        positions hold -1.'''
        extents = tuple(int(e) for e in extents)
        key = (extents, pad_policy)
        if key not in self._plans:
            self._plans[key] = self._plan(extents, pad_policy)
        return self._plans[key]

    def inverse_indices(self, extents, pad_policy='drop'):
        '''Sequence position of every raster cell of the volume'''
        extents = tuple(int(e) for e in extents)
        key = ('inverse', extents, pad_policy)
        if key not in self._plans:
            idx = self.serialization_indices(extents, pad_policy)
            if pad_policy == 'drop':
                inverse = np.argsort(idx)
            else:
                pos = np.flatnonzero(idx >= 0)
                inverse = pos[np.argsort(idx[pos])]
            inverse.setflags(write=False)
            self._plans[key] = inverse
        return self._plans[key]

    def _plan(self, extents, pad_policy):
        if pad_policy not in PAD_POLICIES:
            raise ParameterError('unknown pad policy {0!r}'.format(pad_policy))
        if not self.fits(extents):
            raise ParameterError('extents {0} do not fit a {1}D map of side '
                                 '{2}'.format(extents, self.dims, self.side))
        coords = self.index_to_coord
        inside = np.all(coords < np.asarray(extents), axis=1)
        linear = np.ravel_multi_index(tuple(coords.T), extents, mode='clip')
        if pad_policy == 'drop':
            plan = linear[inside]
        else:
            plan = np.where(inside, linear, -1)
        plan.setflags(write=False)
        return plan

    def __repr__(self):
        return '<{0}: dims={1} order={2}>'.format(
            type(self).__name__, self.dims, self.order)


class HilbertMap(CurveMap):

    scheme = 'hilbert'

    def to_coords(self, indices):
        return hilbert_index_to_coords(indices, self.dims, self.order)

    def to_index(self, coords):
        return hilbert_coords_to_index(coords, self.dims, self.order)


class MortonMap(CurveMap):

    scheme = 'morton'

    def to_coords(self, indices):
        return morton_index_to_coords(indices, self.dims, self.order)

    def to_index(self, coords):
        return morton_coords_to_index(coords, self.dims, self.order)


class RasterMap(CurveMap):

    scheme = 'raster'

    def to_coords(self, indices):
        return raster_index_to_coords(indices, self.dims, self.order)

    def to_index(self, coords):
        return raster_coords_to_index(coords, self.dims, self.order)


MAP_CLASSES = {
    'hilbert': HilbertMap,
    'morton': MortonMap,
    'raster': RasterMap,
}


@lru_cache(maxsize=64)
def build_scan_map(scheme, dims, order):
    try:
        cls = MAP_CLASSES[scheme]
    except KeyError:
        raise ParameterError('unknown scan scheme {0!r}; expected one of '
                             '{1}'.format(scheme, SCHEMES))
    return cls(dims, order)


def build_hilbert_map(dims, order):
    return build_scan_map('hilbert', dims, order)


def minimal_order(extents):
    return max(1, (max(extents) - 1).bit_length())


def map_for(scheme, extents, order=None):
    '''The map a volume of these extents is serialized with'''
    extents = tuple(extents)
    return build_scan_map(scheme, len(extents),
                          order if order is not None else
                          minimal_order(extents))


def hilbert_flatten(x, scan_map, pad_policy='drop'):
    '''C x D x H x W (or C x H x W) -> C x N along the map's curve'''
    x = nk.as_tensor(x)
    extents = x.shape[1:]
    if len(extents) != scan_map.dims:
        raise ParameterError('{0}D map cannot serialize a volume of shape '
                             '{1}'.format(scan_map.dims, x.shape))
    idx = scan_map.serialization_indices(extents, pad_policy)
    channels = x.shape[0]
    flat = nk.reshape(x, (channels, -1))
    if pad_policy == 'zero':
        cells = flat.shape[1]
        flat = nk.concat([flat, nk.zeros((channels, 1))], axis=1)
        idx = np.where(idx < 0, cells, idx)
    return nk.take(flat, idx, axis=1)


def hilbert_unflatten(seq, scan_map, extents, pad_policy='drop'):
    '''Inverse of hilbert_flatten; padding positions are discarded'''
    seq = nk.as_tensor(seq)
    extents = tuple(extents)
    expected = len(scan_map.serialization_indices(extents, pad_policy))
    if seq.ndim != 2 or seq.shape[1] != expected:
        raise DimensionError('sequence {0} does not hold {1} cells for '
                             'extents {2}'.format(seq.shape, expected,
                                                  extents))
    inverse = scan_map.inverse_indices(extents, pad_policy)
    out = nk.take(seq, inverse, axis=1)
    return nk.reshape(out, (seq.shape[0],) + extents)


@dataclass(frozen=True)
class LocalityReport(object):
    scheme: str
    grid: tuple
    mean_adjacent_index_gap: float
    median_adjacent_index_gap: float
    p95_adjacent_index_gap: float
    pair_count: int

    def to_dict(self):
        d = asdict(self)
        d['grid'] = list(self.grid)
        return d


def adjacent_index_gaps(scheme, extents):
    '''|i - j| for every unordered face-adjacent pair, each pair once'''
    extents = tuple(int(e) for e in extents)
    if len(extents) not in (2, 3):
        raise ParameterError('grid must be 2D or 3D, got {0}'.format(extents))
    if any(e < 1 or e > MAX_LOCALITY_EXTENT for e in extents):
        raise ParameterError('grid extents must lie in 1..{0}, got '
                             '{1}'.format(MAX_LOCALITY_EXTENT, extents))
    scan_map = map_for(scheme, extents)
    idx = scan_map.serialization_indices(extents)
    position = np.empty(idx.size, dtype=np.int64)
    position[idx] = np.arange(idx.size)
    position = position.reshape(extents)
    return np.concatenate([
        np.abs(np.diff(position, axis=a)).ravel()
        for a in range(len(extents))])


def locality_report(scheme, extents):
    gaps = adjacent_index_gaps(scheme, extents)
    if gaps.size == 0:
        raise ParameterError('grid {0} has no adjacent pairs; the mean gap is '
                             'undefined'.format(tuple(extents)))
    return LocalityReport(
        scheme=scheme,
        grid=tuple(int(e) for e in extents),
        mean_adjacent_index_gap=float(gaps.mean()),
        median_adjacent_index_gap=float(np.median(gaps)),
        p95_adjacent_index_gap=float(np.percentile(gaps, 95)),
        pair_count=int(gaps.size))
