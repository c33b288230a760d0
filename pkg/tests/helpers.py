from contextlib import contextmanager
import os
import shutil
from tempfile import NamedTemporaryFile, mkdtemp

import numpy as np

from hilbert_mamba import numkernel as nk


SLOW = os.environ.get('HVLM_SLOW', '') == '1'


@contextmanager
def example_file(contents, suffix=''):
    ntf = NamedTemporaryFile(delete=False, suffix=suffix)
    try:
        ntf.write(contents)
        ntf.close()
        yield ntf.name
    finally:
        os.remove(ntf.name)


@contextmanager
def example_dir():
    directory = mkdtemp()
    try:
        yield directory
    finally:
        shutil.rmtree(directory)


def random_tensor(shape, seed=0, scale=1.0, requires_grad=False):
    rng = np.random.default_rng(seed)
    return nk.Tensor(rng.normal(0.0, scale, size=shape),
                     requires_grad=requires_grad)


def box_mask(shape, lo, hi):
    '''D x H x W uint8 mask with ones on [lo, hi] inclusive per axis'''
    mask = np.zeros(shape, dtype=np.uint8)
    mask[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] = 1
    return mask
