from unittest import TestCase

import numpy as np
import pytest

from .helpers import random_tensor

from hilbert_mamba.base import DimensionError, ParameterError
from hilbert_mamba.blocks import (
    FeedForward, HilbertMambaBlock, HilbertMambaCrossAttention, HmbConfig,
    HmcaConfig, ffn_forward, from_tokens, hmb_forward, hmca_fuse,
    reverse_tokens, to_tokens)
from hilbert_mamba.hilbert_codec import map_for


def rng(seed=0):
    return np.random.default_rng(seed)


class TestTokens(TestCase):

    def test_round_trip(self):
        x = random_tensor((3, 2, 3, 5))
        m = map_for('hilbert', (2, 3, 5))
        tokens = to_tokens(x, m)
        assert tokens.shape == (30, 3)
        assert np.array_equal(from_tokens(tokens, m, (2, 3, 5)).data, x.data)

    def test_reverse(self):
        t = random_tensor((4, 2))
        assert np.array_equal(reverse_tokens(t).data, t.data[::-1])


class TestHilbertMambaBlock(TestCase):

    def test_shape_preserved_on_odd_extents(self):
        block = HilbertMambaBlock(HmbConfig(3, d_state=4), rng())
        x = random_tensor((3, 3, 5, 6))
        assert block(x).shape == x.shape

    def test_zeroed_block_is_identity(self):
        for bidirectional in (False, True):
            block = HilbertMambaBlock(
                HmbConfig(4, d_state=2, bidirectional=bidirectional), rng())
            block.zero_()
            x = random_tensor((4, 4, 4, 4))
            assert np.array_equal(block(x).data, x.data)

    def test_chunk_does_not_change_the_output(self):
        x = random_tensor((2, 4, 4, 4), seed=3)
        sequential = HilbertMambaBlock(HmbConfig(2, d_state=3, chunk=None),
                                       rng(5))
        chunked = HilbertMambaBlock(HmbConfig(2, d_state=3, chunk=5), rng(5))
        assert np.allclose(sequential(x).data, chunked(x).data, atol=1e-12)

    def test_scan_order_changes_the_output(self):
        x = random_tensor((2, 4, 4, 4), seed=4)
        hilbert = HilbertMambaBlock(HmbConfig(2, d_state=3), rng(6))
        raster = HilbertMambaBlock(HmbConfig(2, d_state=3, scheme='raster'),
                                   rng(6))
        assert not np.allclose(hilbert(x).data, raster(x).data)

    def test_two_dimensional_slices(self):
        block = HilbertMambaBlock(HmbConfig(2, d_state=2, dims=2), rng())
        assert block(random_tensor((2, 5, 3))).shape == (2, 5, 3)

    def test_width_mismatch(self):
        block = HilbertMambaBlock(HmbConfig(3), rng())
        with pytest.raises(DimensionError):
            block(random_tensor((2, 4, 4, 4)))

    def test_dims_mismatch(self):
        block = HilbertMambaBlock(HmbConfig(2, dims=3), rng())
        with pytest.raises(ParameterError):
            block(random_tensor((2, 4, 4)))

    def test_unknown_scheme(self):
        with pytest.raises(ParameterError):
            HmbConfig(2, scheme='spiral')


class TestFeedForward(TestCase):

    def test_zeroed_is_identity(self):
        ffn = FeedForward(3, 6, rng())
        ffn.zero_()
        x = random_tensor((3, 2, 2, 2))
        assert np.allclose(ffn(x).data, x.data)

    def test_position_wise(self):
        ffn = FeedForward(3, 6, rng())
        x = random_tensor((3, 2, 2, 2))
        y = ffn(x).data
        single = ffn(x[:, :1, :1, :1])
        assert np.allclose(single.data[:, 0, 0, 0], y[:, 0, 0, 0])


class TestCrossAttention(TestCase):

    def test_zeroed_fusion_returns_the_query(self):
        for interaction in ('attention', 'mamba'):
            hmca = HilbertMambaCrossAttention(HmcaConfig(
                4, mlp_hidden=8, d_state=2, interaction=interaction), rng())
            hmca.zero_()
            q = random_tensor((4, 2, 2, 4), seed=1)
            kv = random_tensor((4, 2, 2, 4), seed=2)
            assert np.array_equal(hmca(q, kv).data, q.data)

    def test_context_influences_the_query(self):
        for interaction in ('attention', 'mamba'):
            hmca = HilbertMambaCrossAttention(HmcaConfig(
                4, mlp_hidden=8, d_state=2, interaction=interaction), rng())
            q = random_tensor((4, 2, 2, 2), seed=1)
            a = hmca(q, random_tensor((4, 2, 2, 2), seed=2)).data
            b = hmca(q, random_tensor((4, 2, 2, 2), seed=3)).data
            assert a.shape == q.shape
            assert not np.allclose(a, b)

    def test_sequences_of_different_lengths(self):
        hmca = HilbertMambaCrossAttention(
            HmcaConfig(4, mlp_hidden=8, d_state=2, dims=1), rng())
        out = hmca.forward_sequence(random_tensor((3, 4)),
                                    random_tensor((7, 4), seed=1))
        assert out.shape == (3, 4)

    def test_shape_mismatch(self):
        hmca = HilbertMambaCrossAttention(HmcaConfig(4), rng())
        with pytest.raises(DimensionError):
            hmca(random_tensor((4, 2, 2, 2)), random_tensor((4, 2, 2, 4)))

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            HmcaConfig(4, interaction='concat')
        with pytest.raises(ParameterError):
            HmcaConfig(4, residual=False)


class TestFunctionalForms(TestCase):

    def test_same_as_calling_the_module(self):
        x = random_tensor((4, 2, 2, 2))
        kv = random_tensor((4, 2, 2, 2), seed=1)
        block = HilbertMambaBlock(HmbConfig(4, d_state=2), rng())
        ffn = FeedForward(4, 8, rng())
        hmca = HilbertMambaCrossAttention(HmcaConfig(4, mlp_hidden=8,
                                                     d_state=2), rng())
        assert np.array_equal(hmb_forward(x, block).data, block(x).data)
        assert np.array_equal(ffn_forward(x, ffn).data, ffn(x).data)
        assert np.array_equal(hmca_fuse(x, kv, hmca).data, hmca(x, kv).data)
