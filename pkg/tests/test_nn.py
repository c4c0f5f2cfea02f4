"""Block-level contracts: attention, encoder/decoder blocks, PE, init, head."""

import math

import numpy as np
import pytest

from gradcheck import check_gradients

import mgsv.autodiff as ad
import mgsv.nn as nn
from mgsv.autodiff import Tensor
from mgsv.errors import ShapeError


def _randomize(block, seed=0):
    nn.init_parameters(block.named_parameters(), lambda name: nn.KAIMING, seed)
    return block


class TestLinear:
    def test_identity_weights(self, rng):
        layer = nn.Linear(3, 3)
        layer.weight.data[...] = np.eye(3)
        x = rng.normal(size=(4, 3)).astype(np.float32)
        np.testing.assert_allclose(layer(Tensor(x)).data, x, rtol=1e-6)

    def test_hand_arithmetic(self):
        layer = nn.Linear(2, 1)
        layer.weight.data[...] = [[1.0], [2.0]]
        layer.bias.data[...] = [3.0]
        out = layer(Tensor([[1.0, 1.0]]))
        np.testing.assert_allclose(out.data, [[6.0]])

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            nn.Linear(3, 2)(Tensor(np.ones((4, 5))))

    def test_gradient(self, rng):
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))
        b = rng.normal(size=(2,))

        def build(ts):
            layer = nn.Linear(4, 2, dtype=np.float64)
            layer.weight = ts[1]
            layer.bias = ts[2]
            return ad.reduce_sum(nn.linear(ts[0], layer))

        check_gradients(build, [x, w, b])


def brute_force_single_head(q, k, v, blk):
    """Independent single-head attention reference in plain numpy."""
    Q = q @ blk.wq.weight.data + blk.wq.bias.data
    K = k @ blk.wk.weight.data + blk.wk.bias.data
    V = v @ blk.wv.weight.data + blk.wv.bias.data
    logits = Q @ K.T / math.sqrt(q.shape[-1])
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)
    return (w @ V) @ blk.wo.weight.data + blk.wo.bias.data


class TestMultiHeadAttention:
    def test_single_key_ignores_query(self, rng):
        blk = _randomize(nn.MultiHeadAttention(8, 2))
        key = Tensor(rng.normal(size=(1, 8)).astype(np.float32))
        out1 = blk(Tensor(rng.normal(size=(3, 8)).astype(np.float32)), key, key)
        out2 = blk(Tensor(rng.normal(size=(3, 8)).astype(np.float32)), key, key)
        np.testing.assert_allclose(out1.data, out2.data, atol=1e-6)
        expected = blk.wo(blk.wv(key)).data
        np.testing.assert_allclose(out1.data[0:1], expected, atol=1e-5)

    def test_identical_keys_give_uniform_weights(self, rng):
        blk = _randomize(nn.MultiHeadAttention(8, 4))
        row = rng.normal(size=(1, 8)).astype(np.float32)
        keys = Tensor(np.repeat(row, 5, axis=0))
        _, weights = blk(Tensor(rng.normal(size=(2, 8)).astype(np.float32)),
                         keys, keys, return_weights=True)
        np.testing.assert_allclose(weights.data, np.full_like(weights.data, 0.2), atol=1e-6)

    def test_matches_brute_force_single_head(self, rng):
        blk = _randomize(nn.MultiHeadAttention(4, 1), seed=3)
        q = rng.normal(size=(3, 4)).astype(np.float32)
        kv = rng.normal(size=(5, 4)).astype(np.float32)
        out = blk(Tensor(q), Tensor(kv), Tensor(kv))
        np.testing.assert_allclose(out.data, brute_force_single_head(q, kv, kv, blk),
                                   atol=1e-6)

    def test_weight_rows_sum_to_one_per_head(self, rng):
        blk = _randomize(nn.MultiHeadAttention(16, 8))
        x = Tensor(rng.normal(size=(6, 16)).astype(np.float32))
        _, weights = blk(x, x, x, return_weights=True)
        assert weights.shape == (8, 6, 6)
        np.testing.assert_allclose(weights.data.sum(axis=-1), np.ones((8, 6)), atol=1e-6)

    def test_empty_key_set_rejected(self, rng):
        blk = nn.MultiHeadAttention(8, 2)
        x = Tensor(np.ones((2, 8)))
        with pytest.raises(ShapeError):
            blk(x, Tensor(np.zeros((0, 8))), Tensor(np.zeros((0, 8))))

    def test_key_mask_matches_dense_slice(self, rng):
        blk = _randomize(nn.MultiHeadAttention(8, 2))
        q = Tensor(rng.normal(size=(2, 3, 8)).astype(np.float32))
        kv = rng.normal(size=(2, 5, 8)).astype(np.float32)
        mask = np.array([[True] * 5, [True, True, True, False, False]])
        padded = blk(q, Tensor(kv), Tensor(kv), key_mask=mask)
        # second batch element must equal attention over its 3 valid keys
        dense = blk(Tensor(q.data[1]), Tensor(kv[1, :3]), Tensor(kv[1, :3]))
        np.testing.assert_allclose(padded.data[1], dense.data, atol=1e-6)

    def test_gradient(self, rng):
        q = rng.normal(size=(2, 4))
        kv = rng.normal(size=(3, 4))
        params = [rng.normal(size=(4, 4)) * 0.5 for _ in range(4)]

        def build(ts):
            blk = nn.MultiHeadAttention(4, 2, dtype=np.float64)
            for lin, w in zip((blk.wq, blk.wk, blk.wv, blk.wo), ts[2:]):
                lin.weight = w
            return ad.reduce_sum(blk(ts[0], ts[1], ts[1]))

        check_gradients(build, [q, kv] + params)


class TestEncoderBlock:
    @pytest.mark.parametrize("n", [1, 7, 50])
    def test_shape_preserved(self, n, rng):
        blk = _randomize(nn.EncoderBlock(16, 4))
        x = Tensor(rng.normal(size=(n, 16)).astype(np.float32))
        assert blk(x).shape == (n, 16)

    def test_eval_deterministic(self, rng):
        blk = _randomize(nn.EncoderBlock(8, 2))
        x = Tensor(rng.normal(size=(5, 8)).astype(np.float32))
        np.testing.assert_array_equal(blk(x).data, blk(x).data)

    def test_dropout_changes_training_output(self, rng):
        blk = _randomize(nn.EncoderBlock(8, 2, dropout=0.5))
        x = Tensor(rng.normal(size=(5, 8)).astype(np.float32))
        out_train = blk(x, train=True, rng=np.random.default_rng(0))
        assert not np.allclose(out_train.data, blk(x).data)

    def test_gradient(self, rng):
        x = rng.normal(size=(3, 8))

        def build(ts):
            blk = nn.EncoderBlock(8, 2, dtype=np.float64)
            _randomize(blk, seed=5)
            for _, p in blk.named_parameters():
                p.data = p.data.astype(np.float64)
            return ad.reduce_mean(ad.mul(blk(ts[0]), blk(ts[0])))

        check_gradients(build, [x])


class TestDecoderBlock:
    def test_identical_memory_rows_make_attention_query_independent(self, rng):
        blk = _randomize(nn.MultiHeadAttention(8, 2))
        mem = Tensor(np.repeat(rng.normal(size=(1, 8)).astype(np.float32), 6, axis=0))
        a = blk(Tensor(rng.normal(size=(1, 8)).astype(np.float32)), mem, mem)
        b = blk(Tensor(rng.normal(size=(1, 8)).astype(np.float32)), mem, mem)
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)

    def test_single_query_row_preserved(self, rng):
        blk = _randomize(nn.DecoderBlock(16, 4))
        out = blk(Tensor(rng.normal(size=(1, 16)).astype(np.float32)),
                  Tensor(rng.normal(size=(9, 16)).astype(np.float32)))
        assert out.shape == (1, 16)

    def test_empty_memory_rejected(self):
        blk = nn.DecoderBlock(8, 2)
        with pytest.raises(ShapeError):
            blk(Tensor(np.ones((1, 8))), Tensor(np.zeros((0, 8))))

    def test_gradient(self, rng):
        q = rng.normal(size=(1, 8))
        mem = rng.normal(size=(4, 8))
        # weighted readout: a plain sum of a post-norm output is ~constant
        w = rng.normal(size=(1, 8))

        def build(ts):
            blk = nn.DecoderBlock(8, 2, dtype=np.float64)
            _randomize(blk, seed=11)
            for _, p in blk.named_parameters():
                p.data = p.data.astype(np.float64)
            return ad.reduce_sum(ad.mul(blk(ts[0], ts[1]), w))

        check_gradients(build, [q, mem])


class TestSinusoidalPe:
    def test_row_zero_alternates(self):
        pe = nn.sinusoidal_pe(3, 8)
        np.testing.assert_allclose(pe.data[0], [0, 1, 0, 1, 0, 1, 0, 1], atol=1e-7)

    def test_bounded(self):
        pe = nn.sinusoidal_pe(50, 32)
        assert pe.data.min() >= -1.0 and pe.data.max() <= 1.0

    def test_known_entry(self):
        pe = nn.sinusoidal_pe(2, 4)
        assert pe.data[1, 0] == pytest.approx(math.sin(1.0), abs=1e-5)

    def test_odd_width_rejected(self):
        with pytest.raises(ShapeError):
            nn.sinusoidal_pe(4, 7)


class TestInit:
    def test_same_seed_bit_identical(self):
        a = nn.EncoderBlock(16, 4)
        b = nn.EncoderBlock(16, 4)
        nn.init_parameters(a.named_parameters(), lambda n: nn.KAIMING, seed=7)
        nn.init_parameters(b.named_parameters(), lambda n: nn.KAIMING, seed=7)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_different_seed_differs(self):
        a = nn.Linear(32, 32)
        b = nn.Linear(32, 32)
        nn.init_parameters(a.named_parameters(), lambda n: nn.KAIMING, seed=1)
        nn.init_parameters(b.named_parameters(), lambda n: nn.KAIMING, seed=2)
        assert not np.array_equal(a.weight.data, b.weight.data)

    def test_kaiming_variance(self):
        layer = nn.Linear(100, 100)
        nn.init_parameters(layer.named_parameters(), lambda n: nn.KAIMING, seed=0)
        var = layer.weight.data.var()
        assert abs(var - 2.0 / 100) < 0.2 * (2.0 / 100)

    def test_xavier_bound_respected(self):
        layer = nn.Linear(64, 160)
        nn.init_parameters(layer.named_parameters(), lambda n: nn.XAVIER, seed=0)
        bound = math.sqrt(6.0 / (64 + 160))
        assert np.abs(layer.weight.data).max() <= bound

    def test_biases_stay_zero(self):
        layer = nn.Linear(8, 8)
        nn.init_parameters(layer.named_parameters(), lambda n: nn.XAVIER, seed=0)
        assert (layer.bias.data == 0).all()


class TestDetectionHead:
    def test_zero_weights_give_half(self):
        head = nn.DetectionHead(8)
        out = head(Tensor(np.zeros((1, 8))))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_outputs_in_open_unit_interval(self, rng):
        head = _randomize(nn.DetectionHead(16))
        out = head(Tensor(rng.normal(size=(10, 16)).astype(np.float32) * 3))
        assert (out.data > 0).all() and (out.data < 1).all()

    def test_gradient(self, rng):
        phi = rng.normal(size=(1, 6))

        def build(ts):
            head = nn.DetectionHead(6, dtype=np.float64)
            _randomize(head, seed=2)
            for _, p in head.named_parameters():
                p.data = p.data.astype(np.float64)
            return ad.reduce_sum(head(ts[0]))

        check_gradients(build, [phi])
