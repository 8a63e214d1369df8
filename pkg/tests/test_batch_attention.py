import numpy as np
import oracles
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from batchformer import tensor as T
from batchformer.batch_attention import (BatchFormer, BatchFormerConfig, batch_attention_v1,
                                         batch_attention_v2, position_locality_probe)
from batchformer.nn import EncoderBlock, MultiHeadSelfAttention, encoder_block_param_count
from batchformer.tensor import Tensor

pytestmark = pytest.mark.usefixtures("f64")


def _instance(seed, max_b=6, max_n=8):
    rng = np.random.default_rng(seed)
    b, n = int(rng.integers(1, max_b + 1)), int(rng.integers(1, max_n + 1))
    c, h = [(4, 1), (4, 2), (8, 4), (12, 4), (16, 4), (16, 2)][int(rng.integers(6))]
    blk = EncoderBlock(c, h, int(rng.choice([c, 2 * c])), 0.0, rng)
    return rng, blk, rng.normal(size=(b, n, c))


def test_v2_matches_loop_oracle_small(rng):
    blk = EncoderBlock(4, 2, 4, 0.0, rng)
    x = rng.normal(size=(2, 3, 4))
    np.testing.assert_allclose(batch_attention_v2(Tensor(x), blk).data,
                               oracles.batch_attention_v2(x, blk), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_v2_matches_loop_oracle_random(seed):
    _, blk, x = _instance(seed)
    np.testing.assert_allclose(batch_attention_v2(Tensor(x), blk).data,
                               oracles.batch_attention_v2(x, blk), rtol=0, atol=1e-10)


def test_single_sample_batch(rng):
    blk = EncoderBlock(4, 2, 4, 0.0, rng)
    x = rng.normal(size=(1, 5, 4))
    out, w = batch_attention_v2(Tensor(x), blk, return_attn=True)
    assert w.shape == (5, 2, 1, 1)
    np.testing.assert_array_equal(w, 1.0)
    ref = np.stack([oracles.encoder_sequence(x[:, n], blk) for n in range(5)], axis=1)
    np.testing.assert_allclose(out.data, ref, atol=1e-10)


def test_identical_samples(rng):
    blk = EncoderBlock(4, 2, 4, 0.0, rng)
    s = rng.normal(size=(3, 4))
    out, w = batch_attention_v2(Tensor(np.stack([s, s])), blk, return_attn=True)
    np.testing.assert_array_equal(out.data[0], out.data[1])
    np.testing.assert_allclose(w, 0.5, atol=1e-15)


def test_empty_batch_is_data_error(rng):
    blk = EncoderBlock(4, 2, 4, 0.0, rng)
    with pytest.raises(T.DataError):
        batch_attention_v2(Tensor(np.zeros((0, 2, 4))), blk)


def test_v1_is_v2_with_one_position(rng):
    blk = EncoderBlock(8, 4, 8, 0.0, rng)
    x = rng.normal(size=(5, 8))
    np.testing.assert_array_equal(batch_attention_v1(Tensor(x), blk).data,
                                  batch_attention_v2(Tensor(x[:, None, :]), blk).data[:, 0])
    single = rng.normal(size=(1, 8))
    np.testing.assert_array_equal(batch_attention_v1(Tensor(single), blk).data,
                                  batch_attention_v1(Tensor(single), blk).data)


def test_v1_permutation_equivariance(rng):
    blk = EncoderBlock(8, 4, 8, 0.0, rng)
    x = rng.normal(size=(5, 8))
    perm = rng.permutation(5)
    np.testing.assert_array_equal(batch_attention_v1(Tensor(x[perm]), blk).data,
                                  batch_attention_v1(Tensor(x), blk).data[perm])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_v2_permutation_equivariance(seed):
    with T.precision("float64"):
        rng, blk, x = _instance(seed)
        perm = rng.permutation(x.shape[0])
        a = batch_attention_v2(Tensor(x[perm]), blk).data
        b = batch_attention_v2(Tensor(x), blk).data[perm]
    np.testing.assert_array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(-5, 5, allow_nan=False).filter(lambda d: d != 0))
def test_position_locality(seed, delta):
    with T.precision("float64"):
        rng, blk, x = _instance(seed, max_n=6)
        if x.shape[1] < 2:
            x = np.concatenate([x, x], axis=1)
        i, j = rng.choice(x.shape[1], size=2, replace=False)
        assert position_locality_probe(x, blk, int(i), int(j), delta)


def test_exact_path_matches_matmul_path(rng):
    blk = EncoderBlock(8, 2, 8, 0.0, rng)
    seqs = Tensor(rng.normal(size=(3, 5, 8)))
    np.testing.assert_allclose(blk(seqs, exact=True).data, blk(seqs).data, rtol=0, atol=1e-12)


def test_locality_probe_rejects_same_position(rng):
    blk = EncoderBlock(4, 2, 4, 0.0, rng)
    with pytest.raises(ValueError):
        position_locality_probe(rng.normal(size=(2, 3, 4)), blk, 1, 1, 0.5)


def test_spatial_attention_is_not_local(rng):
    att = MultiHeadSelfAttention(4, 2, rng)
    x = rng.normal(size=(2, 3, 4))
    y = x.copy()
    y[:, 2] += 0.5
    assert not np.array_equal(att(Tensor(x)).data[:, 0], att(Tensor(y)).data[:, 0])


def test_one_parameter_set_regardless_of_positions(rng):
    cfg = BatchFormerConfig(heads=4, insert_positions=(0,))
    bf = BatchFormer(cfg, 16, 4, rng).eval()
    assert bf.num_parameters() == encoder_block_param_count(16, 16)
    for n in (1, 4, 16):
        assert bf.transform(Tensor(rng.normal(size=(3, n, 16))), 0).shape == (3, n, 16)


def test_shared_instance_references_one_block(rng):
    shared = BatchFormer(BatchFormerConfig(insert_positions=(0, 1, 2), shared_instance=True), 8, 4, rng)
    assert shared.block_for(0) is shared.block_for(2)
    assert shared.num_parameters() == encoder_block_param_count(8, 8)
    separate = BatchFormer(BatchFormerConfig(insert_positions=(0, 1, 2)), 8, 4, rng)
    assert separate.block_for(0) is not separate.block_for(1)
    assert separate.num_parameters() == 3 * encoder_block_param_count(8, 8)


def test_config_defaults_and_validation():
    cfg = BatchFormerConfig()
    assert (cfg.mode, cfg.heads, cfg.dropout, cfg.ffn_width) == ("v2", 4, 0.5, None)
    with pytest.raises(T.ConfigError):
        BatchFormerConfig(insert_positions=(4,)).validate(32, 4)
    with pytest.raises(T.ConfigError):
        BatchFormerConfig(insert_positions=(2, 1)).validate(32, 4)
    with pytest.raises(T.ConfigError):
        BatchFormerConfig(heads=3).validate(32, 4)
    with pytest.raises(T.ConfigError):
        BatchFormerConfig(mode="v3").validate(32, 4)


def test_dropout_uses_its_own_stream(rng):
    cfg = BatchFormerConfig(heads=2, dropout=0.5)
    a = BatchFormer(cfg, 4, 1, np.random.default_rng(0), np.random.default_rng(7))
    b = BatchFormer(cfg, 4, 1, np.random.default_rng(0), np.random.default_rng(7))
    x = Tensor(rng.normal(size=(3, 2, 4)))
    np.testing.assert_array_equal(a.transform(x, 0).data, b.transform(x, 0).data)
    a.eval()
    np.testing.assert_allclose(a.transform(x, 0).data, oracles.batch_attention_v2(x.data, a.block_for(0)),
                               atol=1e-10)
