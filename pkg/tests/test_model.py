"""Model tests: init, forward contracts, prediction, checkpoint round trips."""

import numpy as np
import pytest

from seqrec import tensor as T
from seqrec.attention import AttentionSpec, Kernel, MaskMode, Mechanism
from seqrec.errors import ConfigError, DataError
from seqrec.model import (
    Model,
    ModelConfig,
    config_from_dict,
    config_to_dict,
    hydra_config,
    init_model,
    load_model,
)


def small_config(vocab=12, d=8, layers=1, max_len=6, dropout=0.0, **kw):
    return ModelConfig(vocab_size=vocab, d=d, layers=layers, ffn_dim=16,
                       max_len=max_len, dropout=dropout,
                       attention=AttentionSpec(mechanism=Mechanism.DOT_PRODUCT,
                                               heads=2), **kw)


class TestInit:
    def test_same_seed_is_bit_identical(self):
        cfg = small_config()
        a = init_model(cfg, seed=7)
        b = init_model(cfg, seed=7)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data), name

    def test_different_seed_differs(self):
        cfg = small_config()
        a = init_model(cfg, seed=7)
        b = init_model(cfg, seed=8)
        assert not np.array_equal(a.params["item_embedding"].data,
                                  b.params["item_embedding"].data)

    def test_truncated_gaussian_std(self):
        cfg = ModelConfig(vocab_size=400, d=64, layers=1, ffn_dim=8, max_len=4,
                          attention=AttentionSpec(mechanism=Mechanism.DOT_PRODUCT,
                                                  heads=8), init_std=0.02)
        m = init_model(cfg, seed=0)
        emb = m.params["item_embedding"].data[1:]  # PAD row excluded
        assert 0.015 <= emb.std() <= 0.025
        assert np.abs(emb).max() <= 2 * 0.02 + 1e-6

    def test_pad_row_is_zero_and_biases_zero(self):
        m = init_model(small_config(), seed=3)
        np.testing.assert_array_equal(m.params["item_embedding"].data[0], 0.0)
        np.testing.assert_array_equal(m.params["head.b2"].data, 0.0)
        np.testing.assert_array_equal(m.params["layer0.ln1.gamma"].data, 1.0)

    def test_invalid_config_lists_every_violation(self):
        cfg = ModelConfig(vocab_size=1, d=0, layers=0, ffn_dim=0, max_len=1,
                          dropout=1.5, init_std=-1.0,
                          attention=AttentionSpec(heads=1))
        with pytest.raises(ConfigError) as err:
            init_model(cfg, seed=0)
        msg = str(err.value)
        for part in ("vocab_size", "d must", "layers", "ffn_dim", "max_len",
                     "dropout", "init_std"):
            assert part in msg

    @pytest.mark.parametrize("cfg", [
        small_config(),
        small_config(vocab=30, d=16, layers=2),
        hydra_config(vocab_size=20, d=8, max_len=5, ffn_dim=12, layers=1),
    ])
    def test_parameter_count_formula_matches_registry(self, cfg):
        m = init_model(cfg, seed=0)
        assert m.parameter_count() == Model.expected_parameter_count(cfg)


class TestForward:
    def test_logit_shape_contract(self):
        cfg = small_config()
        m = init_model(cfg, seed=0)
        tokens = np.array([[0, 0, 1, 2, 3, 4], [0, 0, 0, 5, 6, 7]])
        logits = m.forward(tokens)
        assert logits.shape == (2, cfg.max_len, cfg.vocab_size)

    def test_all_pad_row_is_finite(self):
        m = init_model(small_config(), seed=0)
        logits = m.forward(np.zeros((1, 6), dtype=np.int64))
        assert np.all(np.isfinite(logits.data))

    def test_out_of_range_token_reports_position(self):
        m = init_model(small_config(vocab=12), seed=0)
        tokens = np.zeros((2, 6), dtype=np.int64)
        tokens[1, 3] = 99
        with pytest.raises(DataError, match=r"99.*row 1.*position 3"):
            m.forward(tokens)

    def test_batch_permutation_equivariance(self):
        m = init_model(small_config(), seed=1)
        rng = np.random.default_rng(0)
        tokens = rng.integers(1, 11, size=(4, 6))
        logits = m.forward(tokens).data
        perm = [2, 0, 3, 1]
        permuted = m.forward(tokens[perm]).data
        np.testing.assert_array_equal(logits[perm], permuted)

    def test_dropout_zero_makes_train_eval_identical(self):
        m = init_model(small_config(dropout=0.0), seed=1)
        tokens = np.array([[0, 1, 2, 3, 4, 5]])
        a = m.forward(tokens, train_mode=True, rng=np.random.default_rng(0)).data
        b = m.forward(tokens, train_mode=False).data
        np.testing.assert_array_equal(a, b)

    def test_dropout_requires_rng_in_train_mode(self):
        m = init_model(small_config(dropout=0.5), seed=1)
        with pytest.raises(ConfigError, match="rng"):
            m.forward(np.ones((1, 6), dtype=np.int64), train_mode=True)

    def test_causal_end_to_end_leak(self):
        cfg = small_config()
        cfg.attention = AttentionSpec(mechanism=Mechanism.HYDRA,
                                      kernel=Kernel.L2_ROW_NORM, heads=cfg.d,
                                      mask_mode=MaskMode.CAUSAL)
        m = init_model(cfg, seed=2)
        tokens = np.array([[1, 2, 3, 4, 5, 6]])
        base = m.forward(tokens).data
        shuffled = tokens.copy()
        shuffled[0, 4:] = [6, 5]   # permute the future of position 3
        pert = m.forward(shuffled).data
        np.testing.assert_array_equal(base[0, :4], pert[0, :4])


class TestPredict:
    def test_zero_head_ranking_is_ascending_ids(self):
        cfg = small_config(vocab=10)
        m = init_model(cfg, seed=0)
        m.params["head.w2"].data[:] = 0.0
        m.params["head.b2"].data[:] = 0.0
        assert m.predict_next([3, 4], k=5) == [1, 2, 3, 4, 5]

    def test_k_larger_than_catalog(self):
        cfg = small_config(vocab=8)   # items 1..6
        m = init_model(cfg, seed=0)
        out = m.predict_next([1], k=100)
        assert sorted(out) == [1, 2, 3, 4, 5, 6]

    def test_empty_sequence_raises(self):
        m = init_model(small_config(), seed=0)
        with pytest.raises(DataError):
            m.predict_next([], k=3)

    def test_long_history_uses_most_recent(self):
        cfg = small_config(vocab=12, max_len=4)
        m = init_model(cfg, seed=0)
        row = m.encode_query([1, 2, 3, 4, 5, 6, 7])
        np.testing.assert_array_equal(row, [5, 6, 7, cfg.mask_token])


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        m = init_model(small_config(vocab=15, d=8, layers=2), seed=9)
        path = tmp_path / "model.ckpt"
        m.save(path)
        loaded = load_model(path)
        assert config_to_dict(loaded.config) == config_to_dict(m.config)
        for name in m.params:
            assert loaded.params[name].data.dtype == m.params[name].data.dtype
            assert np.array_equal(loaded.params[name].data, m.params[name].data)

    def test_save_twice_is_byte_identical(self, tmp_path):
        m = init_model(small_config(), seed=4)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        m.save(p1)
        m.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_config_dict_round_trip(self):
        cfg = hydra_config(vocab_size=33, d=16, causal=True, layers=2,
                           ffn_dim=24, max_len=7, dropout=0.2)
        again = config_from_dict(config_to_dict(cfg))
        assert config_to_dict(again) == config_to_dict(cfg)
