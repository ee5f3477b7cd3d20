"""Checkpoint container tests: bit-identical round trips and validation."""

import numpy as np
import pytest

from moe_asr.checkpoint import (CheckpointError, load_checkpoint, load_cmvn,
                                load_tensors, save_checkpoint, save_cmvn,
                                save_tensors)
from moe_asr.config import ModelConfig
from moe_asr.frontend import CmvnStats
from moe_asr.model import U2Model


def small_cfg(**over):
    kw = dict(m_layers=1, n_dec_layers=1, d_att=8, d_ff=12, vocab=5, heads=2,
              cnn_kernel=3)
    kw.update(over)
    return ModelConfig(**kw)


class TestRoundTrip:
    def test_bit_identical(self, tmp_path):
        model = U2Model(small_cfg(), seed=0)
        save_checkpoint(model, tmp_path / "ck")
        twin = U2Model(small_cfg(), seed=99)
        load_checkpoint(tmp_path / "ck", twin)
        for name, p in model.params.items():
            np.testing.assert_array_equal(p.data, twin.params[name].data)

    def test_forward_identical_after_reload(self, tmp_path):
        model = U2Model(small_cfg(), seed=1)
        rng = np.random.default_rng(2)
        frames = rng.standard_normal((31, 80)).astype(np.float32)
        want = model.forward(frames, labels=[1, 2]).ctc_logits.data
        save_checkpoint(model, tmp_path / "ck")
        twin = U2Model(small_cfg(), seed=77)
        load_checkpoint(tmp_path / "ck", twin)
        got = twin.forward(frames, labels=[1, 2]).ctc_logits.data
        np.testing.assert_array_equal(want, got)

    def test_many_random_models(self, tmp_path):
        # idempotence over repeated save/load of randomly seeded models
        for seed in range(100):
            tensors = {f"t{i}": np.random.default_rng(seed * 10 + i)
                       .standard_normal((i + 1, 3)).astype(np.float32)
                       for i in range(3)}
            save_tensors(tensors, tmp_path / f"m{seed}")
            back = load_tensors(tmp_path / f"m{seed}")
            assert set(back) == set(tensors)
            for k in tensors:
                np.testing.assert_array_equal(back[k], tensors[k])


class TestValidation:
    def test_missing_tensor_named(self, tmp_path):
        model = U2Model(small_cfg(), seed=3)
        save_checkpoint(model, tmp_path / "ck")
        manifest = (tmp_path / "ck" / "MANIFEST").read_text().splitlines()
        dropped = [l for l in manifest if not l.startswith("ctc.out.b\t")]
        (tmp_path / "ck" / "MANIFEST").write_text("\n".join(dropped) + "\n")
        with pytest.raises(CheckpointError, match="ctc.out.b"):
            load_checkpoint(tmp_path / "ck", U2Model(small_cfg(), seed=3))

    def test_dense_checkpoint_into_moe_config_rejected(self, tmp_path):
        dense = U2Model(small_cfg(), seed=4)
        save_checkpoint(dense, tmp_path / "ck")
        moe = U2Model(small_cfg(num_experts=4, topk=2), seed=4)
        with pytest.raises(CheckpointError, match="mismatch"):
            load_checkpoint(tmp_path / "ck", moe)

    def test_shape_mismatch_named(self, tmp_path):
        model = U2Model(small_cfg(), seed=5)
        save_checkpoint(model, tmp_path / "ck")
        bigger = U2Model(small_cfg(d_ff=16), seed=5)
        with pytest.raises(CheckpointError, match="enc.0.ffn1.W1"):
            load_checkpoint(tmp_path / "ck", bigger)

    def test_corrupt_file_rejected(self, tmp_path):
        model = U2Model(small_cfg(), seed=6)
        save_checkpoint(model, tmp_path / "ck")
        (tmp_path / "ck" / "ctc.out.W.bin").write_bytes(b"\x00" * 7)
        with pytest.raises(CheckpointError, match="ctc.out.W"):
            load_checkpoint(tmp_path / "ck", U2Model(small_cfg(), seed=6))

    def test_checkpoint_names_follow_contract(self):
        moe = U2Model(small_cfg(num_experts=2, topk=1), seed=7)
        names = set(moe.params)
        assert "enc.0.ffn1.expert0.W1" in names
        assert "enc.0.ffn2.router.W_r" in names
        assert "dec_l2r.0.ffn.expert1.b2" in names
        assert "dec_r2l.0.ffn.router.W_r" in names
        dense = U2Model(small_cfg(), seed=8)
        assert "enc.0.ffn1.W1" in dense.params
        assert "dec_r2l.0.ffn.W2" in dense.params


class TestCmvnFile:
    def test_round_trip(self, tmp_path):
        stats = CmvnStats(np.arange(80, dtype=np.float32),
                          np.full(80, 0.5, dtype=np.float32), 1234)
        save_cmvn(stats, tmp_path / "cmvn")
        back = load_cmvn(tmp_path / "cmvn")
        np.testing.assert_array_equal(back.mean, stats.mean)
        np.testing.assert_array_equal(back.inv_std, stats.inv_std)
        assert back.frame_count == 1234
