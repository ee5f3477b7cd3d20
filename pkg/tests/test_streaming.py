"""Streaming runtime tests: push-granularity invariance, equality with
offline chunked decoding, and lifecycle errors."""

import numpy as np
import pytest

from moe_asr.config import ModelConfig, RescoreWeights
from moe_asr.decoding import (StreamState, ctc_log_probs, ctc_prefix_beam,
                              decode_utterance, stream_finalize, stream_push)
from moe_asr.model import U2Model


@pytest.fixture(scope="module")
def model():
    cfg = ModelConfig(m_layers=2, n_dec_layers=1, d_att=16, d_ff=32, vocab=7,
                      heads=4, cnn_kernel=7)
    return U2Model(cfg, seed=3)


def frames_for(rng, t):
    return rng.standard_normal((t, 80)).astype(np.float32)


def push_in_pieces(model, frames, chunk, sizes):
    state = StreamState(model, chunk_size=chunk, beam_size=8)
    partials = []
    lo = 0
    for s in sizes:
        state, part = stream_push(state, frames[lo:lo + s])
        partials.append(part)
        lo += s
    assert lo >= frames.shape[0]
    return stream_finalize(state), partials


class TestStreamEquivalence:
    @pytest.mark.parametrize("chunk", [1, 2, 4])
    def test_final_equals_offline_chunked_decode(self, model, chunk):
        rng = np.random.default_rng(chunk)
        frames = frames_for(rng, 167)  # T' = 19
        offline = decode_utterance(model, frames, mode="rescoring",
                                   chunk_size=chunk, beam_size=8)
        final, _ = push_in_pieces(model, frames, chunk, [167])
        assert final == offline

    def test_push_granularity_invariance(self, model):
        rng = np.random.default_rng(9)
        frames = frames_for(rng, 140)
        whole, _ = push_in_pieces(model, frames, 2, [140])
        one_by_one, _ = push_in_pieces(model, frames, 2, [1] * 140)
        ragged, _ = push_in_pieces(model, frames, 2, [7, 50, 3, 80])
        assert whole == one_by_one == ragged

    def test_big_chunk_equals_non_streaming(self, model):
        rng = np.random.default_rng(11)
        frames = frames_for(rng, 100)
        offline_full = decode_utterance(model, frames, mode="rescoring",
                                        chunk_size=None, beam_size=8)
        final, _ = push_in_pieces(model, frames, 1000, [100])
        assert final == offline_full

    def test_partials_match_offline_prefix_beams(self, model):
        rng = np.random.default_rng(13)
        frames = frames_for(rng, 167)
        chunk = 2
        state = StreamState(model, chunk_size=chunk, beam_size=8)
        enc_cache_partials = []
        for lo in range(0, 167, 20):
            state, part = stream_push(state, frames[lo:lo + 20])
            enc_cache_partials.append((state.sub_done, part))
        # oracle: offline masked encode of the processed prefix, beam over it
        for sub_done, part in enc_cache_partials:
            if sub_done == 0:
                assert part == []
                continue
            raw = frames[:8 * (sub_done - 1) + 15]
            enc = model.encode(raw, chunk_size=chunk)
            nbest = ctc_prefix_beam(ctc_log_probs(model, enc), 8)
            assert part == list(nbest.best)


class TestStreamLifecycle:
    def test_push_nothing_no_state_change(self, model):
        state = StreamState(model, chunk_size=2)
        state, part = stream_push(state, np.zeros((0, 80), dtype=np.float32))
        assert part == [] and state.sub_done == 0

    def test_empty_stream_finalize(self, model):
        state = StreamState(model, chunk_size=2)
        assert stream_finalize(state) == []

    def test_short_stream_below_one_subframe(self, model):
        state = StreamState(model, chunk_size=2)
        state, _ = stream_push(state, np.zeros((10, 80), dtype=np.float32))
        assert stream_finalize(state) == []

    def test_push_after_finalize_rejected(self, model):
        state = StreamState(model, chunk_size=2)
        stream_finalize(state)
        with pytest.raises(ValueError, match="finalized"):
            stream_push(state, np.zeros((4, 80), dtype=np.float32))

    def test_double_finalize_rejected(self, model):
        state = StreamState(model, chunk_size=2)
        stream_finalize(state)
        with pytest.raises(ValueError, match="finalized"):
            stream_finalize(state)

    def test_weights_respected(self, model):
        rng = np.random.default_rng(15)
        frames = frames_for(rng, 120)
        w = RescoreWeights(ctc_weight=1e6, reverse_weight=0.0)
        state = StreamState(model, chunk_size=4, beam_size=8, weights=w)
        state, _ = stream_push(state, frames)
        final = stream_finalize(state)
        offline = decode_utterance(model, frames, mode="beam", chunk_size=4,
                                   beam_size=8)
        assert final == offline  # huge ctc weight keeps the first-pass top-1
