"""Corpus plumbing: toy corpus generation, manifest loading with CMVN and the
token-id convention, corpus-level decoding, and WER evaluation.

Manifest token ids are corpus-space (0-based codebook indices). Model class
ids reserve 0 for blank and V-1 for <sos>/<eos>, so class id = corpus id + 1.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import ModelConfig, RescoreWeights
from .decoding import decode_utterance, wer_report
from .frontend import (CmvnStats, SyntheticCodebook, Utterance, apply_cmvn,
                       estimate_cmvn, load_features, make_codebook,
                       parse_manifest)
from .model import U2Model

# toy corpus defaults; 16 frames per token survives 1/8 subsampling with room
# for CTC alignments even on all-repeat label sequences
TOY_TOKENS = 16
TOY_FRAMES_PER_TOKEN = 16
TOY_NOISE_SIGMA = 0.3
TOY_CODEBOOK_SEED = 1234


def default_codebook(num_tokens: int = TOY_TOKENS,
                     frames_per_token: int = TOY_FRAMES_PER_TOKEN,
                     noise_sigma: float = TOY_NOISE_SIGMA,
                     seed: int = TOY_CODEBOOK_SEED) -> SyntheticCodebook:
    return make_codebook(num_tokens, frames_per_token, noise_sigma, seed)


def toy_vocab(num_tokens: int = TOY_TOKENS) -> int:
    return num_tokens + 2  # blank + symbols + <sos>/<eos>


def to_class_ids(corpus_ids) -> list[int]:
    return [int(t) + 1 for t in corpus_ids]


def to_corpus_ids(class_ids) -> list[int]:
    return [int(t) - 1 for t in class_ids]


def make_toy_manifest(n_utts: int, seed: int, num_tokens: int = TOY_TOKENS,
                      min_len: int = 3, max_len: int = 8,
                      prefix: str = "utt") -> list[Utterance]:
    """Deterministic synthetic utterance list; sources are SYNTH:<seed>."""
    rng = np.random.default_rng(seed)
    utts = []
    for i in range(n_utts):
        n = int(rng.integers(min_len, max_len + 1))
        labels = rng.integers(0, num_tokens, size=n).tolist()
        utts.append(Utterance(f"{prefix}{i:05d}", f"SYNTH:{seed + 7919 * (i + 1)}",
                              labels))
    return utts


def featurize(utts, codebook: SyntheticCodebook | None,
              cmvn: CmvnStats | None) -> list[np.ndarray]:
    feats = []
    for u in utts:
        f = load_features(u, codebook)
        if cmvn is not None:
            f = apply_cmvn(f, cmvn)
        feats.append(f.data)
    return feats


def estimate_corpus_cmvn(utts, codebook: SyntheticCodebook | None) -> CmvnStats:
    from .frontend import FeatureFrames
    return estimate_cmvn(FeatureFrames(load_features(u, codebook).data) for u in utts)


def load_training_corpus(manifest_path, codebook: SyntheticCodebook | None,
                         cmvn: CmvnStats | None,
                         vocab: int) -> list[tuple[np.ndarray, list[int]]]:
    """(features, class-id labels) pairs ready for the training loop."""
    utts = parse_manifest(manifest_path)
    corpus = []
    for u, feats in zip(utts, featurize(utts, codebook, cmvn)):
        labels = to_class_ids(u.labels)
        if labels and max(labels) >= vocab - 1:
            raise ValueError(
                f"{u.utt_id}: token id {max(u.labels)} needs vocab >= {max(labels) + 2}")
        corpus.append((feats, labels))
    return corpus


def decode_corpus(model: U2Model, utts, codebook, cmvn,
                  mode: str = "rescoring", chunk_size: int | None = None,
                  beam_size: int = 10, weights: RescoreWeights | None = None,
                  workers: int = 1) -> dict[str, list[int]]:
    """utt_id -> corpus-space hypothesis ids. Distinct utterances decode
    independently (thread pool over utterances when workers > 1)."""
    feats = featurize(utts, codebook, cmvn)

    def one(frames):
        hyp = decode_utterance(model, frames, mode=mode, chunk_size=chunk_size,
                               beam_size=beam_size, weights=weights)
        return to_corpus_ids(hyp)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hyps = list(pool.map(one, feats))
    else:
        hyps = [one(f) for f in feats]
    return {u.utt_id: h for u, h in zip(utts, hyps)}


def corpus_wer(model: U2Model, utts, codebook, cmvn, mode: str = "rescoring",
               chunk_size: int | None = None, beam_size: int = 10,
               weights: RescoreWeights | None = None, workers: int = 1,
               set_name: str = "eval") -> float:
    hyps = decode_corpus(model, utts, codebook, cmvn, mode, chunk_size,
                         beam_size, weights, workers)
    pairs = [(u.labels, hyps[u.utt_id]) for u in utts]
    return wer_report({set_name: pairs}).overall_wer


def toy_model_config(num_tokens: int = TOY_TOKENS, *, m_layers: int = 2,
                     n_dec_layers: int = 1, d_att: int = 64, d_ff: int = 256,
                     heads: int = 8, num_experts: int = 0,
                     topk: int = 2) -> ModelConfig:
    return ModelConfig(m_layers=m_layers, n_dec_layers=n_dec_layers, d_att=d_att,
                       d_ff=d_ff, vocab=toy_vocab(num_tokens), heads=heads,
                       num_experts=num_experts, topk=topk)
