"""Acoustic frontend: log-mel features, global CMVN, and the synthetic corpus.

Real WAV input (16 kHz mono 16-bit PCM) goes through an 80-bin log-mel
filterbank (25 ms window, 10 ms shift, HTK mel scale, 512-point FFT, Hamming
window, magnitude-squared spectrum, log floor 1e-10). The synthetic corpus
bypasses audio entirely: each toy token has a fixed multi-frame feature
prototype and utterances are prototype concatenations plus Gaussian noise.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
FRAME_LEN = 400     # 25 ms
FRAME_SHIFT = 160   # 10 ms
N_MELS = 80
N_FFT = 512
LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-8


@dataclass
class FeatureFrames:
    """[T, 80] log-mel frames; frame timing is fixed package-wide."""

    data: np.ndarray
    frame_shift_ms: int = 10
    frame_len_ms: int = 25

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != N_MELS:
            raise ValueError(f"features must be [T, {N_MELS}]")
        if self.data.shape[0] < 1:
            raise ValueError("features must contain at least one frame")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


@dataclass
class CmvnStats:
    mean: np.ndarray
    inv_std: np.ndarray
    frame_count: int

    def __post_init__(self):
        if self.frame_count <= 0:
            raise ValueError("frame_count must be positive")
        if not (self.inv_std > 0).all():
            raise ValueError("inv_std must be strictly positive")


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """[n_mels, n_fft//2 + 1] triangular filters spanning 0 .. Nyquist."""
    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rise = (freqs - lo) / max(mid - lo, 1e-12)
        fall = (hi - freqs) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


_MEL_FB = None
_HAMMING = None


def compute_logmel(pcm: np.ndarray) -> FeatureFrames:
    """80-dim log-mel frames from a mono 16 kHz sample sequence.

    T = 1 + floor((len(pcm) - 400) / 160).
    """
    global _MEL_FB, _HAMMING
    pcm = np.asarray(pcm, dtype=np.float64).reshape(-1)
    if pcm.size < FRAME_LEN:
        raise ValueError("utterance too short")
    if _MEL_FB is None:
        _MEL_FB = mel_filterbank()
        _HAMMING = np.hamming(FRAME_LEN)
    n_frames = 1 + (pcm.size - FRAME_LEN) // FRAME_SHIFT
    idx = np.arange(FRAME_LEN)[None, :] + FRAME_SHIFT * np.arange(n_frames)[:, None]
    frames = pcm[idx] * _HAMMING
    spec = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    mel = spec @ _MEL_FB.T
    logmel = np.log(np.maximum(mel, LOG_FLOOR))
    return FeatureFrames(logmel.astype(np.float32))


def estimate_cmvn(corpus) -> CmvnStats:
    """Global per-dimension mean/inv-std over all frames of all utterances.

    Zero-variance dimensions are floored, never divided by zero.
    """
    total = np.zeros(N_MELS, dtype=np.float64)
    total_sq = np.zeros(N_MELS, dtype=np.float64)
    count = 0
    for utt in corpus:
        d = utt.data.astype(np.float64)
        total += d.sum(axis=0)
        total_sq += (d * d).sum(axis=0)
        count += d.shape[0]
    if count < 2:
        raise ValueError("CMVN needs at least two frames")
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    inv_std = 1.0 / np.sqrt(var + VAR_FLOOR)
    return CmvnStats(mean.astype(np.float32), inv_std.astype(np.float32), count)


def apply_cmvn(frames: FeatureFrames, stats: CmvnStats) -> FeatureFrames:
    if frames.data.shape[1] != stats.mean.shape[0]:
        raise ValueError("CMVN dimension mismatch")
    out = (frames.data - stats.mean) * stats.inv_std
    return FeatureFrames(out.astype(np.float32),
                         frames.frame_shift_ms, frames.frame_len_ms)


@dataclass
class SyntheticCodebook:
    """One P-frame prototype per toy token; utterances are noisy prototype runs."""

    prototypes: np.ndarray  # [V_toy, P, 80]
    noise_sigma: float
    seed: int

    def __post_init__(self):
        v, p = self.prototypes.shape[:2]
        if v < 2 or p < 2:
            raise ValueError("codebook needs >= 2 tokens of >= 2 frames each")
        flat = self.prototypes.reshape(v, -1)
        d2 = ((flat[:, None, :] - flat[None, :, :]) ** 2).sum(-1)
        if np.min(d2[~np.eye(v, dtype=bool)]) <= 0:
            raise ValueError("prototypes must be pairwise distinct")

    @property
    def num_tokens(self) -> int:
        return self.prototypes.shape[0]

    @property
    def frames_per_token(self) -> int:
        return self.prototypes.shape[1]


def make_codebook(num_tokens: int, frames_per_token: int,
                  noise_sigma: float, seed: int) -> SyntheticCodebook:
    rng = np.random.default_rng(seed)
    protos = rng.normal(0.0, 2.0, size=(num_tokens, frames_per_token, N_MELS))
    return SyntheticCodebook(protos.astype(np.float32), noise_sigma, seed)


def synth_utterance(labels, codebook: SyntheticCodebook,
                    rng_seed: int) -> tuple[FeatureFrames, list[int]]:
    """Concatenate the prototypes for `labels` and add i.i.d. Gaussian noise.

    Deterministic given rng_seed; T = len(labels) * P.
    """
    labels = [int(t) for t in labels]
    if not labels:
        raise ValueError("labels must be non-empty")
    for t in labels:
        if not 0 <= t < codebook.num_tokens:
            raise ValueError(f"unknown token id {t}")
    frames = np.concatenate([codebook.prototypes[t] for t in labels], axis=0)
    if codebook.noise_sigma > 0:
        rng = np.random.default_rng(rng_seed)
        noise = rng.normal(0.0, codebook.noise_sigma, size=frames.shape)
        frames = frames + noise.astype(np.float32)
    return FeatureFrames(frames.astype(np.float32)), labels


def read_wav(path) -> np.ndarray:
    """16-bit PCM mono 16 kHz RIFF only; anything else is rejected."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio")
        if wf.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz audio")
        if wf.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM")
        raw = wf.readframes(wf.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0


def write_wav(path, pcm: np.ndarray) -> None:
    data = np.clip(np.asarray(pcm, dtype=np.float64), -1.0, 1.0)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes((data * 32767.0).astype("<i2").tobytes())


@dataclass
class Utterance:
    utt_id: str
    source: str          # filesystem path or "SYNTH:<seed>"
    labels: list[int]    # corpus-space token ids


def parse_manifest(path) -> list[Utterance]:
    """One utterance per line: `utt_id<TAB>path-or-SYNTH:<seed><TAB>ids`."""
    utts = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
        utt_id, source, id_str = parts
        labels = [int(t) for t in id_str.split()] if id_str.strip() else []
        utts.append(Utterance(utt_id, source, labels))
    return utts


def write_manifest(utts, path) -> None:
    lines = [f"{u.utt_id}\t{u.source}\t{' '.join(str(t) for t in u.labels)}"
             for u in utts]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_features(utt: Utterance, codebook: SyntheticCodebook | None) -> FeatureFrames:
    if utt.source.startswith("SYNTH:"):
        if codebook is None:
            raise ValueError(f"{utt.utt_id}: synthetic utterance but no codebook configured")
        frames, _ = synth_utterance(utt.labels, codebook, int(utt.source[6:]))
        return frames
    return compute_logmel(read_wav(utt.source))
