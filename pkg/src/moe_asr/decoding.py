"""Two-pass inference: CTC first pass (greedy / prefix beam search), attention
rescoring second pass, the incremental streaming runtime, and WER scoring.

Token ids here are model class ids: blank is 0, <sos>/<eos> is V-1, real
symbols live in between. Hypotheses never contain blank.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RescoreWeights
from .model import U2Model

NEG_INF = -np.inf


@dataclass
class NBestList:
    """Ranked CTC hypotheses with their total CTC log probabilities."""

    hypotheses: list  # [(tuple[int, ...], float)], best first
    beam_size: int

    def __post_init__(self):
        scores = [s for _, s in self.hypotheses]
        if scores != sorted(scores, reverse=True):
            raise ValueError("n-best must be sorted by score descending")
        if len(self.hypotheses) > self.beam_size:
            raise ValueError("n-best longer than beam size")
        if any(0 in seq for seq, _ in self.hypotheses):
            raise ValueError("hypotheses must not contain blank")

    @property
    def best(self) -> tuple:
        return self.hypotheses[0][0]


def ctc_greedy(log_probs: np.ndarray) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks. Ties pick the lower id."""
    ids = np.argmax(log_probs, axis=-1)
    out = []
    prev = -1
    for i in ids:
        if i != prev and i != 0:
            out.append(int(i))
        prev = i
    return out


class PrefixBeamState:
    """Incremental CTC prefix beam search.

    Per prefix we keep the log probabilities of ending in blank vs non-blank;
    one `step` folds in a frame of log posteriors. Feeding frames one at a
    time or in blocks gives identical results, which is what makes the
    streaming runtime push-granularity invariant.
    """

    def __init__(self, beam_size: int):
        if beam_size < 1:
            raise ValueError("beam size must be >= 1")
        self.beam_size = beam_size
        self.beams: dict[tuple, tuple[float, float]] = {(): (0.0, NEG_INF)}

    def step(self, lp: np.ndarray) -> None:
        new: dict[tuple, list[float]] = {}

        def bump(prefix, blank_end, val):
            entry = new.get(prefix)
            if entry is None:
                entry = [NEG_INF, NEG_INF]
                new[prefix] = entry
            entry[blank_end] = np.logaddexp(entry[blank_end], val)

        for prefix, (pb, pnb) in self.beams.items():
            total = np.logaddexp(pb, pnb)
            bump(prefix, 0, total + lp[0])
            last = prefix[-1] if prefix else None
            for v in range(1, len(lp)):
                if v == last:
                    bump(prefix, 1, pnb + lp[v])          # repeat merges
                    bump(prefix + (v,), 1, pb + lp[v])    # blank-separated copy
                else:
                    bump(prefix + (v,), 1, total + lp[v])
        alive = [(p, e) for p, e in new.items() if np.isfinite(np.logaddexp(*e))]
        ranked = sorted(alive,
                        key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0]))
        self.beams = {p: (b, nb) for p, (b, nb) in ranked[:self.beam_size]}

    def nbest(self) -> NBestList:
        scored = [(p, float(np.logaddexp(b, nb))) for p, (b, nb) in self.beams.items()]
        scored.sort(key=lambda kv: (-kv[1], kv[0]))
        return NBestList(scored[:self.beam_size], self.beam_size)

    @property
    def best_prefix(self) -> tuple:
        return self.nbest().best


def ctc_prefix_beam(log_probs: np.ndarray, beam_size: int) -> NBestList:
    state = PrefixBeamState(beam_size)
    for t in range(log_probs.shape[0]):
        state.step(log_probs[t])
    return state.nbest()


def teacher_forced_logprob(logits: np.ndarray, target) -> float:
    """Joint log probability of `target` under per-position softmaxes."""
    m = logits.max(axis=-1, keepdims=True)
    lp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    return float(sum(lp[t, int(u)] for t, u in enumerate(target)))


def attention_rescore(nbest: NBestList, enc_out: Tensor, model: U2Model,
                      weights: RescoreWeights) -> tuple:
    """Second pass: re-rank with bidirectional decoder likelihoods.

    score(h) = (1-beta) logP_l2r(h+eos) + beta logP_r2l(rev(h)+eos)
               + ctc_weight * ctc_log_prob(h); ties keep the earlier rank.
    """
    if not nbest.hypotheses:
        raise ValueError("empty n-best list")
    eos = model.cfg.sos_eos_id
    beta = weights.reverse_weight
    best_idx, best_score = 0, NEG_INF
    for rank, (hyp, ctc_lp) in enumerate(nbest.hypotheses):
        labels = list(hyp)
        l2r = model.decoder_forward(enc_out, labels, "l2r")
        score = (1.0 - beta) * teacher_forced_logprob(l2r.data, labels + [eos])
        if beta > 0.0:
            r2l = model.decoder_forward(enc_out, labels, "r2l")
            rev_target = list(reversed(labels)) + [eos]
            score += beta * teacher_forced_logprob(r2l.data, rev_target)
        score += weights.ctc_weight * ctc_lp
        if score > best_score:
            best_idx, best_score = rank, score
    return nbest.hypotheses[best_idx][0]


def ctc_log_probs(model: U2Model, enc_out: Tensor) -> np.ndarray:
    return ad.log_softmax(model.ctc_head(enc_out)).data


def decode_utterance(model: U2Model, frames: np.ndarray, mode: str = "rescoring",
                     chunk_size: int | None = None, beam_size: int = 10,
                     weights: RescoreWeights | None = None) -> list[int]:
    """Offline decode of one utterance (features already normalized)."""
    enc_out = model.encode(frames, chunk_size)
    lp = ctc_log_probs(model, enc_out)
    if mode == "greedy":
        return ctc_greedy(lp)
    nbest = ctc_prefix_beam(lp, beam_size)
    if mode == "beam":
        return list(nbest.best)
    if mode == "rescoring":
        w = weights or RescoreWeights()
        return list(attention_rescore(nbest, enc_out, model, w))
    raise ValueError(f"unknown decode mode {mode!r}")


# ---------------------------------------------------------------------------
# streaming runtime

SUB_WINDOW = 15  # receptive field of one subsampled frame, in raw frames
SUB_STRIDE = 8


@dataclass
class StreamState:
    """Single-owner state of one live stream.

    Raw feature frames buffer until a full chunk of subsampled frames is
    computable; the encoder cache and CTC beam then advance chunk by chunk,
    so any push granularity yields the same transcript.
    """

    model: U2Model
    chunk_size: int
    beam_size: int = 10
    weights: RescoreWeights = field(default_factory=RescoreWeights)
    buffered: np.ndarray | None = None
    sub_done: int = 0
    cache: object = None
    beam: PrefixBeamState | None = None
    enc_rows: list = field(default_factory=list)
    finalized: bool = False

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        self.cache = self.model.encoder.new_cache(self.chunk_size)
        self.beam = PrefixBeamState(self.beam_size)

    def _available_subframes(self) -> int:
        n = 0 if self.buffered is None else self.buffered.shape[0]
        if n < SUB_WINDOW:
            return 0
        return (n - SUB_WINDOW) // SUB_STRIDE + 1

    def _advance(self, j_hi: int) -> None:
        """Encode subsampled frames [sub_done, j_hi) as one chunk."""
        j_lo = self.sub_done
        raw = self.buffered[SUB_STRIDE * j_lo: SUB_STRIDE * (j_hi - 1) + SUB_WINDOW]
        sub = self.model.subsampler(raw)
        out, self.cache = self.model.encoder.forward_chunk(sub, self.cache)
        self.enc_rows.append(out.data)
        lp = ctc_log_probs(self.model, out)
        for t in range(lp.shape[0]):
            self.beam.step(lp[t])
        self.sub_done = j_hi


def stream_push(state: StreamState, frames: np.ndarray) -> tuple[StreamState, list[int]]:
    """Buffer frames, consume every complete chunk, return the running best."""
    if state.finalized:
        raise ValueError("stream already finalized")
    frames = np.asarray(frames, dtype=np.float32).reshape(-1, 80)
    if frames.shape[0]:
        state.buffered = frames if state.buffered is None else \
            np.concatenate([state.buffered, frames], axis=0)
    while state._available_subframes() - state.sub_done >= state.chunk_size:
        state._advance(state.sub_done + state.chunk_size)
    return state, list(state.beam.best_prefix)


def stream_finalize(state: StreamState) -> list[int]:
    """Flush the tail as a last short chunk and rescore the accumulated n-best."""
    if state.finalized:
        raise ValueError("stream already finalized")
    state.finalized = True
    avail = state._available_subframes()
    if avail > state.sub_done:
        state._advance(avail)
    if not state.enc_rows:
        return []
    enc_out = Tensor(np.concatenate(state.enc_rows, axis=0))
    nbest = state.beam.nbest()
    return list(attention_rescore(nbest, enc_out, state.model, state.weights))


# ---------------------------------------------------------------------------
# WER


@dataclass
class SetScore:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_length: int = 0
    empty_refs: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        if self.ref_length == 0:
            return float("inf") if self.errors else 0.0
        return self.errors / self.ref_length


@dataclass
class WerReport:
    sets: dict  # name -> SetScore
    mean_wer: float
    overall_wer: float


def edit_ops(ref, hyp) -> tuple[int, int, int]:
    """Minimal (substitutions, deletions, insertions) aligning hyp to ref."""
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i, j] = min(sub, cost[i - 1, j] + 1, cost[i, j - 1] + 1)
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), int(d), int(ins)


def wer_report(set_pairs: dict) -> WerReport:
    """`set_pairs`: set name -> list of (ref tokens, hyp tokens).

    Reports both conventions: the arithmetic mean of per-set WERs, and the
    overall WER (summed errors over summed reference length).
    """
    if not set_pairs:
        raise ValueError("no sets to score")
    sets = {}
    for name, pairs in set_pairs.items():
        score = SetScore()
        if not pairs:
            raise ValueError(f"set {name!r} has no utterances")
        for ref, hyp in pairs:
            s, d, ins = edit_ops(list(ref), list(hyp))
            score.substitutions += s
            score.deletions += d
            score.insertions += ins
            score.ref_length += len(ref)
            if len(ref) == 0:
                score.empty_refs += 1
        sets[name] = score
    mean = float(np.mean([sc.wer for sc in sets.values()]))
    total_err = sum(sc.errors for sc in sets.values())
    total_ref = sum(sc.ref_length for sc in sets.values())
    overall = total_err / total_ref if total_ref else (float("inf") if total_err else 0.0)
    return WerReport(sets, mean, overall)


def format_wer_report(report: WerReport) -> str:
    lines = [f"{'set':<16}{'S':>6}{'D':>6}{'I':>6}{'ref_len':>9}{'WER%':>9}"]
    for name, sc in sorted(report.sets.items()):
        flag = f"  [{sc.empty_refs} empty refs]" if sc.empty_refs else ""
        lines.append(f"{name:<16}{sc.substitutions:>6}{sc.deletions:>6}"
                     f"{sc.insertions:>6}{sc.ref_length:>9}{100 * sc.wer:>9.2f}{flag}")
    lines.append(f"MEAN {100 * report.mean_wer:.2f}")
    lines.append(f"OVERALL {100 * report.overall_wer:.2f}")
    return "\n".join(lines)
