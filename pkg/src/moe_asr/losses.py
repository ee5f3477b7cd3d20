"""Joint training objective: CTC plus bidirectional attention cross-entropy.

The combined loss is the only aggregation in the training graph; its three
components are tagged on the tape so tests can assert nothing else sneaks in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor
from .config import ConfigError, LossWeights

NEG_INF = -np.inf


@dataclass
class LossBreakdown:
    l_ctc: float
    l_aed_l2r: float
    l_aed_r2l: float
    l_total: float


def reverse_labels(labels):
    return list(reversed(list(labels)))


def min_ctc_frames(labels) -> int:
    """Shortest alignment: one frame per label plus a blank between repeats."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def ctc_forward_backward(log_probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Negative log likelihood of `labels` and its gradient wrt log_probs.

    log_probs: [T, V] log-softmaxed frame posteriors, blank = id 0. Runs the
    standard forward-backward recursion over the blank-augmented sequence in
    log space, in the dtype of the input.
    """
    labels = [int(u) for u in labels]
    t_len, vocab = log_probs.shape
    for u in labels:
        if not 0 < u < vocab:
            raise ValueError(f"label id {u} invalid for vocab {vocab} (0 is blank)")
    if min_ctc_frames(labels) > t_len:
        raise ValueError("no valid alignment")

    aug = [0]
    for u in labels:
        aug += [u, 0]
    s_len = len(aug)
    aug = np.array(aug)

    dtype = log_probs.dtype
    alpha = np.full((t_len, s_len), NEG_INF, dtype=dtype)
    alpha[0, 0] = log_probs[0, 0]
    if s_len > 1:
        alpha[0, 1] = log_probs[0, aug[1]]
    # transitions: stay, advance one, or skip a blank between distinct labels
    skip_ok = np.zeros(s_len, dtype=bool)
    skip_ok[2:] = (aug[2:] != 0) & (aug[2:] != aug[:-2])
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        adv = np.full(s_len, NEG_INF, dtype=dtype)
        adv[1:] = prev[:-1]
        skip = np.full(s_len, NEG_INF, dtype=dtype)
        skip[2:] = prev[:-2]
        skip = np.where(skip_ok, skip, NEG_INF)
        m = np.maximum(np.maximum(stay, adv), skip)
        safe = np.where(np.isfinite(m), m, 0.0)
        acc = np.where(np.isfinite(stay), np.exp(stay - safe), 0.0)
        acc += np.where(np.isfinite(adv), np.exp(adv - safe), 0.0)
        acc += np.where(np.isfinite(skip), np.exp(skip - safe), 0.0)
        with np.errstate(divide="ignore"):
            alpha[t] = np.where(np.isfinite(m), safe + np.log(acc), NEG_INF) \
                + log_probs[t, aug]

    ends = [alpha[-1, -1]]
    if s_len > 1:
        ends.append(alpha[-1, -2])
    m = max(ends)
    if not np.isfinite(m):
        raise ValueError("no valid alignment")
    log_p = m + np.log(sum(np.exp(e - m) for e in ends))

    # beta[t, s]: suffix probability from t+1 on, excluding frame t's emission
    beta = np.full((t_len, s_len), NEG_INF, dtype=dtype)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    skip_fwd = np.zeros(s_len, dtype=bool)
    skip_fwd[:-2] = skip_ok[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + log_probs[t + 1, aug]
        stay = nxt
        adv = np.full(s_len, NEG_INF, dtype=dtype)
        adv[:-1] = nxt[1:]
        skip = np.full(s_len, NEG_INF, dtype=dtype)
        skip[:-2] = nxt[2:]
        skip = np.where(skip_fwd, skip, NEG_INF)
        m2 = np.maximum(np.maximum(stay, adv), skip)
        safe = np.where(np.isfinite(m2), m2, 0.0)
        acc = np.where(np.isfinite(stay), np.exp(stay - safe), 0.0)
        acc += np.where(np.isfinite(adv), np.exp(adv - safe), 0.0)
        acc += np.where(np.isfinite(skip), np.exp(skip - safe), 0.0)
        with np.errstate(divide="ignore"):
            beta[t] = np.where(np.isfinite(m2), safe + np.log(acc), NEG_INF)

    # occupancy gamma[t, s] = P(path passes (t, s) | labels); exp(-inf) -> 0
    gamma = alpha + beta - log_p
    grad = np.zeros_like(log_probs)
    np.add.at(grad.T, aug, np.exp(gamma).T)
    return float(-log_p), -grad


def ctc_loss(log_probs: Tensor, labels) -> Tensor:
    """CTC loss as a tape node over log-softmaxed posteriors."""
    value, grad = ctc_forward_backward(log_probs.data, labels)
    out = Tensor(np.asarray(value, dtype=log_probs.dtype))
    return ad.record_op(out, (log_probs,), lambda g: (g * grad,), kind="loss:ctc")


def aed_ce_loss(logits: Tensor, target, smoothing: float = 0.1,
                kind: str = "loss:aed") -> Tensor:
    """Mean token cross-entropy with label smoothing over V classes.

    `target` must already include <eos> (and be reversed upstream for the
    right-to-left decoder). The true class gets 1 - eps, the rest share eps.
    """
    target = np.asarray([int(u) for u in target])
    n, v = logits.data.shape
    if len(target) != n:
        raise ValueError(f"target length {len(target)} != logit rows {n}")
    lp = ad.log_softmax(logits)
    true_lp = ad.take_elems(lp, np.arange(n), target)
    loss = ad.scale(ad.tmean(true_lp), -(1.0 - smoothing))
    if smoothing > 0.0:
        rest = ad.scale(ad.tsum(lp), 1.0 / n)
        rest = ad.add(rest, ad.scale(ad.tmean(true_lp), -1.0))
        loss = ad.add(loss, ad.scale(rest, -smoothing / (v - 1)))
    out = Tensor(loss.data.copy())  # identity node, so the tag names the value
    return ad.record_op(out, (loss,), lambda g: (g,), kind=kind)


def combined_loss(l_ctc: Tensor, l_aed_l2r: Tensor, l_aed_r2l: Tensor,
                  weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """The full objective: lam * ctc + (1-lam) * (alpha * r2l + (1-alpha) * l2r).

    Recorded as one tape node; structurally the only loss aggregation in the
    package, so nothing else can contribute a term.
    """
    lam, alpha = weights.lam, weights.alpha
    if not (0.0 <= lam <= 1.0 and 0.0 <= alpha <= 1.0):
        raise ConfigError("loss weights must lie in [0, 1]")
    value = lam * l_ctc.data + (1.0 - lam) * (alpha * l_aed_r2l.data
                                              + (1.0 - alpha) * l_aed_l2r.data)
    total = Tensor(np.asarray(value, dtype=l_ctc.dtype))

    def rule(g):
        return (g * lam, g * (1.0 - lam) * (1.0 - alpha), g * (1.0 - lam) * alpha)

    ad.record_op(total, (l_ctc, l_aed_l2r, l_aed_r2l), rule, kind="loss:combine")
    breakdown = LossBreakdown(float(l_ctc.data), float(l_aed_l2r.data),
                              float(l_aed_r2l.data), float(total.data))
    return total, breakdown


def assert_pure_objective(tape: GradTape, total: Tensor,
                          batch_size: int | None = None) -> None:
    """Structural no-auxiliary-loss check.

    Requires: one CTC + one AED node per direction per combine node; loss
    component outputs feeding combine nodes only; and, when batch_size is
    given, the objective exactly equal to the mean of the combine values.
    """
    per_kind: dict[str, int] = {}
    for n in tape.nodes:
        if n.kind:
            per_kind[n.kind] = per_kind.get(n.kind, 0) + 1
    n_combine = per_kind.get("loss:combine", 0)
    if n_combine == 0:
        raise AssertionError("objective graph has no combine node")
    expected = {"loss:ctc": n_combine, "loss:aed_l2r": n_combine,
                "loss:aed_r2l": n_combine, "loss:combine": n_combine}
    if per_kind != expected:
        raise AssertionError(f"unexpected loss structure: {per_kind}")

    component_ids = {id(n.out) for n in tape.nodes
                     if n.kind in ("loss:ctc", "loss:aed_l2r", "loss:aed_r2l")}
    for node in tape.nodes:
        if node.kind == "loss:combine":
            continue
        for t in node.inputs:
            if isinstance(t, Tensor) and id(t) in component_ids:
                raise AssertionError(
                    f"loss component consumed by non-combine node (kind={node.kind})")

    if batch_size is not None:
        acc = None
        for n in tape.nodes:
            if n.kind == "loss:combine":
                acc = n.out.data if acc is None else acc + n.out.data
        if float(acc * np.asarray(1.0 / batch_size, dtype=acc.dtype)) != float(total.data):
            raise AssertionError("objective is not the mean of the combine terms")
    if not np.isfinite(total.data):
        raise AssertionError("objective is not finite")
