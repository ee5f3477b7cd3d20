"""Sparse Mixture-of-Experts FFN: a bias-free linear router picks the top-K of
E expert FFNs per frame; gates are a softmax over the selected logits only.

There is no auxiliary balancing loss and no capacity limit anywhere: every
frame is routed, and the only load-related artifact is a diagnostic histogram.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore


@dataclass
class RoutingDecision:
    """Per-frame top-K routing: expert ids in descending-logit order plus the
    renormalized gate weights (each row sums to 1)."""

    indices: np.ndarray  # int [T, K]
    gates: np.ndarray    # float [T, K]


@dataclass
class ExpertLoadHistogram:
    counts: np.ndarray   # [E] routed (frame, slot) pairs per expert
    total_slots: int

    @property
    def max_load(self) -> int:
        return int(self.counts.max())

    @property
    def min_load(self) -> int:
        return int(self.counts.min())

    @property
    def mean_load(self) -> float:
        return float(self.counts.mean())

    @property
    def unused_fraction(self) -> float:
        return float((self.counts == 0).mean())

    def __str__(self):
        return (f"counts={','.join(str(int(c)) for c in self.counts)} "
                f"max={self.max_load} min={self.min_load} "
                f"mean={self.mean_load:.1f} unused={self.unused_fraction:.2f}")


def topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Top-k expert ids per row, best first; ties go to the lower expert index."""
    if k > logits.shape[-1]:
        raise ValueError(f"topk={k} exceeds expert count {logits.shape[-1]}")
    return np.argsort(-logits, axis=-1, kind="stable")[..., :k]


def route_topk(logits: Tensor, k: int) -> tuple[np.ndarray, Tensor]:
    """Select top-k logits per frame and softmax over just those.

    Returns (indices [T, K], gates Tensor [T, K]). Gradient flows only
    through the selected logits; the selection itself is non-differentiable.
    """
    idx = topk_indices(logits.data, k)
    gates = ad.softmax(ad.gather_last(logits, idx))
    return idx, gates


def routing_decision(logits: np.ndarray, k: int) -> RoutingDecision:
    idx = topk_indices(logits, k)
    sel = np.take_along_axis(logits, idx, axis=-1)
    sel = sel - sel.max(axis=-1, keepdims=True)
    e = np.exp(sel)
    return RoutingDecision(idx, e / e.sum(axis=-1, keepdims=True))


def expert_load_stats(decisions, num_experts: int) -> ExpertLoadHistogram:
    """Histogram of routed (frame, slot) pairs over a batch of decisions."""
    counts = np.zeros(num_experts, dtype=np.int64)
    total = 0
    for dec in decisions:
        np.add.at(counts, dec.indices.reshape(-1), 1)
        total += dec.indices.size
    if total == 0:
        raise ValueError("no routing decisions")
    return ExpertLoadHistogram(counts, total)


class FeedForward:
    """Position-wise FFN with Swish: y = W2 swish(W1 x + b1) + b2."""

    def __init__(self, store: ParamStore, prefix: str, d_att: int, d_ff: int):
        self.w1 = store.new(f"{prefix}.W1", (d_att, d_ff))
        self.b1 = store.new(f"{prefix}.b1", (d_ff,), "zeros")
        self.w2 = store.new(f"{prefix}.W2", (d_ff, d_att))
        self.b2 = store.new(f"{prefix}.b2", (d_att,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(ad.swish(ad.linear(x, self.w1, self.b1)), self.w2, self.b2)

    def copy_from(self, other: "FeedForward") -> None:
        for mine, theirs in zip((self.w1, self.b1, self.w2, self.b2),
                                (other.w1, other.b1, other.w2, other.b2)):
            mine.data = theirs.data.copy()


class MoeFFN:
    """One MoE slot: router + E expert FFNs, K active per frame.

    Output is the gate-weighted sum of the selected experts' outputs; only the
    selected experts are evaluated, so compute scales with K, not E.
    """

    def __init__(self, store: ParamStore, prefix: str, d_att: int, d_ff: int,
                 num_experts: int, topk: int):
        if not num_experts >= topk >= 1:
            raise ValueError(f"need E >= K >= 1, got E={num_experts} K={topk}")
        self.num_experts = num_experts
        self.topk = topk
        self.router_w = store.new(f"{prefix}.router.W_r", (d_att, num_experts))
        self.experts = [FeedForward(store, f"{prefix}.expert{e}", d_att, d_ff)
                        for e in range(num_experts)]
        self.last_decision: RoutingDecision | None = None
        self.record_decisions = False

    def __call__(self, x: Tensor) -> Tensor:
        t = x.data.shape[0]
        logits = ad.linear(x, self.router_w, None)
        idx, gates = route_topk(logits, self.topk)
        if self.record_decisions:
            self.last_decision = RoutingDecision(idx, gates.data.copy())
        out = None
        for e in range(self.num_experts):
            rows, slots = np.nonzero(idx == e)
            if rows.size == 0:
                continue
            ye = self.experts[e](ad.take_rows(x, rows))
            ge = ad.reshape(ad.take_elems(gates, rows, slots), (-1, 1))
            part = ad.scatter_rows(ad.mul(ye, ge), rows, t)
            out = part if out is None else ad.add(out, part)
        return out

    def make_experts_identical(self) -> None:
        """Test-only mode: copy expert 0 into every other expert, making the
        slot numerically equal to a dense FFN for any routing."""
        for e in self.experts[1:]:
            e.copy_from(self.experts[0])


def make_ffn_slot(store: ParamStore, prefix: str, d_att: int, d_ff: int,
                  num_experts: int, topk: int):
    """Dense FFN when num_experts == 0, MoE slot otherwise."""
    if num_experts == 0:
        return FeedForward(store, prefix, d_att, d_ff)
    return MoeFFN(store, prefix, d_att, d_ff, num_experts, topk)
