"""Toy-scale training loop: Adam with inverse-square-root warmup, global-norm
clipping, full-chunk stage 1 and dynamic-chunk stage 2 from the stage-1
checkpoint. The objective is exactly the combined CTC/AED loss; expert load is
logged as a diagnostic and never constrained.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, LossWeights, ModelConfig
from .losses import (aed_ce_loss, assert_pure_objective, combined_loss,
                     ctc_loss, LossBreakdown, reverse_labels)
from .model import U2Model, sample_dynamic_chunk, subsampled_length
from .moe import ExpertLoadHistogram


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float, last_good: str | None):
        pointer = f"; last good checkpoint: {last_good}" if last_good else ""
        super().__init__(f"training diverged at step {step} (loss={value}){pointer}")
        self.step = step
        self.last_good = last_good


@dataclass
class TrainConfig:
    stage: int
    steps: int
    batch_size: int = 16
    peak_lr: float = 2e-3
    warmup_steps: int = 500
    seed: int = 0
    ckpt_in: str | None = None
    ckpt_out: str = "ckpt"
    log_every: int = 50
    ckpt_interval: int = 0  # 0 = final checkpoint only
    p_full: float = 0.5
    chunk_cap: int = 25

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError("stage must be 1 or 2")
        if self.stage == 2 and not self.ckpt_in:
            raise ConfigError("stage 2 requires a stage-1 checkpoint (ckpt_in)")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")


@dataclass
class TrainMetrics:
    step: int
    loss: LossBreakdown
    grad_norm: float
    lr: float
    sec_per_step: float
    load_hist: ExpertLoadHistogram | None = None

    def log_line(self) -> str:
        b = self.loss
        return (f"step={self.step} l_total={b.l_total:.6f} l_ctc={b.l_ctc:.6f} "
                f"l_l2r={b.l_aed_l2r:.6f} l_r2l={b.l_aed_r2l:.6f} "
                f"gnorm={self.grad_norm:.4f} lr={self.lr:.6g} "
                f"sec_per_step={self.sec_per_step:.3f}")


def learning_rate(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to `peak` at `warmup`, then inverse square root decay."""
    if step < 1:
        raise ValueError("steps are 1-based")
    return peak * min(step / warmup, float(np.sqrt(warmup / step)))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(model: U2Model, state: AdamState, lr: float) -> None:
    """Elementwise Adam; order-independent across parameters."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in model.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def global_grad_norm(model: U2Model) -> float:
    total = 0.0
    for p in model.params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def clip_gradients(model: U2Model, max_norm: float) -> float:
    norm = global_grad_norm(model)
    if norm > max_norm:
        factor = max_norm / norm
        for p in model.params.values():
            if p.grad is not None:
                p.grad = p.grad * p.data.dtype.type(factor)
    return norm


def batch_losses(model: U2Model, batch, weights: LossWeights,
                 chunk_size: int | None):
    """Forward the batch under one tape; returns (tape, total, breakdown).

    Per-utterance combined losses are averaged; the per-component report uses
    the exact combination formula on the component means.
    """
    eos = model.cfg.sos_eos_id
    comps = []
    with GradTape() as tape:
        total = None
        for frames, labels in batch:
            out = model.forward(frames, labels, chunk_size=chunk_size)
            lp = ad.log_softmax(out.ctc_logits)
            l_ctc = ctc_loss(lp, labels)
            l_l2r = aed_ce_loss(out.l2r_logits, list(labels) + [eos],
                                kind="loss:aed_l2r")
            l_r2l = aed_ce_loss(out.r2l_logits, reverse_labels(labels) + [eos],
                                kind="loss:aed_r2l")
            item_total, bd = combined_loss(l_ctc, l_l2r, l_r2l, weights)
            comps.append(bd)
            total = item_total if total is None else ad.add(total, item_total)
        total = ad.scale(total, 1.0 / len(batch))
    mc = float(np.mean([b.l_ctc for b in comps]))
    ml = float(np.mean([b.l_aed_l2r for b in comps]))
    mr = float(np.mean([b.l_aed_r2l for b in comps]))
    lam, alpha = weights.lam, weights.alpha
    breakdown = LossBreakdown(
        mc, ml, mr, lam * mc + (1 - lam) * (alpha * mr + (1 - alpha) * ml))
    return tape, total, breakdown


def train_step(batch, model: U2Model, opt: AdamState, weights: LossWeights,
               chunk_mode: str, rng: np.random.Generator, step: int,
               peak_lr: float, warmup: int, p_full: float = 0.5,
               chunk_cap: int = 25, clip_norm: float = 5.0,
               record_routing: bool = False) -> TrainMetrics:
    """One optimization step; dynamic mode samples one chunk size per batch."""
    t0 = time.perf_counter()
    chunk = None
    if chunk_mode == "dynamic":
        max_tp = max(subsampled_length(frames.shape[0]) for frames, _ in batch)
        chunk = sample_dynamic_chunk(max_tp, rng, p_full, chunk_cap)
    elif chunk_mode != "full":
        raise ConfigError(f"unknown chunk mode {chunk_mode!r}")

    model.set_record_routing(record_routing)
    model.zero_grad()
    tape, total, breakdown = batch_losses(model, batch, weights, chunk)
    assert_pure_objective(tape, total, batch_size=len(batch))
    hist = model.collect_load_histogram() if record_routing else None
    model.set_record_routing(False)

    tape.backward(total)
    gnorm = clip_gradients(model, clip_norm)
    lr = learning_rate(step, peak_lr, warmup)
    adam_update(model, opt, lr)
    return TrainMetrics(step, breakdown, gnorm, lr,
                        time.perf_counter() - t0, hist)


def make_batches(corpus, batch_size: int, epoch_seed: int) -> list:
    """Sort by length, slice into batches, shuffle batch order (deterministic)."""
    order = sorted(range(len(corpus)), key=lambda i: (corpus[i][0].shape[0], i))
    batches = [[corpus[i] for i in order[k:k + batch_size]]
               for k in range(0, len(order), batch_size)]
    np.random.default_rng(epoch_seed).shuffle(batches)
    return batches


def train_loop(model: U2Model, cfg: TrainConfig, corpus, weights: LossWeights,
               log=print) -> list[TrainMetrics]:
    """Run cfg.steps optimization steps over the corpus, epoch by epoch.

    Divergence (non-finite loss or 10x the initial loss) aborts with a pointer
    to the last saved checkpoint.
    """
    chunk_mode = "full" if cfg.stage == 1 else "dynamic"
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState()
    metrics: list[TrainMetrics] = []
    initial_loss = None
    last_good = None
    step = 0
    epoch = 0
    out_root = Path(cfg.ckpt_out)
    while step < cfg.steps:
        for batch in make_batches(corpus, cfg.batch_size, cfg.seed + epoch):
            step += 1
            if step > cfg.steps:
                break
            record = cfg.log_every > 0 and step % cfg.log_every == 0
            m = train_step(batch, model, opt, weights, chunk_mode, rng, step,
                           cfg.peak_lr, cfg.warmup_steps, cfg.p_full,
                           cfg.chunk_cap, record_routing=record and model.cfg.is_moe)
            metrics.append(m)
            if initial_loss is None:
                initial_loss = m.loss.l_total
            bad = not np.isfinite(m.loss.l_total) or \
                m.loss.l_total > 10.0 * max(initial_loss, 1e-8)
            if bad:
                raise TrainingDiverged(step, m.loss.l_total, last_good)
            if record:
                log(m.log_line())
                if m.load_hist is not None:
                    log(f"expert_load step={step} {m.load_hist}")
            if cfg.ckpt_interval and step % cfg.ckpt_interval == 0:
                p = out_root / f"step_{step}"
                save_checkpoint(model, p)
                last_good = str(p)
        epoch += 1
    final = out_root / "final"
    save_checkpoint(model, final)
    return metrics


def evaluate_loss(model: U2Model, corpus, weights: LossWeights,
                  chunk_size: int | None = None) -> LossBreakdown:
    """Mean combined loss over a corpus, no gradients."""
    _, _, breakdown = batch_losses(model, list(corpus), weights, chunk_size)
    return breakdown


def run_two_stage(stage1_cfg: TrainConfig, stage2_cfg: TrainConfig,
                  corpus, model_cfg: ModelConfig, weights: LossWeights,
                  log=print) -> tuple[str, str]:
    """Full-chunk pretraining, then dynamic-chunk fine-tuning from stage 1.

    Stage 2 loads the stage-1 weights verbatim (identical architecture);
    returns the two final checkpoint paths.
    """
    if stage1_cfg.stage != 1 or stage2_cfg.stage != 2:
        raise ConfigError("run_two_stage needs a stage-1 and a stage-2 config")
    model1 = U2Model(model_cfg, seed=stage1_cfg.seed)
    log(f"stage 1: {stage1_cfg.steps} steps, full chunk")
    train_loop(model1, stage1_cfg, corpus, weights, log=log)
    ckpt1 = str(Path(stage1_cfg.ckpt_out) / "final")

    model2 = U2Model(model_cfg, seed=stage2_cfg.seed)
    load_checkpoint(stage2_cfg.ckpt_in, model2)
    log(f"stage 2: {stage2_cfg.steps} steps, dynamic chunk, init from {stage2_cfg.ckpt_in}")
    train_loop(model2, stage2_cfg, corpus, weights, log=log)
    ckpt2 = str(Path(stage2_cfg.ckpt_out) / "final")
    return ckpt1, ckpt2
