"""Supervised training of the encoder on a task suite."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .encoder import ChopPlan, EncoderParams, encoder_forward, predict
from .seeding import rng_for
from .taskgen import Dataset

log = logging.getLogger(__name__)


class Divergence(RuntimeError):
    def __init__(self, msg, last_good: EncoderParams | None = None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainHyper:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int = 0
    schedule: str = "constant"  # "cosine" | "constant"
    min_lr_ratio: float = 0.05
    weight_decay: float = 0.0
    grad_clip: float = 0.0  # 0 disables clipping
    eval_every: int = 250
    eval_batch: int = 512
    # every curriculum_stage steps the next task depth joins the batch pool; 0 trains on all at once
    curriculum_stage: int = 600
    layer_drop: float = 0.0  # per-step probability of skipping each layer


def curriculum_depth(step: int, depths, stage: int) -> int:
    """Largest task depth whose instances may be sampled at ``step``."""
    lo, hi = min(depths), max(depths)
    if stage <= 0:
        return hi
    return min(hi, lo + step // stage)


def curriculum_done(step: int, depths, stage: int) -> bool:
    return curriculum_depth(step, depths, stage) == max(depths)


def lr_at(step: int, base: float, warmup: int, total: int, schedule: str,
          min_ratio: float = 0.0) -> float:
    """Linear warmup to ``base``, then constant or cosine decay to ``base * min_ratio``."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    if schedule == "constant":
        return base
    if schedule != "cosine":
        raise ValueError(f"unknown schedule {schedule!r}")
    span = max(1, total - warmup)
    frac = min(1.0, (step - warmup) / span)
    return base * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def batched_logits(params: EncoderParams, tokens: np.ndarray, plan: ChopPlan | None = None,
                   batch: int = 512) -> np.ndarray:
    out = [encoder_forward(tokens[i:i + batch], params, plan).logits.value
           for i in range(0, len(tokens), batch)]
    return np.concatenate(out, axis=0)


def accuracy(params: EncoderParams, data: Dataset, plan: ChopPlan | None = None,
             batch: int = 512) -> float:
    return float(np.mean(predict(batched_logits(params, data.tokens, plan, batch)) == data.labels))


def per_type_accuracy(params: EncoderParams, data: Dataset, batch: int = 512) -> dict[int, float]:
    pred = predict(batched_logits(params, data.tokens, None, batch))
    return {t: float(np.mean(pred[data.types == t] == data.labels[data.types == t]))
            for t in data.type_ids if np.any(data.types == t)}


def loss_and_grads(params: EncoderParams, tokens, labels,
                   plan: ChopPlan | None = None) -> tuple[float, dict[str, np.ndarray]]:
    with nx.Tape() as tape:
        trace = encoder_forward(tokens, params, plan, tape=tape)
        loss = nx.cross_entropy(trace.logits, labels)
    return float(loss.value), nx.backward(tape, loss)


@dataclass
class TrainResult:
    params: EncoderParams
    best_step: int
    history: list[dict] = field(default_factory=list)


def train_model(params: EncoderParams, train: Dataset, val: Dataset, hyper: TrainHyper,
                seed: int) -> TrainResult:
    """Adam on cross-entropy; keeps the best-validation parameters.

    Batches are drawn with replacement from the instances whose depth the
    curriculum has unlocked. With ``layer_drop`` each layer is skipped for
    the whole batch with that probability, and skipped layers are left out
    of that step's update. Only evaluations made after the last depth is
    unlocked compete for "best". All randomness comes from labelled
    sub-streams of ``seed``.
    """
    rng = rng_for(seed, "train/batches")
    drop_rng = rng_for(seed, "train/layerdrop")
    cfg = params.config
    arrays = dict(params.arrays)
    state = nx.AdamState.for_params(arrays, lr=hyper.lr)
    depth_of = train.type_depths
    inst_depth = np.array([depth_of[int(t)] for t in train.types])
    depths = sorted(set(depth_of.values()))
    pools = {d: np.nonzero(inst_depth <= d)[0] for d in depths}
    best = (-1.0, 0, EncoderParams(cfg, dict(arrays)))
    history, running = [], []
    for step in range(hyper.steps):
        pool = pools[curriculum_depth(step, depths, hyper.curriculum_stage)]
        idx = pool[rng.integers(len(pool), size=hyper.batch_size)]
        plan = None
        if hyper.layer_drop > 0:
            skip = {l + 1 for l in range(cfg.n_layers) if drop_rng.random() < hyper.layer_drop}
            plan = ChopPlan.skipping(cfg.n_layers, cfg.n_heads, skip)
        cur = EncoderParams(cfg, arrays)
        try:
            loss, grads = loss_and_grads(cur, train.tokens[idx], train.labels[idx], plan)
        except nx.NonFiniteError as exc:
            raise Divergence(f"step {step}: {exc}", best[2]) from exc
        if not math.isfinite(loss):
            raise Divergence(f"non-finite loss at step {step}", best[2])
        if hyper.grad_clip > 0:
            grads, _ = nx.clip_by_global_norm(grads, hyper.grad_clip)
        lr = lr_at(step, hyper.lr, hyper.warmup_steps, hyper.steps, hyper.schedule,
                   hyper.min_lr_ratio)
        if hyper.weight_decay:
            arrays = {k: (v * (1.0 - lr * hyper.weight_decay) if v.ndim == 2 else v)
                      for k, v in arrays.items()}
        live = arrays
        if plan is not None and plan.skip_layers:
            dead = tuple(f"layers.{l - 1}." for l in plan.skip_layers)
            live = {k: v for k, v in arrays.items() if not k.startswith(dead)}
        arrays = {**arrays, **nx.adam_step(live, grads, state, lr=lr)}
        running.append(loss)
        last = step == hyper.steps - 1
        if (step + 1) % hyper.eval_every == 0 or last:
            cur = EncoderParams(cfg, arrays)
            per_type = per_type_accuracy(cur, val, hyper.eval_batch)
            val_acc = float(np.mean(list(per_type.values())))
            rec = {"step": step + 1, "train_loss": float(np.mean(running)), "lr": lr,
                   "val_acc": val_acc, "val_per_type": per_type}
            history.append(rec)
            log.info("step %d loss %.4f val %.4f %s", step + 1, rec["train_loss"], val_acc,
                     " ".join(f"{t}:{a:.3f}" for t, a in per_type.items()))
            running = []
            if curriculum_done(step, depths, hyper.curriculum_stage) and val_acc > best[0]:
                best = (val_acc, step + 1, cur)
    if hyper.steps == 0 or best[0] < 0:
        return TrainResult(EncoderParams(cfg, arrays) if hyper.steps else params,
                           hyper.steps, history)
    return TrainResult(best[2], best[1], history)
