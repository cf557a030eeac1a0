"""Dynamic layer chopping.

A linear map scores each layer's [CLS] feature into ``H`` head scores;
their mean goes through a sigmoid to give the layer score ``S_l``. Layers
with ``S_l`` below a threshold are skipped. Scores always come from the
unchopped trace of the same instance.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .encoder import (ChopPlan, EncoderParams, check_tokens, classifier, embed, encoder_forward,
                      encoder_layer, layer_weights, pad_bias)
from .numerics import Tensor
from .results import AblationMatrix
from .seeding import rng_for
from .taskgen import Dataset
from .training import lr_at

log = logging.getLogger(__name__)


@dataclass
class GateParams:
    n_layers: int
    n_heads: int
    d_model: int
    w: np.ndarray  # (d, H) shared, or (L, d, H) per layer
    b: np.ndarray  # (H,) or (L, H)
    per_layer: bool = False
    lam: float = 1e-3

    @classmethod
    def zeros(cls, n_layers: int, n_heads: int, d_model: int, per_layer: bool = False,
              lam: float = 1e-3) -> "GateParams":
        if per_layer:
            w, b = np.zeros((n_layers, d_model, n_heads)), np.zeros((n_layers, n_heads))
        else:
            w, b = np.zeros((d_model, n_heads)), np.zeros(n_heads)
        return cls(n_layers, n_heads, d_model, w, b, per_layer, lam)

    @classmethod
    def for_encoder(cls, params: EncoderParams, **kw) -> "GateParams":
        c = params.config
        return cls.zeros(c.n_layers, c.n_heads, c.d_model, **kw)

    @property
    def arrays(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def replace(self, arrays: dict[str, np.ndarray]) -> "GateParams":
        return GateParams(self.n_layers, self.n_heads, self.d_model, arrays["w"], arrays["b"],
                          self.per_layer, self.lam)

    def meta(self) -> dict:
        return {"n_layers": self.n_layers, "n_heads": self.n_heads, "d_model": self.d_model,
                "per_layer": self.per_layer, "lam": self.lam}


def save_gate(path, gate: GateParams, meta: dict | None = None):
    from . import checkpoint

    return checkpoint.save(path, "gate", {"gate": gate.meta(), **(meta or {})}, gate.arrays)


def load_gate(path) -> tuple[GateParams, dict]:
    from . import checkpoint

    header, t = checkpoint.load(path, kind="gate")
    meta = dict(header["meta"])
    g = meta.pop("gate")
    return GateParams(g["n_layers"], g["n_heads"], g["d_model"], t["w"], t["b"],
                      g["per_layer"], g["lam"]), meta


def head_scores(cls_feats, w: Tensor, b: Tensor, per_layer: bool) -> Tensor:
    """Head scores ``q`` of shape (B, L, H) from [CLS] features (B, L, d)."""
    cls_feats = nx.as_tensor(cls_feats)
    if per_layer:
        x = nx.transpose(cls_feats, (1, 0, 2))  # (L, B, d)
        q = nx.matmul(x, w) + nx.reshape(b, (b.shape[0], 1, b.shape[1]))
        return nx.transpose(q, (1, 0, 2))
    return nx.matmul(cls_feats, w) + b


def scores_from_cls(cls_feats: np.ndarray, gate: GateParams) -> tuple[np.ndarray, np.ndarray]:
    """(S, q) for stacked [CLS] features (B, L, d): S is (B, L), q is (B, L, H)."""
    q = head_scores(cls_feats, Tensor(gate.w), Tensor(gate.b), gate.per_layer)
    s = nx.sigmoid(nx.mean_axis(q, -1))
    return s.value, q.value


def layer_scores(trace, gate: GateParams) -> np.ndarray:
    """Per-instance layer scores (B, L) from the [CLS] rows of a full trace."""
    feats = np.stack(trace.cls_features, axis=1)
    if feats.shape[1] != gate.n_layers:
        raise ValueError(f"trace has {feats.shape[1]} layers, gate expects {gate.n_layers}")
    return scores_from_cls(feats, gate)[0]


def apply_threshold(scores, theta: float, n_heads: int = 1) -> ChopPlan:
    """Skip every layer whose score is strictly below ``theta``. Heads stay on."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    skip = frozenset(int(l) + 1 for l in np.nonzero(scores < theta)[0])
    return ChopPlan(np.ones((len(scores), n_heads)), skip)


def _plan_for(cfg, skip: frozenset[int]) -> ChopPlan:
    return ChopPlan.skipping(cfg.n_layers, cfg.n_heads, skip)


@dataclass
class GatedOutput:
    logits: np.ndarray  # (B, C)
    scores: np.ndarray  # (B, L)
    plans: list[ChopPlan]
    all_chopped: np.ndarray  # (B,) bool; every layer skipped for that instance

    @property
    def skip_counts(self) -> np.ndarray:
        return np.array([len(p.skip_layers) for p in self.plans])


def run_instance_plans(tokens, params: EncoderParams, skips, full_logits=None) -> np.ndarray:
    """Logits where instance ``i`` skips the layers in ``skips[i]``.

    Instances sharing a skip set run as one batch. When ``full_logits`` is
    given, instances with nothing skipped take those rows directly.
    """
    cfg = params.config
    tokens = np.asarray(tokens)
    out = np.zeros((len(tokens), cfg.num_classes)) if full_logits is None else full_logits.copy()
    groups: dict[frozenset, list[int]] = {}
    for i, s in enumerate(skips):
        groups.setdefault(frozenset(s), []).append(i)
    for skip, idx in sorted(groups.items(), key=lambda kv: sorted(kv[0])):
        if not skip and full_logits is not None:
            continue
        idx = np.array(idx)
        out[idx] = encoder_forward(tokens[idx], params, _plan_for(cfg, skip)).logits.value
    return out


def gated_forward(tokens, params: EncoderParams, gate: GateParams, theta: float,
                  warn: bool = True) -> GatedOutput:
    """Two passes: score on the full trace, then rerun each instance under its own plan.

    Instances that share a plan are run together; an empty plan reuses the
    pass-one logits, which are exactly what a rerun would produce.
    """
    cfg = params.config
    tokens = check_tokens(tokens, cfg)
    full = encoder_forward(tokens, params)
    scores = layer_scores(full, gate)
    skips = [frozenset(int(l) + 1 for l in np.nonzero(row < theta)[0]) for row in scores]
    logits = run_instance_plans(tokens, params, skips, full.logits.value)
    plans = [_plan_for(cfg, s) for s in skips]
    all_chopped = np.array([len(s) == cfg.n_layers for s in skips])
    if warn and all_chopped.any():
        log.warning("%d instance(s) had every layer chopped", int(all_chopped.sum()))
    return GatedOutput(logits, scores, plans, all_chopped)


def soft_chop_forward(tokens, params: EncoderParams, s: Tensor) -> Tensor:
    """Encoder where layer ``l`` outputs ``s_l * layer(x) + (1 - s_l) * x``.

    ``s`` has shape (B, L). Encoder weights enter as constants.
    """
    cfg = params.config
    tokens = check_tokens(tokens, cfg)
    w = params.tensors()
    bias = pad_bias(tokens)
    B = tokens.shape[0]
    x = embed(tokens, w, cfg)
    ones = np.ones(cfg.n_heads)
    for l in range(cfg.n_layers):
        y, _ = encoder_layer(x, layer_weights(w, l), ones, cfg, bias)
        sl = nx.reshape(nx.take_index(s, l, axis=1), (B, 1, 1))
        x = sl * y + (1.0 - sl) * x
    return classifier(nx.take_index(x, 0, axis=1), w)


def soft_gated_forward(tokens, params: EncoderParams, w: Tensor, b: Tensor,
                       per_layer: bool = False, full_trace=None) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable surrogate of :func:`gated_forward`; returns (logits, S, q).

    ``w``/``b`` are gate tensors (watch them on a tape to train).
    """
    if full_trace is None:
        full_trace = encoder_forward(tokens, params)
    feats = np.stack(full_trace.cls_features, axis=1)
    q = head_scores(feats, w, b, per_layer)
    s = nx.sigmoid(nx.mean_axis(q, -1))
    return soft_chop_forward(tokens, params, s), s, q


def gate_loss(tokens, labels, params: EncoderParams, w: Tensor, b: Tensor, gate: GateParams,
              full_trace=None, penalty: str = "q") -> tuple[Tensor, Tensor, Tensor]:
    """BCE against one-hot labels plus ``lam`` times a batch-mean L1 norm.

    ``penalty="q"`` takes the norm of the pre-sigmoid head scores, ``"s"`` of the
    layer scores. The first has its minimum at S = 0.5, the second pulls unused
    layers towards 0.
    """
    logits, s, q = soft_gated_forward(tokens, params, w, b, gate.per_layer, full_trace)
    onehot = np.eye(logits.shape[-1])[np.asarray(labels)]
    bce = nx.bce_with_logits(logits, onehot)
    if penalty == "q":
        l1 = nx.sum_all(nx.absolute(q)) * (1.0 / q.shape[0])
    elif penalty == "s":
        l1 = nx.sum_all(s) * (1.0 / s.shape[0])  # S > 0, so |S| = S
    else:
        raise ValueError(f"unknown penalty {penalty!r}")
    return bce + gate.lam * l1, bce, s


@dataclass
class GateHyper:
    steps: int = 400
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int = 50
    lam: float = 1e-3
    penalty: str = "q"


@dataclass
class GateTrainResult:
    gate: GateParams
    history: list[dict] = field(default_factory=list)


def _digest(params: EncoderParams) -> str:
    h = hashlib.sha256()
    for k in sorted(params.arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params.arrays[k]).tobytes())
    return h.hexdigest()


def train_gate(train: Dataset, params: EncoderParams, gate: GateParams, hyper: GateHyper,
               seed: int, log_every: int = 50) -> GateTrainResult:
    """Train the gate with the encoder frozen (checked bitwise afterwards)."""
    before = _digest(params)
    gate = gate.replace(gate.arrays)
    gate.lam = hyper.lam
    rng = rng_for(seed, "gate/batches")
    arrays = {k: v.copy() for k, v in gate.arrays.items()}
    state = nx.AdamState.for_params(arrays, lr=hyper.lr)
    history, running = [], []
    n = len(train)
    order, cursor = rng.permutation(n), 0
    for step in range(hyper.steps):
        if cursor + hyper.batch_size > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + hyper.batch_size]
        cursor += hyper.batch_size
        with nx.Tape() as tape:
            w = tape.watch(arrays["w"], "w")
            b = tape.watch(arrays["b"], "b")
            loss, bce, s = gate_loss(train.tokens[idx], train.labels[idx], params, w, b, gate,
                                     penalty=hyper.penalty)
        if not math.isfinite(float(loss.value)):
            raise nx.NonFiniteError(
                f"gate loss non-finite at step {step}: bce={float(bce.value)!r}, "
                f"|w|max={np.abs(arrays['w']).max():.3g}, |b|max={np.abs(arrays['b']).max():.3g}")
        grads = nx.backward(tape, loss)
        lr = lr_at(step, hyper.lr, hyper.warmup_steps, hyper.steps, "constant")
        arrays = nx.adam_step(arrays, grads, state, lr=lr)
        running.append((float(loss.value), float(bce.value), float(s.value.mean())))
        if (step + 1) % log_every == 0 or step == hyper.steps - 1:
            r = np.mean(running, axis=0)
            history.append({"step": step + 1, "loss": r[0], "bce": r[1], "mean_score": r[2]})
            log.info("gate step %d loss %.4f bce %.4f mean S %.3f", step + 1, *r)
            running = []
    if _digest(params) != before:
        raise RuntimeError("encoder parameters changed during gate training")
    return GateTrainResult(gate.replace(arrays), history)


def gate_bce(data: Dataset, params: EncoderParams, gate: GateParams, batch: int = 512) -> float:
    """Soft-gated BCE (no L1 term) over a dataset."""
    total = 0.0
    w, b = Tensor(gate.w), Tensor(gate.b)
    for i in range(0, len(data), batch):
        logits, _, _ = soft_gated_forward(data.tokens[i:i + batch], params, w, b, gate.per_layer)
        onehot = np.eye(logits.shape[-1])[data.labels[i:i + batch]]
        total += float(nx.bce_with_logits(logits, onehot).value) * len(onehot)
    return total / len(data)


def dataset_scores(data: Dataset, params: EncoderParams, gate: GateParams,
                   batch: int = 512) -> np.ndarray:
    out = [layer_scores(encoder_forward(data.tokens[i:i + batch], params), gate)
           for i in range(0, len(data), batch)]
    return np.concatenate(out, axis=0)


def type_means(scores: np.ndarray, types: np.ndarray, type_ids, type_labels=None) -> AblationMatrix:
    """Rows are types, entry (t, l) is the mean of ``scores[:, l]`` over type ``t``."""
    rows, vals = [], []
    for t in type_ids:
        sel = types == t
        if not sel.any():
            raise ValueError(f"no instances of type {t}")
        rows.append(type_labels[t] if type_labels else f"type{t}")
        vals.append(scores[sel].mean(axis=0))
    cols = [f"L{l}" for l in range(1, scores.shape[1] + 1)]
    return AblationMatrix(rows, cols, np.array(vals), {"family": "gate-scores"})


def mean_scores_by_type(data: Dataset, params: EncoderParams, gate: GateParams,
                        type_labels: dict[int, str] | None = None) -> AblationMatrix:
    """Type x layer matrix of mean layer scores."""
    return type_means(dataset_scores(data, params, gate), data.types, data.type_ids, type_labels)
