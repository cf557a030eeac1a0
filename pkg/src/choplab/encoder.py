"""Post-norm multi-head transformer encoder with head masking and layer skipping."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor

LAYER_KEYS = (
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b",
)

PAD_ID = 0
CLS_ID = 1


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 6
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 64
    max_seq_len: int = 34
    num_classes: int = 8
    ln_eps: float = 1e-5
    init_gain: float = 0.6

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("need at least one layer and one head")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def base_scale(cls, **kw) -> "EncoderConfig":
        """12 layers x 12 heads, width 768, FFN 3072. Meant for parameter counting."""
        base = dict(n_layers=12, n_heads=12, d_model=768, d_ff=3072,
                    vocab_size=30522, max_seq_len=512)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def layer_param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    return {
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
        "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,),
        "ln1_g": (d,), "ln1_b": (d,),
        "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,),
        "ln2_g": (d,), "ln2_b": (d,),
    }


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    shapes = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq_len, d),
        "emb_ln_g": (d,), "emb_ln_b": (d,),
    }
    for l in range(cfg.n_layers):
        for k, s in layer_param_shapes(cfg).items():
            shapes[f"layers.{l}.{k}"] = s
    shapes["cls_w"] = (d, cfg.num_classes)
    shapes["cls_b"] = (cfg.num_classes,)
    return shapes


@dataclass
class EncoderParams:
    config: EncoderConfig
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.arrays):
            missing = set(expected) - set(self.arrays)
            extra = set(self.arrays) - set(expected)
            raise ValueError(f"param names mismatch; missing={sorted(missing)} extra={sorted(extra)}")
        for k, s in expected.items():
            if self.arrays[k].shape != s:
                raise ValueError(f"{k}: shape {self.arrays[k].shape} != {s}")

    def tensors(self, tape: nx.Tape | None = None) -> dict[str, Tensor]:
        if tape is None:
            return {k: Tensor(v) for k, v in self.arrays.items()}
        return tape.watch_all(self.arrays)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    """Embeddings ~ N(0, 1); weight matrices ~ N(0, init_gain / sqrt(fan_in)); biases 0, gains 1."""
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arrays[name] = np.ones(shape)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        elif leaf.endswith("_emb"):
            arrays[name] = rng.normal(0.0, 1.0, size=shape)
        else:
            arrays[name] = rng.normal(0.0, cfg.init_gain / math.sqrt(shape[0]), size=shape)
    return EncoderParams(cfg, arrays)


@dataclass(frozen=True)
class ChopPlan:
    """Binary head mask (L x H) plus a set of skipped layers (1-based)."""

    head_mask: np.ndarray
    skip_layers: frozenset[int] = frozenset()

    def __post_init__(self):
        m = np.asarray(self.head_mask, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("head_mask must be L x H")
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError("head_mask entries must be exactly 0 or 1")
        m.setflags(write=False)
        object.__setattr__(self, "head_mask", m)
        skip = frozenset(int(l) for l in self.skip_layers)
        if any(l < 1 or l > m.shape[0] for l in skip):
            raise ValueError(f"skip_layers must lie in [1, {m.shape[0]}], got {sorted(skip)}")
        object.__setattr__(self, "skip_layers", skip)

    @classmethod
    def identity(cls, n_layers: int, n_heads: int) -> "ChopPlan":
        return cls(np.ones((n_layers, n_heads)))

    @classmethod
    def skipping(cls, n_layers: int, n_heads: int, layers) -> "ChopPlan":
        return cls(np.ones((n_layers, n_heads)), frozenset(layers))

    @classmethod
    def without_head(cls, n_layers: int, n_heads: int, layer: int, head: int) -> "ChopPlan":
        m = np.ones((n_layers, n_heads))
        m[layer - 1, head - 1] = 0.0
        return cls(m)

    @classmethod
    def only_head(cls, n_layers: int, n_heads: int, layer: int, head: int) -> "ChopPlan":
        m = np.ones((n_layers, n_heads))
        m[layer - 1, :] = 0.0
        m[layer - 1, head - 1] = 1.0
        return cls(m)

    @property
    def n_layers(self) -> int:
        return self.head_mask.shape[0]

    def is_identity(self) -> bool:
        return not self.skip_layers and bool(np.all(self.head_mask == 1.0))

    def key(self) -> tuple:
        return (tuple(sorted(self.skip_layers)), self.head_mask.tobytes())

    def __eq__(self, other):
        return isinstance(other, ChopPlan) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


@dataclass
class ForwardTrace:
    hidden: list[Tensor]  # hidden[0] is the embedding output, hidden[l] the output of layer l
    attentions: list[np.ndarray | None]  # (B, H, T, T) per layer, None where skipped
    logits: Tensor
    plan: ChopPlan
    skipped: frozenset[int] = field(default_factory=frozenset)

    def cls(self, layer: int) -> np.ndarray:
        """[CLS] feature (row 0) of ``hidden[layer]``, shape (B, d)."""
        return self.hidden[layer].value[:, 0, :]

    @property
    def cls_features(self) -> list[np.ndarray]:
        return [self.cls(l) for l in range(1, len(self.hidden))]


def layer_weights(w: dict[str, Tensor], l: int) -> dict[str, Tensor]:
    """Weights of layer ``l`` (0-based) keyed by short name."""
    return {k: w[f"layers.{l}.{k}"] for k in LAYER_KEYS}


def check_tokens(tokens, cfg: EncoderConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ValueError("tokens must be (batch, seq)")
    if tokens.shape[1] == 0 or tokens.shape[0] == 0:
        raise ValueError("empty sequence")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len={cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("unknown token id")
    if np.any(tokens[:, 0] != CLS_ID):
        raise ValueError("every sequence must start with the [CLS] token")
    return tokens.astype(np.int64, copy=False)


def pad_bias(tokens: np.ndarray) -> np.ndarray | None:
    """Additive key mask (B, 1, 1, T): -1e30 on padding keys, or None without padding."""
    pad = tokens == PAD_ID
    if not pad.any():
        return None
    return np.where(pad, -1e30, 0.0)[:, None, None, :]


def embed(tokens: np.ndarray, w: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    T = tokens.shape[1]
    x = nx.embedding(w["tok_emb"], tokens) + nx.embedding(w["pos_emb"], np.arange(T))
    return nx.layer_norm(x, w["emb_ln_g"], w["emb_ln_b"], cfg.ln_eps)


def multi_head_attention(x: Tensor, lw: dict[str, Tensor], mask_row, n_heads: int,
                         key_bias: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Masked multi-head self-attention.

    Head ``h``'s output is multiplied by ``mask_row[h]`` before the heads are
    concatenated and projected by ``wo``. Returns the projected output and
    the attention weights (B, H, T, T).
    """
    B, T, d = x.shape
    H = n_heads
    dh = d // H
    mask_row = np.asarray(mask_row, dtype=np.float64)
    if mask_row.shape != (H,):
        raise ValueError(f"mask_row must have {H} entries")

    def split(t):
        return nx.transpose(nx.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    q = split(nx.matmul(x, lw["wq"]) + lw["bq"])
    k = split(nx.matmul(x, lw["wk"]) + lw["bk"])
    v = split(nx.matmul(x, lw["wv"]) + lw["bv"])
    scores = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if key_bias is not None:
        scores = scores + key_bias
    attn = nx.softmax_rows(scores)
    heads = nx.matmul(attn, v)  # (B, H, T, dh)
    if not np.all(mask_row == 1.0):
        heads = heads * mask_row[None, :, None, None]
    concat = nx.reshape(nx.transpose(heads, (0, 2, 1, 3)), (B, T, d))
    return nx.matmul(concat, lw["wo"]) + lw["bo"], attn.value


def encoder_layer(x: Tensor, lw: dict[str, Tensor], mask_row, cfg: EncoderConfig,
                  key_bias: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    a, attn = multi_head_attention(x, lw, mask_row, cfg.n_heads, key_bias)
    h = nx.layer_norm(x + a, lw["ln1_g"], lw["ln1_b"], cfg.ln_eps)
    f = nx.matmul(nx.gelu(nx.matmul(h, lw["w1"]) + lw["b1"]), lw["w2"]) + lw["b2"]
    return nx.layer_norm(h + f, lw["ln2_g"], lw["ln2_b"], cfg.ln_eps), attn


def classifier(cls: Tensor, w: dict[str, Tensor]) -> Tensor:
    return nx.matmul(cls, w["cls_w"]) + w["cls_b"]


def encoder_forward(tokens, params: EncoderParams, plan: ChopPlan | None = None,
                    tape: nx.Tape | None = None) -> ForwardTrace:
    """Run the encoder under ``plan``.

    Skipped layers pass their input through unchanged (the same tensor object
    is reused, so the identity is exact). With ``tape`` the parameters are
    watched on it and the whole pass is recorded.
    """
    cfg = params.config
    tokens = check_tokens(tokens, cfg)
    if plan is None:
        plan = ChopPlan.identity(cfg.n_layers, cfg.n_heads)
    if plan.head_mask.shape != (cfg.n_layers, cfg.n_heads):
        raise ValueError(f"plan head_mask shape {plan.head_mask.shape} does not match config")
    w = params.tensors(tape)
    bias = pad_bias(tokens)
    x = embed(tokens, w, cfg)
    hidden, attns = [x], []
    for l in range(cfg.n_layers):
        if (l + 1) in plan.skip_layers:
            attns.append(None)
        else:
            x, attn = encoder_layer(x, layer_weights(w, l), plan.head_mask[l], cfg, bias)
            attns.append(attn)
        hidden.append(x)
    logits = classifier(nx.take_index(x, 0, axis=1), w)
    nx.check_finite(logits, "logits")
    return ForwardTrace(hidden, attns, logits, plan, plan.skip_layers)


def classify(trace: ForwardTrace) -> np.ndarray:
    """Class scores (B, C) of a trace."""
    return trace.logits.value


def predict(scores: np.ndarray) -> np.ndarray:
    """Argmax over classes; ties go to the lowest class index."""
    return np.argmax(np.atleast_2d(scores), axis=-1)


# parameter accounting -------------------------------------------------------

def _layer_counts(cfg: EncoderConfig) -> dict[str, int]:
    d, f = cfg.d_model, cfg.d_ff
    attention = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    norms = 4 * d
    return {"attention": attention, "ffn": ffn, "norms": norms,
            "total": attention + ffn + norms}


def count_parameters(cfg: EncoderConfig, plan: ChopPlan | None = None) -> dict:
    """Parameter totals under a plan.

    Skipped layers drop out of ``kept``; masked heads do not, since their
    weights still exist. ``stack_*`` entries restrict to the layer stack.
    """
    skip = plan.skip_layers if plan is not None else frozenset()
    per = _layer_counts(cfg)
    d = cfg.d_model
    embeddings = cfg.vocab_size * d + cfg.max_seq_len * d + 2 * d
    head = d * cfg.num_classes + cfg.num_classes
    per_layer = [dict(per, layer=l, kept=l not in skip) for l in range(1, cfg.n_layers + 1)]
    stack_total = per["total"] * cfg.n_layers
    stack_kept = per["total"] * (cfg.n_layers - len(skip))
    total = stack_total + embeddings + head
    kept = stack_kept + embeddings + head
    return {
        "total": total,
        "kept": kept,
        "kept_fraction": kept / total,
        "stack_total": stack_total,
        "stack_kept": stack_kept,
        "stack_kept_fraction": stack_kept / stack_total,
        "embeddings": embeddings,
        "classifier": head,
        "per_layer": per_layer,
    }


def save_encoder(path, params: EncoderParams, meta: dict | None = None):
    from . import checkpoint

    return checkpoint.save(path, "encoder", {**(meta or {}), "encoder_config": params.config.to_dict()},
                           params.arrays)


def load_encoder(path) -> tuple[EncoderParams, dict]:
    from . import checkpoint

    header, tensors = checkpoint.load(path, kind="encoder")
    meta = dict(header["meta"])
    cfg = EncoderConfig(**meta.pop("encoder_config"))
    try:
        return EncoderParams(cfg, tensors), meta
    except ValueError as exc:
        raise checkpoint.CheckpointError(str(exc)) from exc
