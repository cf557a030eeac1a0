"""Run configuration: a flat ``section.key = value`` text file.

Every key has a typed default below; a file only needs the keys it changes.
Blank lines and ``#`` comments are ignored. Unknown keys, duplicate keys and
values that do not parse as the key's type are errors.

Sections:

``model``   encoder shape (``n_layers``, ``n_heads``, ``d_model``, ``d_ff``, ``init_gain``, ``ln_eps``)
``task``    suite (``n_types`` 4 or 12, ``seq_len``, ``num_classes``, ``n_per_type``, ``value_slots``)
``train``   encoder optimisation, see :class:`choplab.training.TrainHyper`
``gate``    gate optimisation, see :class:`choplab.gate.GateHyper`, plus ``per_layer``
``sweep``   ``which`` (comma list of sweep names) and ``thresholds`` (comma list)
``run``     ``seed`` and ``out_dir``; these do not enter the config hash
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .gate import GateHyper
from .taskgen import Dataset, TaskSpec, default_suite, generate_dataset
from .training import TrainHyper


class ConfigError(ValueError):
    pass


SWEEPS = ("layer-remove", "layer-keep", "head-remove", "head-keep", "threshold")


@dataclass
class ModelSection:
    n_layers: int = 6
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    init_gain: float = 0.6
    ln_eps: float = 1e-5


@dataclass
class TaskSection:
    n_types: int = 4
    seq_len: int = 12
    num_classes: int = 8
    n_per_type: int = 20000
    value_slots: int = 16


@dataclass
class GateSection(GateHyper):
    per_layer: bool = False


@dataclass
class SweepSection:
    which: tuple = ("layer-remove", "layer-keep", "head-remove", "head-keep", "threshold")
    thresholds: tuple = (0.0, 0.05, 0.1, 0.3, 0.5, 0.7)


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs"


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    task: TaskSection = field(default_factory=TaskSection)
    train: TrainHyper = field(default_factory=TrainHyper)
    gate: GateSection = field(default_factory=GateSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    run: RunSection = field(default_factory=RunSection)

    def items(self) -> list[tuple[str, object]]:
        out = []
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                out.append((f"{sec.name}.{f.name}", getattr(obj, f.name)))
        return out

    def to_text(self, include_run: bool = True) -> str:
        lines = [f"{k} = {_render(v)}" for k, v in self.items()
                 if include_run or not k.startswith("run.")]
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        """Short digest of everything that changes results (``run.*`` excluded)."""
        return hashlib.sha256(self.to_text(include_run=False).encode()).hexdigest()[:12]

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.items()}

    # derived objects

    def encoder_config(self) -> EncoderConfig:
        m, t = self.model, self.task
        return EncoderConfig(n_layers=m.n_layers, n_heads=m.n_heads, d_model=m.d_model,
                             d_ff=m.d_ff, vocab_size=_vocab_size(t), max_seq_len=t.seq_len + 1,
                             num_classes=t.num_classes, ln_eps=m.ln_eps, init_gain=m.init_gain)

    def specs(self) -> list[TaskSpec]:
        t = self.task
        specs = default_suite(t.n_types, t.seq_len, t.num_classes)
        return [dataclasses.replace(s, value_slots=t.value_slots) for s in specs]

    def dataset(self, seed: int | None = None) -> Dataset:
        return generate_dataset(self.specs(), self.task.n_per_type,
                                self.run.seed if seed is None else seed)

    def gate_hyper(self) -> GateHyper:
        g = self.gate
        return GateHyper(**{f.name: getattr(g, f.name) for f in dataclasses.fields(GateHyper)})


def _vocab_size(t: TaskSection) -> int:
    from .taskgen import Vocab

    return Vocab(t.seq_len, t.num_classes).size


def _render(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_render(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(p) for p in parts)
            return tuple(parts)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    defaults = dict(cfg.items())
    seen = set()
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        seen.add(key)
        sec, name = key.split(".", 1)
        setattr(getattr(cfg, sec), name, _parse(raw, defaults[key], key))
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def validate(cfg: RunConfig) -> None:
    bad = [w for w in cfg.sweep.which if w not in SWEEPS]
    if bad:
        raise ConfigError(f"sweep.which: unknown sweep(s) {bad}; choose from {list(SWEEPS)}")
    if cfg.task.n_types not in (4, 12):
        raise ConfigError("task.n_types must be 4 or 12")
    if cfg.model.d_model % cfg.model.n_heads:
        raise ConfigError("model.d_model must be divisible by model.n_heads")
    if cfg.task.n_per_type < 1:
        raise ConfigError("task.n_per_type must be >= 1")
    if cfg.gate.penalty not in ("q", "s"):
        raise ConfigError("gate.penalty must be q or s")
    if any(not 0.0 <= t <= 1.0 for t in cfg.sweep.thresholds):
        raise ConfigError("sweep.thresholds must lie in [0, 1]")
    try:
        for s in cfg.specs():
            s.validate()
    except ValueError as exc:
        raise ConfigError(f"task: {exc}") from exc
