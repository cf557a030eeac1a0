"""Synthetic pointer-chasing classification tasks with controllable depth.

A sequence is ``[CLS] t_1 ... t_n``. One start marker sits at position
``s``; the token at ``s + 1`` is either the answer value (depth 0) or a
pointer to the next position, and the chain continues for ``depth`` hops
until it lands on a value token. Every other position holds a distractor
value or a distractor pointer. Distractor pointers never target a chain
position, and the value tokens are balanced over classes, so counting
tokens gives no information about the label.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import CLS_ID, PAD_ID
from .seeding import rng_for

N_MARKERS = 3  # one start-marker id per surface variant
FIRST_MARKER = 2


class InfeasibleSpec(ValueError):
    pass


class BrokenChain(RuntimeError):
    pass


@dataclass(frozen=True)
class Vocab:
    seq_len: int
    num_classes: int

    @property
    def first_pointer(self) -> int:
        return FIRST_MARKER + N_MARKERS

    @property
    def first_value(self) -> int:
        return self.first_pointer + self.seq_len

    @property
    def size(self) -> int:
        return self.first_value + self.num_classes

    def marker(self, variant: int) -> int:
        return FIRST_MARKER + variant

    def pointer(self, position: int) -> int:
        return self.first_pointer + position - 1

    def value(self, cls: int) -> int:
        return self.first_value + cls

    def is_marker(self, tok: int) -> bool:
        return FIRST_MARKER <= tok < FIRST_MARKER + N_MARKERS

    def is_pointer(self, tok: int) -> bool:
        return self.first_pointer <= tok < self.first_value

    def is_value(self, tok: int) -> bool:
        return self.first_value <= tok < self.size

    def target(self, tok: int) -> int:
        return tok - self.first_pointer + 1

    def value_class(self, tok: int) -> int:
        return tok - self.first_value


@dataclass(frozen=True)
class TaskSpec:
    type_id: int
    depth: int
    seq_len: int = 32
    num_classes: int = 8
    variant: int = 0
    value_slots: int = 16

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.seq_len, self.num_classes)

    @property
    def name(self) -> str:
        return f"d{self.depth}" if self.variant == 0 else f"d{self.depth}v{self.variant}"

    @property
    def n_values(self) -> int:
        # start marker plus the depth chain pointers take the remaining slots
        return min(self.value_slots, self.seq_len - 1 - self.depth)

    def validate(self) -> None:
        if self.depth < 0:
            raise InfeasibleSpec("depth must be >= 0")
        if self.seq_len < self.depth + 3:
            raise InfeasibleSpec(f"seq_len={self.seq_len} too short for depth {self.depth}")
        if not 0 <= self.variant < N_MARKERS:
            raise InfeasibleSpec(f"variant must be in [0, {N_MARKERS})")
        if self.num_classes < 1 or self.num_classes > self.n_values:
            raise InfeasibleSpec(
                f"num_classes={self.num_classes} exceeds the {self.n_values} value slots")


@dataclass
class LabeledInstance:
    tokens: np.ndarray
    label: int
    type_id: int


def generate_instance(spec: TaskSpec, rng: np.random.Generator,
                      label: int | None = None) -> LabeledInstance:
    spec.validate()
    vocab = spec.vocab
    n = spec.seq_len
    C = spec.num_classes
    if label is None:
        label = int(rng.integers(C))
    toks = np.full(n + 1, -1, dtype=np.int64)
    toks[0] = CLS_ID

    s = int(rng.integers(1, n))  # start marker needs a successor
    toks[s] = vocab.marker(spec.variant)
    free = [p for p in range(1, n + 1) if p not in (s, s + 1)]
    hops = list(rng.choice(free, size=spec.depth, replace=False)) if spec.depth else []
    chain = [s + 1] + [int(p) for p in hops]
    for here, nxt in zip(chain[:-1], chain[1:]):
        toks[here] = vocab.pointer(nxt)
    toks[chain[-1]] = vocab.value(label)

    rest = [p for p in range(1, n + 1) if toks[p] < 0]
    rest = [rest[i] for i in rng.permutation(len(rest))]
    nv = spec.n_values
    counts = np.full(C, nv // C)
    counts[: nv % C] += 1
    counts[label] -= 1
    if counts[label] < 0:
        counts[label] = 0
    pool = np.repeat(np.arange(C), np.maximum(counts, 0))
    pool = pool[rng.permutation(len(pool))]
    for p, c in zip(rest[: len(pool)], pool):
        toks[p] = vocab.value(int(c))
    allowed = np.array([p for p in range(1, n + 1) if p not in chain])
    for p in rest[len(pool):]:
        toks[p] = vocab.pointer(int(allowed[rng.integers(len(allowed))]))
    return LabeledInstance(toks, int(label), spec.type_id)


def resolve(tokens, seq_len: int | None = None, num_classes: int = 8) -> int:
    """Walk the chain from the start marker and return the landing value's class.

    Uses only direct indexing over the token sequence.
    """
    toks = [int(t) for t in tokens]
    vocab = Vocab(seq_len if seq_len is not None else len(toks) - 1, num_classes)
    starts = [i for i, t in enumerate(toks) if vocab.is_marker(t)]
    if len(starts) != 1:
        raise BrokenChain(f"expected one start marker, found {len(starts)}")
    pos = starts[0] + 1
    seen = set()
    while True:
        if not 1 <= pos < len(toks):
            raise BrokenChain(f"position {pos} out of range")
        if pos in seen:
            raise BrokenChain(f"cycle at position {pos}")
        seen.add(pos)
        tok = toks[pos]
        if vocab.is_value(tok):
            return vocab.value_class(tok)
        if not vocab.is_pointer(tok):
            raise BrokenChain(f"position {pos} holds neither pointer nor value ({tok})")
        pos = vocab.target(tok)


def default_suite(n_types: int = 4, seq_len: int = 32, num_classes: int = 8) -> list[TaskSpec]:
    """4 types with depths 0..3, or 12 types (depths 0..3 x 3 start-marker variants)."""
    if n_types == 4:
        return [TaskSpec(k, k, seq_len, num_classes) for k in range(4)]
    if n_types == 12:
        return [TaskSpec(3 * k + v, k, seq_len, num_classes, variant=v)
                for k in range(4) for v in range(3)]
    raise ValueError("suite size must be 4 or 12")


SPLITS = ("train", "val", "test")


def split_of(type_id: int, index: int) -> str:
    h = hashlib.sha256(f"split/{type_id}/{index}".encode()).digest()
    r = int.from_bytes(h[:8], "little") % 10
    return "train" if r < 8 else ("val" if r == 8 else "test")


@dataclass
class Dataset:
    tokens: np.ndarray  # (N, T) int64
    labels: np.ndarray  # (N,)
    types: np.ndarray  # (N,)
    splits: np.ndarray  # (N,) str
    indices: np.ndarray  # per-type instance index
    specs: list[TaskSpec] = field(default_factory=list)
    seed: int = 0

    def __len__(self):
        return len(self.labels)

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(self.tokens[mask], self.labels[mask], self.types[mask],
                       self.splits[mask], self.indices[mask], self.specs, self.seed)

    def split(self, name: str) -> "Dataset":
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return self.subset(self.splits == name)

    @property
    def type_ids(self) -> list[int]:
        return [s.type_id for s in self.specs]

    @property
    def type_depths(self) -> dict[int, int]:
        return {s.type_id: s.depth for s in self.specs}

    def to_jsonl(self, path) -> None:
        path = Path(path)
        with open(path, "w") as fh:
            for i in range(len(self)):
                fh.write(json.dumps({
                    "type_id": int(self.types[i]),
                    "index": int(self.indices[i]),
                    "split": str(self.splits[i]),
                    "tokens": [int(t) for t in self.tokens[i]],
                    "label": int(self.labels[i]),
                }, separators=(",", ":")) + "\n")
        manifest = {"seed": self.seed, "specs": [asdict(s) for s in self.specs]}
        path.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "Dataset":
        path = Path(path)
        rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        manifest = json.loads(path.with_suffix(".manifest.json").read_text())
        return cls(
            tokens=np.array([r["tokens"] for r in rows], dtype=np.int64),
            labels=np.array([r["label"] for r in rows], dtype=np.int64),
            types=np.array([r["type_id"] for r in rows], dtype=np.int64),
            splits=np.array([r["split"] for r in rows]),
            indices=np.array([r["index"] for r in rows], dtype=np.int64),
            specs=[TaskSpec(**s) for s in manifest["specs"]],
            seed=manifest["seed"],
        )


def generate_dataset(specs: list[TaskSpec], n_per_type: int, seed: int) -> Dataset:
    if n_per_type < 1:
        raise ValueError("n_per_type must be >= 1")
    lens = {s.seq_len for s in specs}
    if len(lens) != 1:
        raise InfeasibleSpec("all specs in a suite must share seq_len")
    toks, labels, types, splits, idxs = [], [], [], [], []
    for spec in specs:
        spec.validate()
        C = spec.num_classes
        order = rng_for(seed, f"taskgen/type{spec.type_id}/labels").permutation(n_per_type)
        for i in range(n_per_type):
            lab = int(order[i] % C)
            inst = generate_instance(spec, rng_for(seed, f"taskgen/type{spec.type_id}/idx{i}"), lab)
            toks.append(inst.tokens)
            labels.append(lab)
            types.append(spec.type_id)
            splits.append(split_of(spec.type_id, i))
            idxs.append(i)
    perm = rng_for(seed, "taskgen/shuffle").permutation(len(labels))
    return Dataset(
        tokens=np.array(toks, dtype=np.int64)[perm],
        labels=np.array(labels, dtype=np.int64)[perm],
        types=np.array(types, dtype=np.int64)[perm],
        splits=np.array(splits)[perm],
        indices=np.array(idxs, dtype=np.int64)[perm],
        specs=list(specs),
        seed=seed,
    )
