import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from choplab.seeding import rng_for
from choplab.taskgen import (BrokenChain, Dataset, InfeasibleSpec, TaskSpec, Vocab, default_suite,
                             generate_dataset, generate_instance, resolve)


def test_depth_zero_label_is_value_after_marker():
    spec = TaskSpec(0, 0, seq_len=12)
    v = spec.vocab
    for i in range(50):
        inst = generate_instance(spec, rng_for(0, f"t/{i}"))
        s = next(p for p, t in enumerate(inst.tokens) if v.is_marker(int(t)))
        assert v.value_class(int(inst.tokens[s + 1])) == inst.label
        assert resolve(inst.tokens, 12) == inst.label


def test_hand_built_depth_two_chain():
    v = Vocab(8, 8)
    toks = [1, v.value(0), v.value(1), v.marker(0), v.pointer(7), v.value(4), v.value(2),
            v.pointer(5), v.value(3)]
    # marker at 3; 4 -> 7 -> 5, which holds class 4
    assert resolve(toks, 8) == 4


def test_broken_chains_raise():
    v = Vocab(6, 8)
    cycle = [1, v.marker(0), v.pointer(3), v.pointer(2), v.value(1), v.value(2), v.value(3)]
    with pytest.raises(BrokenChain):
        resolve(cycle, 6)
    no_marker = [1, v.value(0), v.value(1), v.value(2), v.value(3), v.value(4), v.value(5)]
    with pytest.raises(BrokenChain):
        resolve(no_marker, 6)


def test_same_seed_same_instance():
    spec = TaskSpec(2, 2, seq_len=12)
    a = generate_instance(spec, rng_for(5, "x"))
    b = generate_instance(spec, rng_for(5, "x"))
    assert np.array_equal(a.tokens, b.tokens) and a.label == b.label


@settings(max_examples=40, deadline=None)
@given(depth=st.integers(0, 5), seq=st.integers(10, 33), seed=st.integers(0, 2**32 - 1),
       variant=st.integers(0, 2))
def test_round_trip_property(depth, seq, seed, variant):
    assume(seq - 1 - depth >= 8)  # enough value slots for 8 classes
    spec = TaskSpec(0, depth, seq_len=seq, variant=variant)
    inst = generate_instance(spec, rng_for(seed, "prop"))
    assert len(inst.tokens) == seq + 1 and inst.tokens[0] == 1
    assert resolve(inst.tokens, seq) == inst.label
    v = spec.vocab
    assert all(v.is_marker(t) or v.is_pointer(t) or v.is_value(t) for t in map(int, inst.tokens[1:]))


@settings(max_examples=30, deadline=None)
@given(depth=st.integers(1, 4), seed=st.integers(0, 2**32 - 1))
def test_path_length_equals_depth(depth, seed):
    spec = TaskSpec(0, depth, seq_len=16)
    toks = [int(t) for t in generate_instance(spec, rng_for(seed, "len")).tokens]
    v = spec.vocab
    pos = next(p for p, t in enumerate(toks) if v.is_marker(t)) + 1
    hops = 0
    while v.is_pointer(toks[pos]):
        pos = v.target(toks[pos])
        hops += 1
    assert hops == depth


def test_value_tokens_are_label_independent():
    spec = TaskSpec(1, 1, seq_len=12)
    v = spec.vocab
    hist = {}
    for lab in range(8):
        inst = generate_instance(spec, rng_for(0, f"bal/{lab}"), label=lab)
        counts = np.bincount([v.value_class(int(t)) for t in inst.tokens if v.is_value(int(t))],
                             minlength=8)
        hist[lab] = tuple(counts)
    assert len(set(hist.values())) == 1


def test_infeasible_specs():
    with pytest.raises(InfeasibleSpec):
        TaskSpec(0, 3, seq_len=5).validate()
    with pytest.raises(InfeasibleSpec):
        TaskSpec(0, 0, seq_len=6, num_classes=8).validate()
    with pytest.raises(InfeasibleSpec):
        generate_instance(TaskSpec(0, 0, seq_len=12, variant=3), rng_for(0, "x"))
    with pytest.raises(ValueError):
        generate_dataset(default_suite(4, 12), 0, 0)


def test_dataset_counts_and_balance():
    ds = generate_dataset(default_suite(4, 12), 100, seed=1)
    assert len(ds) == 400
    for t in range(4):
        sel = ds.types == t
        assert sel.sum() == 100
        hist = np.bincount(ds.labels[sel], minlength=8)
        assert hist.max() - hist.min() <= 1


def test_dataset_splits_are_disjoint_and_stable():
    a = generate_dataset(default_suite(4, 12), 200, seed=2)
    b = generate_dataset(default_suite(4, 12), 200, seed=9)
    key = lambda d, s: {(int(t), int(i)) for t, i in zip(d.split(s).types, d.split(s).indices)}
    parts = [key(a, s) for s in ("train", "val", "test")]
    assert sum(len(p) for p in parts) == len(a)
    assert not (parts[0] & parts[1]) and not (parts[0] & parts[2]) and not (parts[1] & parts[2])
    # membership is a function of (type, index) only
    assert [key(b, s) for s in ("train", "val", "test")] == parts
    frac = len(parts[0]) / len(a)
    assert 0.7 < frac < 0.9


def test_dataset_serialization_is_deterministic(tmp_path):
    specs = default_suite(12, 12)
    a = generate_dataset(specs, 20, seed=3)
    b = generate_dataset(specs, 20, seed=3)
    a.to_jsonl(tmp_path / "a.jsonl")
    b.to_jsonl(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    back = Dataset.from_jsonl(tmp_path / "a.jsonl")
    assert np.array_equal(back.tokens, a.tokens) and back.specs == specs


def test_twelve_type_suite_shape():
    specs = default_suite(12, 12)
    assert [s.type_id for s in specs] == list(range(12))
    assert sorted({s.depth for s in specs}) == [0, 1, 2, 3]
    assert len({s.name for s in specs}) == 12


def test_bag_of_tokens_baseline_is_near_chance():
    from sklearn.linear_model import LogisticRegression

    ds = generate_dataset(default_suite(4, 12), 1500, seed=4)
    V = Vocab(12, 8).size
    counts = np.stack([np.bincount(t, minlength=V) for t in ds.tokens]).astype(float)
    tr, te = ds.splits == "train", ds.splits == "test"
    for t in range(1, 4):
        a, b = tr & (ds.types == t), te & (ds.types == t)
        clf = LogisticRegression(max_iter=2000).fit(counts[a], ds.labels[a])
        acc = clf.score(counts[b], ds.labels[b])
        assert acc <= 1 / 8 + 0.05, (t, acc)
