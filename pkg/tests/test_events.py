import pytest
from hypothesis import given, strategies as st

from duphist.atoms import (
    FORWARD,
    REVERSE,
    AtomInstance,
    AtomicSequence,
    adjacent_pair_count,
)
from duphist.events import (
    Deletion,
    Duplication,
    EventError,
    InstanceMinter,
    Speciation,
    apply_deletion,
    apply_duplication,
    apply_speciation,
    placed_copy_span,
    placed_source_span,
    unwind_deletion,
    unwind_duplication,
    unwind_speciation,
)


def make_seq(n, species="s"):
    return AtomicSequence(
        species, [AtomInstance(i, i + 1, FORWARD) for i in range(n)]
    )


def types_of(seq):
    return [(a.type_id, a.strand) for a in seq.atoms]


def test_forward_duplication():
    seq = make_seq(4)
    d = Duplication(src_start=1, src_end=3, insert_pos=4, inverted=False)
    out, pairs = apply_duplication(seq, d, InstanceMinter(100))
    assert types_of(out) == [
        (1, FORWARD),
        (2, FORWARD),
        (3, FORWARD),
        (4, FORWARD),
        (2, FORWARD),
        (3, FORWARD),
    ]
    assert [(s.id, c.id) for s, c in pairs] == [(1, 100), (2, 101)]
    assert d.direction == "L2R"


def test_inverted_duplication_reverses_order_and_strand():
    seq = make_seq(3)
    d = Duplication(src_start=1, src_end=3, insert_pos=0, inverted=True)
    out, _ = apply_duplication(seq, d, InstanceMinter(100))
    assert types_of(out) == [
        (3, REVERSE),
        (2, REVERSE),
        (1, FORWARD),
        (2, FORWARD),
        (3, FORWARD),
    ]
    assert d.direction == "R2L"


def test_insert_inside_source_rejected():
    seq = make_seq(4)
    d = Duplication(src_start=0, src_end=3, insert_pos=1, inverted=False)
    with pytest.raises(EventError, match="inside the source"):
        apply_duplication(seq, d, InstanceMinter())


def test_placed_spans_left_insertion():
    d = Duplication(src_start=2, src_end=4, insert_pos=0, inverted=False)
    assert placed_copy_span(d) == (0, 2)
    assert placed_source_span(d) == (4, 6)


def test_deletion_and_unwind():
    seq = make_seq(5)
    d = Deletion(start=1, end=3)
    out, removed = apply_deletion(seq, d)
    assert types_of(out) == [(1, FORWARD), (4, FORWARD), (5, FORWARD)]
    back = unwind_deletion(out, d, removed)
    assert types_of(back) == types_of(seq)


def test_unwind_duplication_refuses_mangled_copy():
    seq = make_seq(3)
    d = Duplication(src_start=0, src_end=2, insert_pos=3, inverted=False)
    out, _ = apply_duplication(seq, d, InstanceMinter(100))
    out.atoms[3] = AtomInstance(999, 77, FORWARD)
    with pytest.raises(EventError, match="mirror"):
        unwind_duplication(out, d)


def test_speciation_split_and_merge():
    seq = make_seq(4, species="parent")
    s = Speciation(
        "parent", "left", "right", deletions_a=[(1, 2)], deletions_b=[(3, 4)]
    )
    minter = InstanceMinter(100)
    child_a, child_b, pairs = apply_speciation(seq, s, minter)
    assert types_of(child_a) == [(1, FORWARD), (3, FORWARD), (4, FORWARD)]
    assert types_of(child_b) == [(1, FORWARD), (2, FORWARD), (3, FORWARD)]
    assert len(pairs) == 6
    merged = unwind_speciation(child_a, child_b, s, InstanceMinter(200))
    assert types_of(merged) == types_of(seq)
    assert merged.species == "parent"


def test_speciation_overlapping_losses_rejected():
    seq = make_seq(3, species="parent")
    s = Speciation(
        "parent", "left", "right", deletions_a=[(0, 2)], deletions_b=[(1, 3)]
    )
    with pytest.raises(EventError, match="both"):
        apply_speciation(seq, s, InstanceMinter())


def test_unwind_speciation_detects_disagreement():
    s = Speciation("parent", "left", "right")
    a = AtomicSequence("left", [AtomInstance(0, 1, FORWARD)])
    b = AtomicSequence("right", [AtomInstance(1, 1, REVERSE)])
    with pytest.raises(EventError, match="disagree"):
        unwind_speciation(a, b, s, InstanceMinter())


@st.composite
def dup_cases(draw):
    n = draw(st.integers(min_value=1, max_value=12))
    src_start = draw(st.integers(min_value=0, max_value=n - 1))
    src_end = draw(st.integers(min_value=src_start + 1, max_value=n))
    insert = draw(
        st.sampled_from(
            [p for p in range(n + 1) if p <= src_start or p >= src_end]
        )
    )
    inverted = draw(st.booleans())
    return n, Duplication(src_start, src_end, insert, inverted)


@given(dup_cases())
def test_duplication_round_trip(case):
    n, d = case
    seq = make_seq(n)
    out, _ = apply_duplication(seq, d, InstanceMinter(1000))
    assert len(out) == n + d.span_len()
    back = unwind_duplication(out, d)
    assert types_of(back) == types_of(seq)


@st.composite
def typed_dup_cases(draw):
    # small type pool with repeats and mixed strands, so the distinct
    # adjacency set genuinely overlaps between source and copy
    n = draw(st.integers(min_value=2, max_value=10))
    types = draw(
        st.lists(
            st.tuples(
                st.integers(min_value=1, max_value=4), st.sampled_from([1, -1])
            ),
            min_size=n,
            max_size=n,
        )
    )
    src_start = draw(st.integers(min_value=0, max_value=n - 1))
    src_end = draw(st.integers(min_value=src_start + 1, max_value=n))
    insert = draw(
        st.sampled_from(
            [p for p in range(n + 1) if p <= src_start or p >= src_end]
        )
    )
    inverted = draw(st.booleans())
    return types, Duplication(src_start, src_end, insert, inverted)


@given(typed_dup_cases())
def test_unwind_changes_pair_count_by_at_most_two(case):
    types, d = case
    seq = AtomicSequence(
        "s", [AtomInstance(t, 1, strand) for t, strand in types]
    )
    out, _ = apply_duplication(seq, d, InstanceMinter(1000))
    assert abs(adjacent_pair_count([out]) - adjacent_pair_count([seq])) <= 2


@given(
    st.integers(min_value=1, max_value=12).flatmap(
        lambda n: st.tuples(
            st.just(n),
            st.integers(min_value=0, max_value=n - 1).flatmap(
                lambda s: st.tuples(
                    st.just(s), st.integers(min_value=s + 1, max_value=n)
                )
            ),
        )
    )
)
def test_deletion_round_trip(case):
    n, (start, end) = case
    seq = make_seq(n)
    d = Deletion(start, end)
    out, removed = apply_deletion(seq, d)
    assert len(out) == n - d.span_len()
    back = unwind_deletion(out, d, removed)
    assert types_of(back) == types_of(seq)
