import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bilopt import vocab
from bilopt.tasks import (
    FAMILIES,
    SplitSpec,
    SuiteError,
    TaskInstance,
    TokenLayout,
    apply_rule,
    candidate_splits,
    export_suite,
    format_instance,
    generate_task_suite,
    import_suite,
    kmeans,
    make_definition,
    make_splits,
    parse_formatted,
    sample_candidates,
    select_best_split,
    split_kmeans,
)


@pytest.fixture(scope="module")
def suite():
    return generate_task_suite(0, tasks_per_family=2, instances_per_task=20)


def test_copy_and_reverse_rules(suite):
    for t in suite.by_type("copy"):
        assert all(i.y == i.x for i in t.instances)
    layout = suite.layout
    a, b, c = layout.content[:3]
    assert apply_rule("reverse", {}, [a, b, c], layout) == (c, b, a)


def test_other_rules_on_hand_examples():
    layout = TokenLayout(n_content=4, max_len=4)
    a, b, c, d = layout.content
    assert apply_rule("rotate", {"r": 1}, [a, b, c], layout) == (b, c, a)
    assert apply_rule("substitution", {"perm": [b, c, d, a]}, [a, d], layout) == (b, a)
    assert apply_rule("select_kth", {"k": 1}, [a, b, c], layout) == (b,)
    assert apply_rule("majority", {"token": a}, [a, a, b], layout) == (vocab.YES,)
    assert apply_rule("majority", {"token": a}, [a, b], layout) == (vocab.NO,)
    assert apply_rule("presence", {"token": c}, [a, b], layout) == (vocab.NO,)
    assert apply_rule("parity", {}, [a, b], layout) == (vocab.YES,)
    with pytest.raises(SuiteError):
        apply_rule("sorting", {}, [a], layout)


def test_every_instance_follows_its_family_rule(suite):
    for t in suite.tasks:
        for inst in t.instances:
            assert apply_rule(t.task_type, t.params, inst.x, suite.layout) == inst.y


def test_definitions_are_derived_from_type_and_parameters(suite):
    for t in suite.tasks:
        assert t.definition == make_definition(t.task_type, t.params, suite.layout)
        assert t.definition[0] == suite.layout.family_token(t.task_type)


def test_no_duplicate_inputs_within_a_task(suite):
    for t in suite.tasks:
        xs = [i.x for i in t.instances]
        assert len(xs) == len(set(xs))


def test_same_seed_gives_identical_suites(tmp_path):
    a = generate_task_suite(5, tasks_per_family=1, instances_per_task=10)
    b = generate_task_suite(5, tasks_per_family=1, instances_per_task=10)
    export_suite(a, tmp_path / "a.jsonl")
    export_suite(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_label_families_are_roughly_balanced():
    s = generate_task_suite(2, families=("majority", "presence"), tasks_per_family=3, instances_per_task=40)
    for t in s.tasks:
        yes = sum(i.y == (vocab.YES,) for i in t.instances)
        assert 8 <= yes <= 32


def test_too_small_vocabulary_is_rejected():
    with pytest.raises(SuiteError, match="vocabulary"):
        generate_task_suite(0, families=("presence",), n_content=1)
    with pytest.raises(SuiteError, match="vocabulary"):
        generate_task_suite(0, families=("copy",), n_content=2, min_len=1, max_len=1, instances_per_task=5)
    with pytest.raises(SuiteError, match="unknown family"):
        generate_task_suite(0, families=("sorting",))


def test_format_instance_example_and_length():
    inst = TaskInstance((20,), (21,))
    assert format_instance(inst) == [vocab.INPUT, 20, vocab.OUTPUT, 21]


token_seq = st.lists(st.integers(vocab.N_RESERVED, 40), min_size=1, max_size=6)


@given(token_seq, token_seq)
def test_format_roundtrip_and_length(x, y):
    inst = TaskInstance(tuple(x), tuple(y))
    z = format_instance(inst)
    assert len(z) == len(x) + len(y) + 2
    assert z.count(vocab.INPUT) == 1 and z.count(vocab.OUTPUT) == 1
    assert z.index(vocab.INPUT) < z.index(vocab.OUTPUT)
    assert parse_formatted(z) == inst


@given(token_seq, token_seq, token_seq, token_seq)
def test_formatting_is_injective(x1, y1, x2, y2):
    if (x1, y1) != (x2, y2):
        assert format_instance(TaskInstance(tuple(x1), tuple(y1))) != format_instance(TaskInstance(tuple(x2), tuple(y2)))


def test_parse_rejects_malformed_sequences():
    with pytest.raises(SuiteError):
        parse_formatted([vocab.INPUT, 20, 21])


def test_instances_must_be_nonempty():
    with pytest.raises(SuiteError):
        TaskInstance((), (1,))


# ----------------------------------------------------------------- splits


def test_meta_test_count_zero_is_rejected(suite):
    with pytest.raises(SuiteError, match="at least one"):
        make_splits(suite.tasks, SplitSpec(test_types=["rotate"], n_meta_test=0), 0)


def test_six_types_split_five_to_one():
    s = generate_task_suite(0, families=FAMILIES[:6], tasks_per_family=1, instances_per_task=12)
    sp = make_splits(s.tasks, SplitSpec(test_types=[], n_meta_test=1, valid_per_task=2), 3)
    assert len(sp.meta_test_types) == 1 and len(sp.meta_train_types) == 5
    assert not set(sp.meta_test_types) & set(sp.meta_train_types)


def test_overlapping_type_requests_are_rejected(suite):
    spec = SplitSpec(test_types=["rotate"], meta_train_types=["copy", "reverse"], meta_test_types=["copy"])
    with pytest.raises(SuiteError, match="two splits"):
        make_splits(suite.tasks, spec, 0)


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_splits_are_disjoint_by_type_and_hold_out_validation(seed, n_meta_test):
    s = _SUITE
    sp = make_splits(s.tasks, SplitSpec(test_types=["rotate", "presence"], n_meta_test=n_meta_test, valid_per_task=4), seed)
    groups = [set(sp.meta_train_types), set(sp.meta_test_types), set(sp.test_types)]
    assert not (groups[0] & groups[1]) and not (groups[0] & groups[2]) and not (groups[1] & groups[2])
    assert len(groups[1]) == n_meta_test
    for t in sp.train:
        assert len(t.valid) == 4 and not set(t.valid) & set(t.instances)


_SUITE = generate_task_suite(1, tasks_per_family=1, instances_per_task=12)


def test_best_of_sixteen_random_splits_is_deterministic(suite):
    spec = SplitSpec(test_types=["rotate", "presence"], n_meta_test=2)
    score = lambda sp: -sum(len(t) for t in sp.meta_test_types)
    picks = [select_best_split(candidate_splits(suite.tasks, spec, 9, 16), score) for _ in range(2)]
    assert picks[0] == picks[1]
    assert len(candidate_splits(suite.tasks, spec, 9, 16)) == 16


# ----------------------------------------------------------------- candidate pools


def test_candidate_pools(suite):
    task = suite.tasks[0]
    one = sample_candidates(task, 1, 0)
    assert one.size == 1 and parse_formatted(one.candidates[0]) in task.instances
    assert sample_candidates(task, 32, 4).candidates == sample_candidates(task, 32, 4).candidates
    big = sample_candidates(task, 50, 1)
    assert big.size == 50
    padded = big.padded()
    assert padded.shape[0] == 50 and np.all(padded[:, -1] >= 0)


# ----------------------------------------------------------------- k-means


def _planted(suite, rng):
    """Token embeddings that place copy and reverse definitions far apart."""
    emb = rng.normal(scale=0.01, size=(suite.vocab_size, 3))
    emb[suite.layout.family_token("copy")] = [30.0, 0, 0]
    emb[suite.layout.family_token("reverse")] = [-30.0, 0, 0]
    return emb


def test_kmeans_recovers_planted_clusters(rng):
    s = generate_task_suite(0, families=("copy", "reverse"), tasks_per_family=4, instances_per_task=6)
    groups = split_kmeans(s.tasks, 2, _planted(s, rng), seed=0)
    as_sets = sorted(sorted(g) for g in groups)
    assert as_sets == [sorted(t.id for t in s.by_type("copy")), sorted(t.id for t in s.by_type("reverse"))]


def test_kmeans_singletons_and_determinism(suite, rng):
    emb = rng.normal(size=(suite.vocab_size, 4))
    groups = split_kmeans(suite.tasks[:5], 5, emb, seed=1)
    assert sorted(len(g) for g in groups) == [1] * 5
    assert split_kmeans(suite.tasks, 3, emb, 7) == split_kmeans(suite.tasks, 3, emb, 7)


def test_kmeans_argument_checks(suite, rng):
    emb = rng.normal(size=(suite.vocab_size, 4))
    with pytest.raises(SuiteError):
        split_kmeans(suite.tasks[:3], 4, emb, 0)
    with pytest.raises(SuiteError):
        split_kmeans(suite.tasks, 1, emb, 0)
    pts = np.vstack([np.zeros((3, 2)), np.full((3, 2), 50.0)])
    labels = kmeans(pts, 2, 0)
    assert len(set(labels[:3])) == 1 and len(set(labels[3:])) == 1 and labels[0] != labels[3]


# ----------------------------------------------------------------- fixtures


def test_suite_export_import_roundtrip(tmp_path, suite):
    sp = make_splits(suite.tasks, SplitSpec(test_types=["rotate"], n_meta_test=1, valid_per_task=3), 0)
    path = tmp_path / "suite.jsonl"
    export_suite(suite, path)
    back = import_suite(path)
    assert back.layout == suite.layout and back.seed == suite.seed
    assert [(t.id, t.task_type, t.definition, t.instances) for t in back.tasks] == [
        (t.id, t.task_type, t.definition, t.instances) for t in suite.tasks
    ]
    (tmp_path / "bad.jsonl").write_text('{"hello": 1}\n')
    with pytest.raises(SuiteError):
        import_suite(tmp_path / "bad.jsonl")
