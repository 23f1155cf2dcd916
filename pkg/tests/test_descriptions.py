import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dvp.descriptions import (
    Description,
    DescriptionSet,
    Partitioning,
    kmeans,
    kmeans_partition,
    load_descriptions,
    parse_manifest,
    partition_by_cause,
    validate_partitioning,
    write_manifest,
)
from dvp.encoder import EmbeddingTable, load_embedding_table
from dvp.errors import ConfigError, DataError, DisjointnessError, FormatError, ValidationError

from conftest import FIXTURES
from oracles import brute_force_inertia


def _set(class_ids, causes=None, dim=3, seed=0):
    r = np.random.default_rng(seed)
    causes = causes or [None] * len(class_ids)
    return DescriptionSet([Description(f"a{i}", c, r.standard_normal(dim), k)
                           for i, (c, k) in enumerate(zip(class_ids, causes))])


class TestDescriptionSet:
    def test_two_by_two(self, tmp_path):
        (tmp_path / "d.txt").write_text('desc a 0 0 "red"\ndesc b 0 1\ndesc c 1 -\ndesc d 1\n')
        table = EmbeddingTable(list("abcd"), np.eye(4))
        s = load_descriptions(tmp_path / "d.txt", table)
        assert s.m == 2 and s.num_classes == 2
        assert s.descriptions[0].text == "red" and s.descriptions[2].cause is None

    def test_id_under_two_classes(self, tmp_path):
        (tmp_path / "d.txt").write_text("desc a 0\ndesc a 1\ndesc b 1\n")
        with pytest.raises(DisjointnessError):
            load_descriptions(tmp_path / "d.txt", EmbeddingTable(["a", "b"], np.eye(2)))

    def test_missing_embedding(self, tmp_path):
        (tmp_path / "d.txt").write_text("desc a 0\ndesc zz 1\n")
        with pytest.raises(DataError):
            load_descriptions(tmp_path / "d.txt", EmbeddingTable(["a"], np.ones((1, 2))))

    def test_class_without_descriptions(self):
        with pytest.raises(DataError):
            DescriptionSet([Description("a", 0, np.ones(2))], num_classes=2)

    def test_unparseable_line(self):
        with pytest.raises(FormatError):
            parse_manifest("desc onlyid\n")

    def test_manifest_round_trip(self, tmp_path):
        s = DescriptionSet([Description("x", 0, np.ones(2), 1, 'say "hi" \\ there'),
                            Description("y", 1, np.ones(2), None, None)])
        write_manifest(s, tmp_path / "m.txt")
        n, rows = parse_manifest((tmp_path / "m.txt").read_text())
        assert n == 2
        assert rows == [("x", 0, 1, 'say "hi" \\ there'), ("y", 1, None, None)]

    def test_flowers_fixture_loads(self):
        d = FIXTURES / "flowers"
        s = load_descriptions(d / "descriptions.txt", load_embedding_table(d / "embeddings.emb"))
        assert s.m == 60 and s.num_classes == 4
        part = partition_by_cause(s, v=3)
        sizes = validate_partitioning(s, part).counts
        assert np.all(sizes == 20)


class TestCausePartition:
    def test_singletons(self):
        s = _set([0, 0, 1], causes=[0, 1, 2])
        p = partition_by_cause(s, {"a0": 0, "a1": 1, "a2": 2}, v=3)
        assert [len(ix) for ix in p.indices(s)] == [1, 1, 1] and p.provenance == "cause"

    def test_single_cause_is_whole_set(self):
        s = _set([0, 1, 1])
        p = partition_by_cause(s, {k: 0 for k in s.ids}, v=1)
        assert np.array_equal(p.indices(s)[0], np.arange(3))

    def test_unlabeled(self):
        s = _set([0, 1])
        with pytest.raises(DataError):
            partition_by_cause(s, {"a0": 0}, v=2)

    def test_label_out_of_range(self):
        s = _set([0, 1], causes=[0, 3])
        with pytest.raises(DataError):
            partition_by_cause(s, v=3)

    def test_empty_cause_warns_and_keeps_partition(self):
        s = _set([0, 1], causes=[0, 0])
        with pytest.warns(UserWarning):
            p = partition_by_cause(s, v=2)
        assert p.v == 2 and p.warnings and len(p.indices(s)[1]) == 0

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=12), st.integers(0, 2**16))
    def test_cause_partition_always_validates(self, causes, seed):
        r = np.random.default_rng(seed)
        classes = r.integers(0, 2, len(causes)).tolist()
        classes[0] = 0
        if len(classes) > 1:
            classes[-1] = 1
        s = _set(classes, causes=causes, seed=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p = partition_by_cause(s, v=4)
        rep = validate_partitioning(s, p)
        assert rep.valid and sum(rep.partition_sizes) == len(s)


class TestKMeans:
    def test_one_dimensional_example(self):
        X = np.array([[0.0], [0.1], [10.0], [10.1]])
        labels, centers, _ = kmeans(X, 2)
        assert labels[0] == labels[1] != labels[2] == labels[3]
        np.testing.assert_allclose(sorted(centers.ravel()), [0.05, 10.05], atol=1e-12)
        assert brute_force_inertia(X, 2) == pytest.approx(0.01, abs=1e-12)

    def test_single_cluster_is_mean(self, rng):
        X = rng.standard_normal((7, 3))
        labels, centers, _ = kmeans(X, 1)
        assert np.all(labels == 0)
        np.testing.assert_allclose(centers[0], X.mean(axis=0), atol=1e-12)

    def test_too_many_clusters(self):
        s = _set([0, 1])
        with pytest.raises(ConfigError):
            kmeans_partition(s, 3)

    def test_defaults(self):
        import inspect

        sig = inspect.signature(kmeans_partition)
        assert sig.parameters["max_iter"].default == 300
        assert sig.parameters["tol"].default == 1e-4

    def test_seed_determinism(self, rng):
        X = rng.standard_normal((30, 4))
        a, b = kmeans(X, 3, seed=5), kmeans(X, 3, seed=5)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_empty_cluster_is_reseeded(self):
        # duplicates force an empty cluster when two initial centers coincide
        X = np.array([[0.0], [0.0], [0.0], [5.0]])
        labels, centers, _ = kmeans(X, 2, n_init=3)
        assert set(labels.tolist()) == {0, 1}

    @given(st.integers(0, 10_000), st.integers(2, 8), st.integers(1, 3))
    def test_inertia_non_increasing(self, seed, n, v):
        X = np.random.default_rng(seed).standard_normal((n, 2))
        v = min(v, n)
        from dvp.descriptions import _lloyd

        tol = 1e-4 * float(np.mean(np.var(X, axis=0)))
        for s in range(10):
            init = np.random.default_rng(s).choice(n, size=v, replace=False)
            hist = _lloyd(X, init, 300, tol)[2]
            assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


class TestValidate:
    def test_dropped_id(self):
        s = _set([0, 1, 1])
        p = Partitioning(1, {"a0": 0, "a2": 0}, "cause")
        with pytest.raises(ValidationError) as info:
            validate_partitioning(s, p)
        assert info.value.offending == ["a1"]

    def test_unknown_id(self):
        s = _set([0, 1])
        p = Partitioning(1, {"a0": 0, "a1": 0, "zz": 0}, "cause")
        with pytest.raises(ValidationError):
            validate_partitioning(s, p)

    def test_class_missing_from_cluster(self):
        # class 0 sits in one blob, class 1 spans both
        emb = [[1, 0], [1.1, 0], [10, 10], [1.05, 0.1], [10.1, 10]]
        s = DescriptionSet([Description(f"a{i}", c, np.array(e, float))
                            for i, (c, e) in enumerate(zip([0, 0, 1, 1, 1], emb))])
        p = kmeans_partition(s, 2)
        far = p.labels_for(s)[2]
        rep = validate_partitioning(s, p)
        assert (0, int(far)) in rep.missing_pairs
        assert rep.counts.sum() == 5
