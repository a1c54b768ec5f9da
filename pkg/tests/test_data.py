import os

import numpy as np
import pytest

from acre.data import (
    RECIPROCAL_SUFFIX,
    SPLITS,
    TripleStore,
    Vocabulary,
    add_reciprocals,
    build_label_index,
    classify_relations,
    load_cache,
    load_store,
    load_triples,
    mirror,
    prepare_store,
    read_triples_file,
    save_cache,
)
from acre.errors import TripleFormatError
from conftest import TOY_TEST, TOY_TRAIN, TOY_VALID, write_kg, write_split


def store_from(train, num_entities=None):
    """Build a store straight from id triples, one relation name per id."""
    train = np.asarray(train, dtype=np.int64).reshape(-1, 3)
    n = num_entities or int(max(train[:, 0].max(), train[:, 2].max()) + 1)
    r = int(train[:, 1].max() + 1)
    vocab = Vocabulary(tuple(f"e{i}" for i in range(n)), tuple(f"r{i}" for i in range(r)))
    return TripleStore(vocab=vocab, splits={"train": train}, num_original_relations=r)


class TestLoadTriples:

    def test_toy_counts_and_ids(self, toy_store):
        assert toy_store.num_entities == 7
        assert toy_store.num_relations == 3
        assert toy_store.stats_line() == "E=7 R=3 train=12 valid=3 test=3"
        assert toy_store.vocab.entities[:4] == ("anna", "ben", "cleo", "dan")
        assert toy_store.vocab.relations == ("parent_of", "sibling_of", "married_to")

    def test_vocabulary_round_trip(self, toy_store):
        vocab = toy_store.vocab
        for i, name in enumerate(vocab.entities):
            assert vocab.entity_id(name) == i
        for i, name in enumerate(vocab.relations):
            assert vocab.relation_id(name) == i

    def test_ids_are_deterministic(self, toy_kg_dir):
        first, _ = load_triples(toy_kg_dir)
        second, _ = load_triples(toy_kg_dir)
        assert first.vocab == second.vocab
        for split in SPLITS:
            np.testing.assert_array_equal(first.split(split), second.split(split))

    def test_whitespace_separated_lines(self, tmp_path):
        path = tmp_path / "train.txt"
        path.write_text("a  r   b\n\nc\tr\td\n", encoding="utf-8")
        assert read_triples_file(str(path)) == [("a", "r", "b"), ("c", "r", "d")]

    def test_tab_separated_names_may_contain_spaces(self, tmp_path):
        path = tmp_path / "train.txt"
        path.write_text("new york\tlocated_in\tusa\n", encoding="utf-8")
        assert read_triples_file(str(path)) == [("new york", "located_in", "usa")]

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "train.txt"
        path.write_text("a\tr\tb\nbroken line\n", encoding="utf-8")
        with pytest.raises(TripleFormatError) as info:
            read_triples_file(str(path))
        assert info.value.line_number == 2
        assert ":2:" in str(info.value)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "train.txt"
        path.write_text("\n", encoding="utf-8")
        with pytest.raises(TripleFormatError):
            read_triples_file(str(path))

    def test_duplicates_are_dropped_and_counted(self, tmp_path):
        path = tmp_path / "single.txt"
        path.write_text("a r b\na r b\n", encoding="utf-8")
        store, _ = load_triples(str(path))
        assert len(store.split("train")) == 1
        assert store.duplicates["train"] == 1

    def test_missing_split_file_is_named(self, tmp_path):
        write_split(tmp_path / "train.txt", TOY_TRAIN)
        write_split(tmp_path / "test.txt", TOY_TEST)
        with pytest.raises(FileNotFoundError, match="valid"):
            load_triples(str(tmp_path))

    def test_unseen_entities_are_kept_and_flagged(self, tmp_path):
        directory = write_kg(tmp_path / "kg", TOY_TRAIN, TOY_VALID + [("zoe", "parent_of", "ben")], TOY_TEST)
        store, vocab = load_triples(directory)
        assert store.unseen_entities == frozenset({vocab.entity_id("zoe")})

    def test_fixed_vocabulary(self, toy_kg_dir, toy_store):
        store, vocab = load_triples(toy_kg_dir, vocab=toy_store.vocab)
        assert vocab is toy_store.vocab
        np.testing.assert_array_equal(store.split("train"), toy_store.split("train"))

    def test_splits_are_read_only(self, toy_store):
        with pytest.raises(ValueError):
            toy_store.split("train")[0, 0] = 5


class TestReciprocals:

    def test_single_triple(self):
        store = store_from([[0, 0, 1]])
        doubled = add_reciprocals(store)
        assert doubled.num_relations == 2
        assert doubled.reciprocal
        np.testing.assert_array_equal(doubled.split("train"), [[0, 0, 1], [1, 1, 0]])
        assert doubled.vocab.relations == ("r0", f"r0{RECIPROCAL_SUFFIX}")

    def test_toy_store_doubles(self, toy_store):
        doubled = add_reciprocals(toy_store)
        assert doubled.num_relations == 6
        assert len(doubled.split("train")) == 24
        np.testing.assert_array_equal(doubled.original_triples("train"), toy_store.split("train"))
        assert doubled.stats() == toy_store.stats()

    def test_every_triple_has_its_mirror(self, toy_store):
        doubled = add_reciprocals(toy_store)
        for split in SPLITS:
            rows = {tuple(t) for t in doubled.split(split).tolist()}
            for h, r, t in toy_store.split(split).tolist():
                assert (t, r + 3, h) in rows

    def test_mirror_is_an_involution(self, toy_store):
        triples = toy_store.split("train")
        np.testing.assert_array_equal(mirror(mirror(triples, 3), 3), triples)

    def test_empty_store(self):
        vocab = Vocabulary((), ("r",))
        store = TripleStore(vocab=vocab, splits={"train": np.empty((0, 3), dtype=np.int64)}, num_original_relations=1)
        doubled = add_reciprocals(store)
        assert doubled.num_relations == 2
        assert len(doubled.split("train")) == 0

    def test_twice_is_an_error(self, toy_store):
        with pytest.raises(ValueError):
            add_reciprocals(add_reciprocals(toy_store))

    def test_prepare_store(self, toy_store):
        assert prepare_store(toy_store, "direct") is toy_store
        doubled = prepare_store(toy_store, "reciprocal")
        assert doubled.reciprocal
        assert prepare_store(doubled, "reciprocal") is doubled
        with pytest.raises(ValueError):
            prepare_store(doubled, "direct")


class TestLabelIndex:

    def test_collects_all_answers(self):
        index = build_label_index(store_from([[0, 0, 1], [0, 0, 2]]))
        assert index[(0, 0)] == frozenset({1, 2})

    def test_absent_query_is_empty(self):
        index = build_label_index(store_from([[0, 0, 1]]))
        assert index[(1, 0)] == frozenset()
        assert (1, 0) not in index

    def test_matches_linear_scan(self, toy_store):
        index = build_label_index(toy_store, SPLITS)
        every = np.concatenate([toy_store.split(s) for s in SPLITS])
        for h, r in index.queries().tolist():
            expected = {t for hh, rr, t in every.tolist() if (hh, rr) == (h, r)}
            assert index[(h, r)] == expected
        for h, r, t in every.tolist():
            assert t in index[(h, r)]

    def test_head_direction(self, toy_store):
        index = build_label_index(toy_store, ("train",), direction="head")
        ben, parent_of = toy_store.vocab.entity_id("ben"), toy_store.vocab.relation_id("parent_of")
        anna, dan = toy_store.vocab.entity_id("anna"), toy_store.vocab.entity_id("dan")
        assert index[(ben, parent_of)] == frozenset({anna, dan})

    def test_multi_hot(self):
        index = build_label_index(store_from([[0, 0, 1], [0, 0, 2], [1, 0, 0]]))
        labels = index.multi_hot(np.array([[0, 0], [1, 0], [2, 0]]), 3)
        np.testing.assert_array_equal(labels, [[0, 1, 1], [1, 0, 0], [0, 0, 0]])

    def test_needs_a_split(self, toy_store):
        with pytest.raises(ValueError):
            build_label_index(toy_store, ())


class TestClassifyRelations:

    def test_singleton_is_one_to_one(self):
        assert classify_relations(store_from([[0, 0, 1]]))[0] == "1-to-1"

    def test_one_to_many(self):
        store = store_from([[0, 0, 1], [0, 0, 2], [3, 0, 4], [3, 0, 5]])
        categories = classify_relations(store)
        assert categories[0] == "1-to-n"
        assert categories.table.loc[0, "hpt"] == 2.0
        assert categories.table.loc[0, "tph"] == 1.0

    def test_many_to_one_and_many_to_many(self):
        store = store_from([
            [1, 0, 0], [2, 0, 0], [4, 0, 3], [5, 0, 3],
            [0, 1, 1], [0, 1, 2], [3, 1, 1], [3, 1, 2],
        ])
        categories = classify_relations(store)
        assert categories[0] == "n-to-1"
        assert categories[1] == "m-to-n"
        shares = categories.share_of_triples(store)
        assert shares["n-to-1"] == 0.5
        assert shares["m-to-n"] == 0.5

    def test_relation_without_training_triples_is_undefined(self):
        vocab = Vocabulary(("a", "b"), ("r0", "r1"))
        store = TripleStore(vocab=vocab, splits={"train": np.array([[0, 0, 1]])}, num_original_relations=2)
        categories = classify_relations(store)
        assert categories.undefined == (1,)
        assert categories.get(1) is None

    def test_ignores_reciprocal_mirrors(self, toy_store):
        plain = classify_relations(toy_store)
        doubled = classify_relations(add_reciprocals(toy_store))
        assert plain.categories == doubled.categories

    def test_threshold_must_be_positive(self, toy_store):
        with pytest.raises(ValueError):
            classify_relations(toy_store, threshold=0)


class TestCache:

    def test_identical_bytes_on_rerun(self, toy_kg_dir, tmp_path):
        first, second = tmp_path / "first.json", tmp_path / "second.json"
        save_cache(load_triples(toy_kg_dir)[0], str(first))
        save_cache(load_triples(toy_kg_dir)[0], str(second))
        assert first.read_bytes() == second.read_bytes()

    def test_round_trip(self, toy_store, tmp_path):
        path = str(tmp_path / "triples.json")
        save_cache(toy_store, path)
        loaded = load_cache(path)
        assert loaded.vocab == toy_store.vocab
        assert loaded.stats() == toy_store.stats()
        for split in SPLITS:
            np.testing.assert_array_equal(loaded.split(split), toy_store.split(split))
        assert load_store(path).stats() == toy_store.stats()

    def test_rejects_foreign_json(self, tmp_path):
        path = tmp_path / "other.json"
        path.write_text('{"format": "something-else", "version": 1}', encoding="utf-8")
        with pytest.raises(TripleFormatError):
            load_cache(str(path))


@pytest.mark.slow
def test_kinship_statistics():
    directory = os.environ.get("ACRE_KINSHIP_DIR")
    if not directory:
        pytest.skip("ACRE_KINSHIP_DIR is not set")
    store, _ = load_triples(directory)
    assert store.stats_line() == "E=104 R=25 train=8544 valid=1068 test=1074"
    doubled = add_reciprocals(store)
    assert doubled.num_relations == 50
    assert len(doubled.split("train")) == 17088
