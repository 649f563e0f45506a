import random
import struct

import pytest

from oracles import rank_oracle, sentence_pool, synthetic_corpus, toy_space
from fflreport.extraction import FflLabel, SentenceExtraction, extract_report
from fflreport.patterndb import (
    ChecksumError,
    EmptyCorpusError,
    LabelSpace,
    PatternDBError,
    PatternVector,
    VersionMismatchError,
    build_database,
    dumps_db,
    load_db,
    loads_db,
    lookup,
    report_to_pattern,
    save_db,
)

OPACITY = FflLabel("anatomical", True, "opacity")


def S(rid, i, text, *labels):
    return SentenceExtraction(rid, i, text, list(labels))


def test_pattern_vector_round_trip():
    v = PatternVector.from_indices(6, [0, 3])
    assert v.to_string() == "100100"
    assert PatternVector.from_string("100100") == v
    assert hash(v) == hash(PatternVector.from_string("100100"))
    with pytest.raises(ValueError):
        PatternVector([0, 2])


def test_report_to_pattern_unit_and_zero():
    space = toy_space()
    k = space.keys[3]
    assert report_to_pattern([space.label(3)], space).set_indices() == [3]
    assert report_to_pattern([], space).set_indices() == []
    assert space.label(3).serialize() == k


def test_nearest_mapping_extra_modifier():
    space = toy_space(n_fine=3)
    fine = space.label(13)
    extra = FflLabel(fine.finding_type, fine.present, fine.core, fine.modifiers + (("size", "mild"),))
    assert report_to_pattern([extra], space).set_indices() == [13]


def test_unmappable_label_ignored():
    from collections import Counter

    stats = Counter()
    v = report_to_pattern([FflLabel("device", True, "pacemaker")], toy_space(), stats)
    assert v.set_indices() == [] and stats["ignored_labels"] == 1


def test_label_space_build_bare_first(lex):
    labs = {"a": [FflLabel("anatomical", True, "opacity", (("laterality", "left"),))], "b": [OPACITY]}
    space = LabelSpace.build(labs, lex)
    assert space.keys[0] == OPACITY.serialize()
    assert space.support == (2, 1)
    assert space.cfl_subset == (0,)
    assert space.weights[0] == pytest.approx(0.6)


def test_min_support_filters(lex):
    labs = {"a": [OPACITY], "b": [OPACITY, FflLabel("anatomical", True, "mass")]}
    assert LabelSpace.build(labs, lex, min_support=2).keys == (OPACITY.serialize(),)
    with pytest.raises(PatternDBError):
        LabelSpace.build(labs, lex, min_support=3)


def test_h_two_of_three(lex):
    ext = [S("a", 0, "Opacity.", OPACITY), S("a", 1, "Shared.", OPACITY),
           S("b", 0, "Opacity.", OPACITY), S("b", 1, "Other.", OPACITY),
           S("c", 0, "Opacity.", OPACITY), S("c", 1, "Shared.", OPACITY)]
    db = build_database(ext, lex)
    [ranked] = db.entries.values()
    by_id = {r.report_id: r for r in ranked}
    assert by_id["a"].h == (1.0, 2 / 3)
    assert by_id["b"].rank == pytest.approx(1 + 1 / 3)
    assert [r.report_id for r in ranked] == ["a", "c", "b"]


def test_all_shared_rank_equals_sentence_count(lex):
    ext = [S(r, i, t, OPACITY) for r in ("a", "b") for i, t in enumerate(["One.", "Two.", "Three."])]
    db = build_database(ext, lex)
    assert all(r.rank == 3.0 for r in db.entries[next(iter(db.entries))])


def test_repeated_sentence_counts_once(lex):
    db = build_database([S("a", 0, "Opacity.", OPACITY), S("a", 1, "opacity", OPACITY)], lex)
    [r] = next(iter(db.entries.values()))
    assert r.rank == 1.0 and r.relevant == (0,)


def test_unlabelled_sentences_are_stored_but_not_ranked(lex):
    db = build_database([S("a", 0, "Opacity.", OPACITY), S("a", 1, "Comparison to prior.")], lex)
    [r] = next(iter(db.entries.values()))
    assert len(r.sentences) == 2 and r.rank == 1.0
    db2 = build_database([S("a", 0, "Opacity.", OPACITY), S("a", 1, "Comparison to prior.")], lex,
                         all_sentences_relevant=True)
    assert next(iter(db2.entries.values()))[0].rank == 2.0


def test_ten_report_oracle():
    rng = random.Random(3)
    space = toy_space(n_fine=2)
    pool = sentence_pool(rng, 6, space)
    ext = synthetic_corpus(rng, 10, pool)
    db = build_database(ext, space=space)
    oracle = rank_oracle(ext, space)
    got = {r.report_id: (tuple(p.set_indices()), r.rank) for p, rs in db.entries.items() for r in rs}
    assert got.keys() == oracle.keys()
    for rid in got:
        assert got[rid][0] == oracle[rid][0]
        assert got[rid][1] == pytest.approx(oracle[rid][1], abs=1e-9)


def test_lookup(lex):
    db = build_database([S("a", 0, "Opacity.", OPACITY)], lex)
    p = next(iter(db.entries))
    assert [r.report_id for r in lookup(p, db)] == ["a"]
    assert lookup(PatternVector.zeros(len(db.label_space)), db) == []


def test_empty_corpus(lex):
    with pytest.raises(EmptyCorpusError):
        build_database([], lex)


@pytest.fixture
def toy_db(lex, fixtures):
    from conftest import read_jsonl

    ext = [e for d in read_jsonl(fixtures / "extraction_reports.jsonl") for e in extract_report(d["text"], lex, d["report_id"])]
    return build_database(ext, lex), ext


def test_save_load_round_trip(tmp_path, toy_db):
    db, _ = toy_db
    p = tmp_path / "db.bin"
    save_db(db, p)
    again = load_db(p)
    assert again.label_space == db.label_space
    assert again.entries == db.entries
    assert again.sentence_stats == db.sentence_stats


def test_build_twice_identical_bytes(lex, toy_db):
    db, ext = toy_db
    assert dumps_db(db) == dumps_db(build_database(ext, lex))


def test_truncated_and_corrupted(toy_db):
    data = dumps_db(toy_db[0])
    with pytest.raises(ChecksumError):
        loads_db(data[:-10])
    flipped = bytearray(data)
    flipped[40] ^= 0xFF
    with pytest.raises(ChecksumError):
        loads_db(bytes(flipped))
    with pytest.raises(PatternDBError):
        loads_db(b"garbage")


def test_version_mismatch(toy_db):
    import hashlib

    data = bytearray(dumps_db(toy_db[0])[:-32])
    struct.pack_into(">H", data, 5, 99)
    data = bytes(data) + hashlib.sha256(bytes(data)).digest()
    with pytest.raises(VersionMismatchError):
        loads_db(data)


def test_header_is_readable_text(toy_db):
    data = dumps_db(toy_db[0])
    assert b"# index\tweight\tsupport\tcfl\tlabel" in data[:200]
