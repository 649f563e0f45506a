import copy
import json

import pytest
from hypothesis import given, settings, strategies as st

from fflreport.lexicon import (
    DEMO_LEXICON_PATH,
    MODIFIER_CATEGORIES,
    DuplicateIdError,
    LexiconError,
    OntologyCycleError,
    lexicon_from_dict,
    load_lexicon,
    save_lexicon,
    validate_lexicon_data,
)
from fflreport.text import term_tokens

DEMO = json.loads(DEMO_LEXICON_PATH.read_text("utf-8"))


def tiny(findings):
    return {
        "findings": findings,
        "modifiers": [{"category": c, "terms": [f"{c}word"]} for c in MODIFIER_CATEGORIES],
        "negation_seeds": ["no"],
    }


def f(id, parent=None, **kw):
    return {"id": id, "finding_type": "anatomical", "synonyms": [id.replace("_", " ")], "criticality": 5,
            "ontology_parent": parent, **kw}


def test_demo_lexicon_counts(lex):
    assert len(lex.findings) == 78
    assert len(lex.modifiers) == 9
    assert 10 <= len(lex.negation_seeds) <= 20


def test_self_parent_is_cycle():
    with pytest.raises(OntologyCycleError):
        lexicon_from_dict(tiny([f("a", parent="a")]))


def test_longer_cycle():
    with pytest.raises(OntologyCycleError):
        lexicon_from_dict(tiny([f("a", parent="b"), f("b", parent="a")]))


def test_duplicate_id():
    data = tiny([f("opacity"), f("opacity")])
    data["findings"][1]["synonyms"] = ["density"]
    with pytest.raises(DuplicateIdError):
        lexicon_from_dict(data)


def test_unknown_parent_and_shared_synonym():
    data = tiny([f("a", parent="zzz"), f("b")])
    data["findings"][1]["synonyms"] = ["a"]
    problems = validate_lexicon_data(data)
    assert any("does not exist" in p for p in problems)
    assert any("already maps" in p for p in problems)


def test_schema_problems_name_record():
    data = tiny([f("a")])
    data["findings"][0]["criticality"] = 99
    problems = validate_lexicon_data(data)
    assert problems and problems[0].startswith("findings[0]")


def test_wrong_category_count():
    data = tiny([f("a")])
    data["modifiers"] = data["modifiers"][:8]
    with pytest.raises(LexiconError, match="categories"):
        lexicon_from_dict(data)


def test_bad_id_characters():
    with pytest.raises(LexiconError):
        lexicon_from_dict(tiny([f("a|b")]))


def test_rollup_cases():
    lex = lexicon_from_dict(tiny([f("c"), f("b", parent="c", is_core=False), f("a", parent="b", is_core=False)]))
    assert lex.rollup("a") == "c"
    assert lex.rollup("c") == "c"


def test_rollup_demo(lex):
    assert lex.rollup("centrilobular_emphysema") == "emphysema"
    assert lex.rollup("emphysema") == "emphysema"
    assert lex.rollup("picc_line") == "central_venous_catheter"


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([x["id"] for x in DEMO["findings"]]))
def test_rollup_idempotent(fid):
    from fflreport.lexicon import demo_lexicon

    lex = demo_lexicon()
    r = lex.rollup(fid)
    assert lex.rollup(r) == r
    assert lex.finding(r).is_core


def test_default_location_inherited(lex):
    assert lex.default_location("alveolar_consolidation") == "alveoli"
    assert lex.default_location("hydropneumothorax") == "pleural space"
    assert lex.default_location("rib_fracture") == "rib"


def test_weights_in_unit_interval(lex):
    for x in lex.findings:
        assert 0 < lex.weight(x.id) <= 1


def test_round_trip(tmp_path, lex):
    p = tmp_path / "lex.json"
    save_lexicon(lex, p)
    again = load_lexicon(p)
    assert again == lex
    assert again.to_dict() == lex.to_dict()


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(LexiconError):
        load_lexicon(p)


def test_longest_match(lex):
    toks = [(w,) for w in "left lower lobe alveolar consolidation".split()]
    spans = lex.scan(toks)
    assert [(s, e) for s, e, _ in spans] == [(0, 1), (1, 3), (3, 5)]
    assert spans[2][2] == ("finding", "alveolar_consolidation")


def test_no_terms(lex):
    assert lex.scan([(w,) for w in "the quick brown fox".split()]) == []


def test_term_tokens_lowercase():
    assert term_tokens("Pleural  Effusion") == ("pleural", "effusion")


def test_demo_terms_unique():
    problems = validate_lexicon_data(copy.deepcopy(DEMO))
    assert problems == []
