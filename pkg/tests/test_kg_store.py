import numpy as np
import pytest

from kgnorm.kg_store import (ConceptDictionary, KGFormatError, Term, load_concepts,
                             load_relations, relation_label)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestLoadConcepts:
    def test_groups_terms_by_cui(self, tmp_path):
        p = write(tmp_path, "c.tsv", "C1\ten\tT047\tback pain\nC1\tes\tT047\tdolor de espalda\n")
        d = load_concepts(p)
        assert len(d) == 1
        assert [t.surface for t in d["C1"].terms] == ["back pain", "dolor de espalda"]
        assert d["C1"].preferred == Term("back pain", "en")

    def test_empty_file(self, tmp_path):
        p = write(tmp_path, "c.tsv", "# only a comment\n\n")
        with pytest.raises(KGFormatError, match="empty dictionary"):
            load_concepts(p)

    def test_duplicate_rows_collapse(self, tmp_path):
        p = write(tmp_path, "c.tsv", "C1\ten\tT047\tback pain\nC1\ten\tT047\tback pain\n")
        assert len(load_concepts(p)["C1"].terms) == 1

    def test_same_surface_other_language_kept(self, tmp_path):
        p = write(tmp_path, "c.tsv", "C1\ten\tT047\tdolor\nC1\tes\tT047\tdolor\n")
        assert len(load_concepts(p)["C1"].terms) == 2

    def test_malformed_line_reports_number(self, tmp_path):
        p = write(tmp_path, "c.tsv", "C1\ten\tT047\tback pain\nC2\ten\tbroken\n")
        with pytest.raises(KGFormatError, match=":2:"):
            load_concepts(p)

    def test_semantic_types_union(self, tmp_path):
        p = write(tmp_path, "c.tsv", "C1\ten\tT047\tfoo\nC1\ten\tT184\tbar\n")
        assert load_concepts(p)["C1"].semantic_types == {"T047", "T184"}

    def test_nfc_and_trim(self, tmp_path):
        p = write(tmp_path, "c.tsv", "C1\tfr\tT047\t  café  \n")
        assert load_concepts(p)["C1"].terms[0].surface == "café"

    def test_case_preserved(self, tmp_path):
        p = write(tmp_path, "c.tsv", "C1\tde\tT047\tKopfschmerz\n")
        assert load_concepts(p)["C1"].terms[0].surface == "Kopfschmerz"

    def test_sorted_and_idempotent(self, toy_files):
        a, b = load_concepts(toy_files[0]), load_concepts(toy_files[0])
        assert a == b
        assert a.ids == sorted(a.ids)

    def test_surface_lookup(self, toy_kg):
        d, _ = toy_kg
        assert d.concepts_for_surface("backache") == ["C1"]
        assert d.concepts_for_surface("nothing") == []

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_concepts(tmp_path / "nope.tsv")


class TestLoadRelations:
    def test_single_triplet(self, tmp_path, toy_kg):
        d, _ = toy_kg
        p = write(tmp_path, "r.tsv", "C1\tCHD|is_a\tC2\n")
        store = load_relations(p, d)
        assert len(store) == 1 and len(store.labels) == 1

    def test_unknown_endpoint_dropped(self, tmp_path, toy_kg):
        d, _ = toy_kg
        p = write(tmp_path, "r.tsv", "C1\tCHD|is_a\tC9\n")
        store = load_relations(p, d)
        assert len(store) == 0 and store.dropped == 1

    def test_label_inventory_first_seen(self, tmp_path, toy_kg):
        d, _ = toy_kg
        p = write(tmp_path, "r.tsv", "C1\tRO|has_finding_site\tC2\nC2\tCHD|is_a\tC3\nC3\tRO|has_finding_site\tC1\n")
        assert load_relations(p, d).labels == ["RO|has_finding_site", "CHD|is_a"]

    def test_malformed(self, tmp_path, toy_kg):
        d, _ = toy_kg
        p = write(tmp_path, "r.tsv", "C1\tC2\n")
        with pytest.raises(KGFormatError, match=":1:"):
            load_relations(p, d)

    def test_endpoints_resolve(self, toy_kg):
        d, store = toy_kg
        assert all(t.head in d and t.tail in d for t in store.triplets)
        assert all(t.relation in store.label_index for t in store.triplets)

    def test_relation_label_concat(self):
        assert relation_label("CHD", "is_a") == "CHD|is_a"
        assert relation_label("RO") == "RO|"


class TestSampleTerm:
    def test_single_term(self, tmp_path):
        d = load_concepts(write(tmp_path, "c.tsv", "C1\ten\tT\tonly\n"))
        rng = np.random.default_rng(0)
        assert {d.sample_term("C1", rng).surface for _ in range(20)} == {"only"}

    def test_uniform(self, tmp_path):
        text = "".join(f"C1\ten\tT\tterm{i}\n" for i in range(4))
        d = load_concepts(write(tmp_path, "c.tsv", text))
        rng = np.random.default_rng(7)
        counts = {f"term{i}": 0 for i in range(4)}
        for _ in range(10_000):
            counts[d.sample_term("C1", rng).surface] += 1
        sd = (10_000 * 0.25 * 0.75) ** 0.5
        assert all(abs(c - 2500) <= 4 * sd for c in counts.values())
        # chi-square with 3 dof; 16.27 is the 0.999 quantile
        chi2 = sum((c - 2500) ** 2 / 2500 for c in counts.values())
        assert chi2 < 16.27

    def test_unknown(self, toy_kg):
        with pytest.raises(KeyError):
            toy_kg[0].sample_term("CX", np.random.default_rng(0))

    def test_seeded(self, toy_kg):
        d, _ = toy_kg
        a = [d.sample_term("C1", np.random.default_rng(3)).surface for _ in range(5)]
        b = [d.sample_term("C1", np.random.default_rng(3)).surface for _ in range(5)]
        assert a == b


def test_term_rejects_blank():
    with pytest.raises(ValueError):
        Term("   ")


def test_dictionary_rejects_duplicate_ids():
    from kgnorm.kg_store import Concept
    c = Concept("C1", set(), [Term("a")])
    with pytest.raises(ValueError):
        ConceptDictionary([c, Concept("C1", set(), [Term("b")])])
