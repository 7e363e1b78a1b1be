import numpy as np
import pytest

from rescap import seqio
from rescap.errors import (
    BadLabel,
    BadSplit,
    DuplicateId,
    IllegalResidue,
    MalformedFasta,
    UnresolvedId,
)
from rescap.seqio import ProteinSequence


class TestParseFasta:
    def test_two_record_minimal(self, tmp_path):
        p = tmp_path / "a.fasta"
        p.write_text(">s1\nACD\n>s2\nWY\n")
        recs = seqio.parse_fasta(p)
        assert [(r.id, r.residues) for r in recs] == [("s1", "ACD"), ("s2", "WY")]

    def test_line_folding(self):
        recs = seqio.parse_fasta_text(">s1\nAC\nDE")
        assert [(r.id, r.residues) for r in recs] == [("s1", "ACDE")]

    def test_illegal_residue_position(self):
        with pytest.raises(IllegalResidue) as exc:
            seqio.parse_fasta_text(">s1\nACB")
        assert exc.value.char == "B"
        assert exc.value.position == 2

    def test_map_unknown_to_x(self):
        recs = seqio.parse_fasta_text(">s1\nACB\n>s2\nUZX", map_unknown=True)
        assert recs[0].residues == "ACX"
        assert recs[1].residues == "XXX"

    def test_body_before_header(self):
        with pytest.raises(MalformedFasta):
            seqio.parse_fasta_text("ACD\n>s1\nACD")

    def test_empty_body(self):
        with pytest.raises(MalformedFasta):
            seqio.parse_fasta_text(">s1\n>s2\nACD")

    def test_trailing_empty_body(self):
        with pytest.raises(MalformedFasta):
            seqio.parse_fasta_text(">s1\nACD\n>s2\n")

    def test_duplicate_id(self):
        with pytest.raises(DuplicateId):
            seqio.parse_fasta_text(">s1\nACD\n>s1\nWY")

    def test_id_is_first_token(self):
        recs = seqio.parse_fasta_text(">sp|P1|XYZ some description\nACD")
        assert recs[0].id == "sp|P1|XYZ"

    def test_lowercase_upcased(self):
        assert seqio.parse_fasta_text(">s\nacd")[0].residues == "ACD"

    def test_empty_file_is_empty_list(self):
        assert seqio.parse_fasta_text("") == []

    def test_round_trip_random_records(self, tmp_path):
        rng = np.random.default_rng(11)
        records = []
        for i in range(40):
            length = int(rng.integers(1, 200))
            body = "".join(rng.choice(list(seqio.ALPHABET), size=length))
            records.append(ProteinSequence(f"id{i}", body))
        p = tmp_path / "rt.fasta"
        seqio.write_fasta(records, p)
        back = seqio.parse_fasta(p)
        assert [(r.id, r.residues) for r in back] == [(r.id, r.residues) for r in records]


class TestManifest:
    @staticmethod
    def _fasta():
        return seqio.parse_fasta_text(">a\nACD\n>b\nWYW\n>c\nMK\n>d\nLL")

    def test_counts_and_resolution(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("id\tlabel\tsplit\na\t1\ttrain\nb\t0\ttrain\nc\t1\ttest\nd\t0\ttest\n")
        man = seqio.load_manifest(p, self._fasta())
        assert man.class_counts("train") == (1, 1)
        assert man.class_counts("test") == (1, 1)
        assert man.sequence("a").label == 1
        assert man.sequence("b").residues == "WYW"

    def test_counts_invariant_under_reordering(self, tmp_path):
        rows = ["a\t1\ttrain", "b\t0\ttrain", "c\t1\ttest", "d\t0\ttest"]
        counts = []
        for perm in (rows, rows[::-1], [rows[2], rows[0], rows[3], rows[1]]):
            p = tmp_path / "m.tsv"
            p.write_text("id\tlabel\tsplit\n" + "\n".join(perm) + "\n")
            man = seqio.load_manifest(p, self._fasta())
            counts.append((man.class_counts("train"), man.class_counts("test")))
        assert counts[0] == counts[1] == counts[2]

    def test_unresolved_id(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("id\tlabel\tsplit\nmissing\t1\ttrain\n")
        with pytest.raises(UnresolvedId):
            seqio.load_manifest(p, self._fasta())

    def test_bad_label(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("id\tlabel\tsplit\na\t2\ttrain\n")
        with pytest.raises(BadLabel):
            seqio.load_manifest(p, self._fasta())

    def test_bad_split(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("id\tlabel\tsplit\na\t1\tvalid\n")
        with pytest.raises(BadSplit):
            seqio.load_manifest(p, self._fasta())

    def test_bad_header(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("name\tlabel\tsplit\na\t1\ttrain\n")
        with pytest.raises(MalformedFasta):
            seqio.load_manifest(p, self._fasta())


class TestDuplicates:
    def test_disjoint(self):
        a = [ProteinSequence("x", "ACD")]
        b = [ProteinSequence("y", "WYW")]
        assert seqio.find_exact_duplicates(a, b) == []

    def test_cross_pair(self):
        a = [ProteinSequence("x", "ACD")]
        b = [ProteinSequence("y", "ACD")]
        assert seqio.find_exact_duplicates(a, b) == [("x", "y")]

    def test_each_pair_once(self):
        a = [ProteinSequence("x1", "ACD"), ProteinSequence("x2", "ACD")]
        b = [ProteinSequence("y1", "ACD")]
        pairs = seqio.find_exact_duplicates(a, b)
        assert sorted(pairs) == [("x1", "y1"), ("x2", "y1")]

    def test_within_set(self):
        a = [
            ProteinSequence("p", "ACD"),
            ProteinSequence("q", "ACD"),
            ProteinSequence("r", "WY"),
        ]
        assert seqio.find_exact_duplicates(a) == [("p", "q")]
