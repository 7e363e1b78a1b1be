"""FASTA parsing, dataset manifests and exact-duplicate detection.

All functions here are pure: they read immutable inputs and return new
objects, so they are safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from rescap.errors import (
    BadLabel,
    BadSplit,
    DuplicateId,
    IllegalResidue,
    MalformedFasta,
    UnresolvedId,
)

# Canonical amino-acid alphabet, fixed column order for one-hot encoding.
ALPHABET = "ACDEFGHIKLMNPQRSTVWY"
ALPHABET_INDEX = {aa: i for i, aa in enumerate(ALPHABET)}

# Non-canonical letters that appear in real-world FASTA files.  They are
# rejected unless the caller opts into mapping them to the ambiguity letter
# 'X', which downstream one-hot encoding renders as an all-zero row.
NONCANONICAL = set("BJOUXZ")

SPLITS = ("train", "test")


@dataclass(frozen=True)
class ProteinSequence:
    """A validated amino-acid sequence with identifier and optional label."""

    id: str
    residues: str
    label: Optional[int] = None

    def __post_init__(self):
        if not self.id or any(c.isspace() for c in self.id):
            raise MalformedFasta(f"bad sequence id {self.id!r}")
        if not self.residues:
            raise MalformedFasta(f"record '{self.id}' has an empty body")
        for pos, ch in enumerate(self.residues):
            if ch not in ALPHABET_INDEX and ch != "X":
                raise IllegalResidue(ch, pos, self.id)
        if self.label is not None and self.label not in (0, 1):
            raise BadLabel(f"label of '{self.id}' must be 0 or 1, got {self.label!r}")

    def __len__(self) -> int:
        return len(self.residues)

    def with_label(self, label: int) -> "ProteinSequence":
        return ProteinSequence(self.id, self.residues, label)


def _validate_residues(seq_id: str, body: str, map_unknown: bool) -> str:
    out = []
    for pos, ch in enumerate(body):
        c = ch.upper()
        if c in ALPHABET_INDEX:
            out.append(c)
        elif c in NONCANONICAL and map_unknown:
            out.append("X")
        else:
            raise IllegalResidue(ch, pos, seq_id)
    return "".join(out)


def parse_fasta_text(text: str, map_unknown: bool = False) -> list[ProteinSequence]:
    """Parse FASTA-formatted text into validated records.

    Record ids are the first whitespace-delimited token after '>'.  Bodies
    may span multiple lines; lowercase residues are accepted and upcased.
    With ``map_unknown`` the non-canonical letters B/J/O/U/X/Z become 'X';
    otherwise they raise ``IllegalResidue``.
    """
    records: list[ProteinSequence] = []
    seen: set[str] = set()
    cur_id: Optional[str] = None
    cur_body: list[str] = []

    def flush():
        if cur_id is None:
            return
        body = "".join(cur_body)
        if not body:
            raise MalformedFasta(f"record '{cur_id}' has an empty body")
        residues = _validate_residues(cur_id, body, map_unknown)
        if cur_id in seen:
            raise DuplicateId(f"duplicate sequence id '{cur_id}'")
        seen.add(cur_id)
        records.append(ProteinSequence(cur_id, residues))

    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush()
            header = line[1:].strip()
            if not header:
                raise MalformedFasta("header line with no id")
            cur_id = header.split()[0]
            cur_body = []
        else:
            if cur_id is None:
                raise MalformedFasta("sequence data before the first '>' header")
            cur_body.append(line)
    flush()
    return records


def parse_fasta(path, map_unknown: bool = False) -> list[ProteinSequence]:
    """Parse a FASTA file; see ``parse_fasta_text``."""
    text = Path(path).read_text(encoding="utf-8")
    return parse_fasta_text(text, map_unknown=map_unknown)


def write_fasta(records: list[ProteinSequence], path, width: int = 60) -> None:
    """Write records in FASTA format, wrapping bodies at ``width`` columns."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(f">{rec.id}\n")
            for i in range(0, len(rec.residues), width):
                fh.write(rec.residues[i : i + width] + "\n")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    """A dataset: manifest rows resolved against their FASTA records."""

    name: str
    source_fasta: str
    entries: list[ManifestEntry]
    sequences: dict[str, ProteinSequence] = field(repr=False, default_factory=dict)

    def split_entries(self, split: str) -> list[ManifestEntry]:
        if split not in SPLITS:
            raise BadSplit(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]

    def class_counts(self, split: str) -> tuple[int, int]:
        """Return (positive, negative) counts for a split."""
        ents = self.split_entries(split)
        pos = sum(1 for e in ents if e.label == 1)
        return pos, len(ents) - pos

    def sequence(self, seq_id: str) -> ProteinSequence:
        return self.sequences[seq_id]


def load_manifest(
    path, fasta: list[ProteinSequence], name: str = "", source_fasta: str = ""
) -> DatasetManifest:
    """Load a TSV manifest (header ``id<TAB>label<TAB>split``) and resolve ids.

    Every manifest id must match exactly one FASTA record; resolved sequences
    carry the manifest label.
    """
    by_id = {rec.id: rec for rec in fasta}
    entries: list[ManifestEntry] = []
    sequences: dict[str, ProteinSequence] = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or [c.strip() for c in lines[0].split("\t")] != ["id", "label", "split"]:
        raise MalformedFasta(f"manifest {path}: expected header 'id<TAB>label<TAB>split'")
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise MalformedFasta(f"manifest {path}:{lineno}: expected 3 tab-separated fields")
        seq_id, label_s, split = (p.strip() for p in parts)
        if label_s not in ("0", "1"):
            raise BadLabel(f"manifest {path}:{lineno}: label must be 0 or 1, got {label_s!r}")
        if split not in SPLITS:
            raise BadSplit(f"manifest {path}:{lineno}: split must be train or test, got {split!r}")
        if seq_id not in by_id:
            raise UnresolvedId(f"manifest {path}:{lineno}: id '{seq_id}' not present in FASTA")
        if seq_id in sequences:
            raise DuplicateId(f"manifest {path}:{lineno}: id '{seq_id}' listed twice")
        label = int(label_s)
        entries.append(ManifestEntry(seq_id, label, split))
        sequences[seq_id] = by_id[seq_id].with_label(label)
    return DatasetManifest(
        name=name or Path(path).stem,
        source_fasta=source_fasta,
        entries=entries,
        sequences=sequences,
    )


def find_exact_duplicates(
    a: list[ProteinSequence], b: Optional[list[ProteinSequence]] = None
) -> list[tuple[str, str]]:
    """Report byte-identical residue strings as (id_a, id_b) pairs.

    With two sets, all cross pairs are returned; with ``b=None`` each
    unordered duplicate pair within ``a`` is reported once.
    """
    if b is None:
        groups: dict[str, list[str]] = {}
        for rec in a:
            groups.setdefault(rec.residues, []).append(rec.id)
        pairs = []
        for ids in groups.values():
            for i in range(len(ids)):
                for j in range(i + 1, len(ids)):
                    pairs.append((ids[i], ids[j]))
        return pairs
    by_residues: dict[str, list[str]] = {}
    for rec in a:
        by_residues.setdefault(rec.residues, []).append(rec.id)
    pairs = []
    for rec in b:
        for id_a in by_residues.get(rec.residues, ()):
            pairs.append((id_a, rec.id))
    return pairs
