"""Dataset-reliability auditing via global alignment.

Computes optimal global alignments under affine gap penalties (Gotoh
three-matrix recurrence) with BLOSUM62 scoring, and aggregates pairwise
percent-identity statistics within or across sequence sets.

Percent identity uses the full alignment length (gap columns included) as
denominator, the most conservative convention.  A gap of length L costs
``gap_open + (L - 1) * gap_extend``; both knobs are exposed because the
aggregate statistics depend on them.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from rescap.errors import EmptySequence, IllegalResidue, InputError
from rescap.ioutil import atomic_write_text
from rescap.seqio import ALPHABET, ProteinSequence, find_exact_duplicates

GAP = "-"
HIST_BINS = 100  # 1-point identity bins [0,1), [1,2), ..., [99,100]


def _load_kernel():
    if os.environ.get("RESCAP_NO_NATIVE"):
        from rescap import _gotoh_py

        return _gotoh_py, "python"
    try:
        from rescap import _gotoh  # type: ignore[attr-defined]

        return _gotoh, "native"
    except ImportError:
        from rescap import _gotoh_py

        return _gotoh_py, "python"


_KERNEL, _BACKEND = _load_kernel()


def alignment_backend() -> str:
    """Name of the active alignment kernel: 'native' or 'python'."""
    return _BACKEND


@dataclass(frozen=True)
class ScoringScheme:
    """Substitution matrix over an alphabet plus affine gap penalties."""

    alphabet: str
    matrix: np.ndarray  # square, float64, symmetric
    gap_open: float = 10.0
    gap_extend: float = 0.5

    def __post_init__(self):
        n = len(self.alphabet)
        if self.matrix.shape != (n, n):
            raise InputError(f"substitution matrix shape {self.matrix.shape} != ({n}, {n})")
        if not np.array_equal(self.matrix, self.matrix.T):
            raise InputError("substitution matrix must be symmetric")
        for aa in ALPHABET:
            i = self.alphabet.find(aa)
            if i < 0:
                raise InputError(f"scoring alphabet lacks canonical residue {aa!r}")
            if self.matrix[i, i] <= 0:
                raise InputError(f"diagonal score for {aa!r} must be positive")
        if self.gap_open < 0 or self.gap_extend < 0:
            raise InputError("gap penalties must be non-negative")

    def index(self, ch: str) -> int:
        i = self.alphabet.find(ch)
        if i < 0:
            raise IllegalResidue(ch, -1)
        return i

    def encode(self, residues: str) -> np.ndarray:
        try:
            return np.array([self.index(c) for c in residues], dtype=np.uint8)
        except IllegalResidue as exc:
            raise IllegalResidue(exc.char, residues.find(exc.char)) from None

    def score(self, x: str, y: str) -> float:
        return float(self.matrix[self.index(x), self.index(y)])


def load_blosum62(
    path=None, gap_open: float = 10.0, gap_extend: float = 0.5
) -> ScoringScheme:
    """Load a substitution matrix in NCBI plain-text layout.

    Defaults to the bundled BLOSUM62 table.
    """
    if path is None:
        text = resources.files("rescap").joinpath("data/blosum62.txt").read_text()
    else:
        text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    header = lines[0].split()
    alphabet = "".join(header)
    n = len(header)
    matrix = np.zeros((n, n), dtype=np.float64)
    if len(lines) - 1 != n:
        raise InputError(f"matrix has {len(lines) - 1} rows for {n} columns")
    for row_idx, ln in enumerate(lines[1:]):
        parts = ln.split()
        if parts[0] != header[row_idx] or len(parts) != n + 1:
            raise InputError(f"malformed matrix row {parts[0]!r}")
        matrix[row_idx] = [float(v) for v in parts[1:]]
    return ScoringScheme(alphabet, matrix, gap_open, gap_extend)


@dataclass(frozen=True)
class AlignmentResult:
    score: float
    aligned_a: str
    aligned_b: str
    identity_pct: float

    def __len__(self) -> int:
        return len(self.aligned_a)


def _residues(seq) -> str:
    return seq.residues if isinstance(seq, ProteinSequence) else seq


def nw_align(a, b, scheme: ScoringScheme) -> AlignmentResult:
    """Optimal global alignment of two residue strings.

    Traceback ties prefer the residue pair over a gap in ``b`` over a gap
    in ``a``, making results deterministic.
    """
    ra, rb = _residues(a), _residues(b)
    if not ra or not rb:
        raise EmptySequence("cannot align an empty sequence")
    score, ops = _KERNEL.align_pair(
        scheme.encode(ra), scheme.encode(rb), scheme.matrix, scheme.gap_open, scheme.gap_extend
    )
    out_a = []
    out_b = []
    i = j = 0
    matches = 0
    for op in ops:
        if op == 0:
            out_a.append(ra[i])
            out_b.append(rb[j])
            if ra[i] == rb[j]:
                matches += 1
            i += 1
            j += 1
        elif op == 1:
            out_a.append(ra[i])
            out_b.append(GAP)
            i += 1
        else:
            out_a.append(GAP)
            out_b.append(rb[j])
            j += 1
    identity = 100.0 * matches / len(ops)
    return AlignmentResult(float(score), "".join(out_a), "".join(out_b), identity)


def identity_pct(a, b, scheme: ScoringScheme) -> float:
    return nw_align(a, b, scheme).identity_pct


@dataclass
class AuditReport:
    """Aggregated pairwise-identity statistics for one audit run."""

    threshold: float
    pair_count: int
    mean_identity_pct: Optional[float]
    fraction_above_threshold: Optional[float]
    histogram: np.ndarray = field(default_factory=lambda: np.zeros(HIST_BINS, dtype=np.int64))
    duplicate_pairs: list[tuple[str, str]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.pair_count == 0

    def to_dict(self) -> dict:
        return {
            "mean_identity_pct": self.mean_identity_pct,
            "fraction_above_threshold": self.fraction_above_threshold,
            "threshold": self.threshold,
            "pair_count": self.pair_count,
            "duplicates": [list(p) for p in self.duplicate_pairs],
        }


def _hist_bin(pct: float) -> int:
    return min(int(pct), HIST_BINS - 1)


def _audit_chunk(pair_indices, codes_a, codes_b, matrix, gap_open, gap_extend, threshold):
    """Reduce one chunk of pairs into mergeable partial sums."""
    hist = np.zeros(HIST_BINS, dtype=np.int64)
    total = 0.0
    above = 0
    for ia, ib in pair_indices:
        _, ops = _KERNEL.align_pair(codes_a[ia], codes_b[ib], matrix, gap_open, gap_extend)
        ca = codes_a[ia]
        cb = codes_b[ib]
        i = j = matches = 0
        for op in ops:
            if op == 0:
                if ca[i] == cb[j]:
                    matches += 1
                i += 1
                j += 1
            elif op == 1:
                i += 1
            else:
                j += 1
        pct = 100.0 * matches / len(ops)
        total += pct
        if pct > threshold:
            above += 1
        hist[_hist_bin(pct)] += 1
    return total, above, hist


def pairwise_audit(
    set_a: list[ProteinSequence],
    set_b: Optional[list[ProteinSequence]] = None,
    scheme: Optional[ScoringScheme] = None,
    threshold: float = 25.0,
    jobs: int = 1,
) -> AuditReport:
    """Align every pair and aggregate identity statistics.

    Without ``set_b`` all n*(n-1)/2 unordered pairs within ``set_a`` are
    audited; otherwise all cross pairs.  Accumulation is commutative, so
    the report is independent of ``jobs``.
    """
    if scheme is None:
        scheme = load_blosum62()
    if not set_a or (set_b is not None and not set_b):
        raise EmptySequence("audit requires non-empty sequence sets")

    codes_a = [scheme.encode(s.residues) for s in set_a]
    if set_b is None:
        codes_b = codes_a
        pairs = [(i, j) for i in range(len(set_a)) for j in range(i + 1, len(set_a))]
        duplicates = find_exact_duplicates(set_a)
    else:
        codes_b = [scheme.encode(s.residues) for s in set_b]
        pairs = [(i, j) for i in range(len(set_a)) for j in range(len(set_b))]
        duplicates = find_exact_duplicates(set_a, set_b)

    if not pairs:
        return AuditReport(threshold, 0, None, None, duplicate_pairs=duplicates)

    args = (codes_a, codes_b, scheme.matrix, scheme.gap_open, scheme.gap_extend, threshold)
    if jobs <= 1 or len(pairs) < 4 * jobs:
        total, above, hist = _audit_chunk(pairs, *args)
    else:
        chunks = [pairs[k :: 4 * jobs] for k in range(4 * jobs)]
        total = 0.0
        above = 0
        hist = np.zeros(HIST_BINS, dtype=np.int64)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for part_total, part_above, part_hist in pool.map(
                _audit_chunk, chunks, *[[a] * len(chunks) for a in args]
            ):
                total += part_total
                above += part_above
                hist += part_hist

    n_pairs = len(pairs)
    return AuditReport(
        threshold=threshold,
        pair_count=n_pairs,
        mean_identity_pct=total / n_pairs,
        fraction_above_threshold=above / n_pairs,
        histogram=hist,
        duplicate_pairs=duplicates,
    )


def emit_audit(report: AuditReport, path, csv_path=None) -> None:
    """Write the JSON report plus the histogram CSV (bin_low,bin_high,count)."""
    path = Path(path)
    if csv_path is None:
        csv_path = path.with_suffix(".histogram.csv")
    atomic_write_text(path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    rows = ["bin_low,bin_high,count"]
    rows += [f"{i},{i + 1},{int(count)}" for i, count in enumerate(report.histogram)]
    atomic_write_text(csv_path, "\n".join(rows) + "\n")


def read_audit(path, csv_path=None) -> AuditReport:
    """Reconstruct an ``AuditReport`` from ``emit_audit`` output."""
    path = Path(path)
    if csv_path is None:
        csv_path = path.with_suffix(".histogram.csv")
    data = json.loads(path.read_text())
    hist = np.zeros(HIST_BINS, dtype=np.int64)
    with open(csv_path, newline="") as fh:
        for row in list(csv.reader(fh))[1:]:
            hist[int(row[0])] = int(row[2])
    return AuditReport(
        threshold=data["threshold"],
        pair_count=data["pair_count"],
        mean_identity_pct=data["mean_identity_pct"],
        fraction_above_threshold=data["fraction_above_threshold"],
        histogram=hist,
        duplicate_pairs=[tuple(p) for p in data["duplicates"]],
    )
