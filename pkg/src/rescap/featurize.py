"""Model input construction: one-hot matrices and embedding stores.

Embedding stores use the PBEM binary format (little-endian):

    magic "PBEM" | version u8 = 1 | kind u8 (0 global, 1 local)
    | dim u32 | count u32
    then per record:
    id_len u16 | id utf-8 bytes
    | global: dim float32
    | local:  seq_len u32, then seq_len * dim float32 row-major

The header is exactly 14 bytes.  Values are stored as float32 (the upstream
embedding precision) and widened to float64 in memory, so a write/read
round trip is bit-exact at 32-bit granularity.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from rescap.errors import (
    BadMagic,
    DimMismatch,
    KindMismatch,
    MissingFeature,
    NonFiniteValue,
    TruncatedFile,
)
from rescap.seqio import ALPHABET_INDEX, DatasetManifest, ProteinSequence

L_MAX = 1000
EMBED_DIM = 512
PBEM_MAGIC = b"PBEM"
PBEM_VERSION = 1
PBEM_HEADER = struct.Struct("<4sBBII")  # 14 bytes


class FeatureKind(str, Enum):
    ONEHOT = "onehot"
    LOCAL = "local"
    GLOBAL = "global"


class StoreKind(int, Enum):
    GLOBAL = 0
    LOCAL = 1


@dataclass(frozen=True)
class FeatureMatrix:
    """A 2-D float64 model input plus its provenance."""

    kind: FeatureKind
    data: np.ndarray
    source_id: str

    def __post_init__(self):
        if self.data.ndim != 2:
            raise KindMismatch(f"feature for '{self.source_id}' must be 2-D")


def onehot_encode(
    seq: ProteinSequence, l_max: int = L_MAX, warn_empty: bool = True
) -> FeatureMatrix:
    """Encode residues as an ``l_max`` x 20 indicator matrix.

    Rows follow the fixed alphabet order; sequences longer than ``l_max``
    are truncated, shorter ones are zero-padded.  The ambiguity letter 'X'
    (from mapped non-canonical residues) encodes as an all-zero row.
    """
    mat = np.zeros((l_max, 20), dtype=np.float64)
    n_rows = 0
    for pos, ch in enumerate(seq.residues[:l_max]):
        col = ALPHABET_INDEX.get(ch)
        if col is not None:
            mat[pos, col] = 1.0
            n_rows += 1
    if n_rows == 0 and warn_empty:
        warnings.warn(
            f"sequence '{seq.id}' one-hot encodes to an all-zero matrix",
            stacklevel=2,
        )
    return FeatureMatrix(FeatureKind.ONEHOT, mat, seq.id)


@dataclass
class EmbeddingStore:
    """Immutable-after-load map of sequence id to embedding array.

    Global stores hold one ``(dim,)`` vector per id; local stores hold an
    ``(L, dim)`` matrix per id.
    """

    kind: StoreKind
    dim: int
    records: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self) -> None:
        if self.dim <= 0:
            raise DimMismatch(f"embedding dim must be positive, got {self.dim}")
        for seq_id, arr in self.records.items():
            if self.kind == StoreKind.GLOBAL:
                if arr.shape != (self.dim,):
                    raise DimMismatch(
                        f"record '{seq_id}': expected shape ({self.dim},), got {arr.shape}"
                    )
            else:
                if arr.ndim != 2 or arr.shape[1] != self.dim:
                    raise DimMismatch(
                        f"record '{seq_id}': expected (L, {self.dim}), got {arr.shape}"
                    )
            if not np.isfinite(arr).all():
                raise NonFiniteValue(f"record '{seq_id}' contains non-finite values")

    def __len__(self) -> int:
        return len(self.records)


def write_embedding_store(store: EmbeddingStore, path) -> None:
    """Serialize a store in the PBEM format (validates invariants first)."""
    store.validate()
    with open(path, "wb") as fh:
        fh.write(
            PBEM_HEADER.pack(
                PBEM_MAGIC, PBEM_VERSION, int(store.kind), store.dim, len(store.records)
            )
        )
        for seq_id, arr in store.records.items():
            ident = seq_id.encode("utf-8")
            if len(ident) > 0xFFFF:
                raise DimMismatch(f"id '{seq_id[:32]}...' too long for the format")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            data32 = np.ascontiguousarray(arr, dtype="<f4")
            if store.kind == StoreKind.LOCAL:
                fh.write(struct.pack("<I", arr.shape[0]))
            fh.write(data32.tobytes())


def read_embedding_store(path) -> EmbeddingStore:
    """Parse a PBEM file, checking magic, dimensions and finiteness."""
    blob = open(path, "rb").read()
    if len(blob) < PBEM_HEADER.size:
        raise TruncatedFile(f"{path}: shorter than the {PBEM_HEADER.size}-byte header")
    magic, version, kind_b, dim, count = PBEM_HEADER.unpack_from(blob, 0)
    if magic != PBEM_MAGIC:
        raise BadMagic(f"{path}: magic {magic!r}, expected {PBEM_MAGIC!r}")
    if version != PBEM_VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    if kind_b not in (0, 1):
        raise BadMagic(f"{path}: unknown store kind byte {kind_b}")
    kind = StoreKind(kind_b)
    off = PBEM_HEADER.size
    records: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise TruncatedFile(f"{path}: record data ends prematurely")
        chunk = blob[off : off + n]
        off += n
        return chunk

    for _ in range(count):
        (id_len,) = struct.unpack("<H", take(2))
        seq_id = take(id_len).decode("utf-8")
        if seq_id in records:
            raise DimMismatch(f"{path}: duplicate record id '{seq_id}'")
        if kind == StoreKind.GLOBAL:
            raw = take(4 * dim)
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        else:
            (seq_len,) = struct.unpack("<I", take(4))
            raw = take(4 * dim * seq_len)
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(seq_len, dim)
        if not np.isfinite(arr).all():
            raise NonFiniteValue(f"{path}: record '{seq_id}' contains non-finite values")
        records[seq_id] = arr
    if off != len(blob):
        raise TruncatedFile(f"{path}: {len(blob) - off} trailing bytes after last record")
    return EmbeddingStore(kind=kind, dim=dim, records=records)


def global_feature(store: EmbeddingStore, seq_id: str) -> FeatureMatrix:
    if store.kind != StoreKind.GLOBAL:
        raise KindMismatch("store does not hold global embeddings")
    arr = store.records.get(seq_id)
    if arr is None:
        raise MissingFeature(seq_id)
    return FeatureMatrix(FeatureKind.GLOBAL, arr.reshape(1, store.dim), seq_id)


def local_feature(store: EmbeddingStore, seq_id: str, l_max: int = L_MAX) -> FeatureMatrix:
    """Per-residue embedding matrix, truncated to ``l_max`` rows."""
    if store.kind != StoreKind.LOCAL:
        raise KindMismatch("store does not hold local embeddings")
    arr = store.records.get(seq_id)
    if arr is None:
        raise MissingFeature(seq_id)
    return FeatureMatrix(FeatureKind.LOCAL, arr[:l_max], seq_id)


def batch_features(
    manifest: DatasetManifest,
    kind: FeatureKind,
    split: str,
    store: Optional[EmbeddingStore] = None,
    l_max: int = L_MAX,
) -> list[tuple[FeatureMatrix, int]]:
    """Features plus labels for one split, in manifest order.

    One-hot features come from the manifest's resolved sequences; embedding
    kinds require the matching store.
    """
    out: list[tuple[FeatureMatrix, int]] = []
    for entry in manifest.split_entries(split):
        if kind == FeatureKind.ONEHOT:
            seq = manifest.sequences.get(entry.id)
            if seq is None:
                raise MissingFeature(entry.id)
            feat = onehot_encode(seq, l_max=l_max)
        elif kind == FeatureKind.GLOBAL:
            if store is None:
                raise MissingFeature(entry.id)
            feat = global_feature(store, entry.id)
        else:
            if store is None:
                raise MissingFeature(entry.id)
            feat = local_feature(store, entry.id, l_max=l_max)
        out.append((feat, entry.label))
    return out
