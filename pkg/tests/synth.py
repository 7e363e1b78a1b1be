"""Synthetic datasets and PBEM fixtures shared by the test suite."""

from __future__ import annotations

import numpy as np

from rescap.featurize import (
    EMBED_DIM,
    EmbeddingStore,
    FeatureKind,
    FeatureMatrix,
    StoreKind,
    write_embedding_store,
)
from rescap.seqio import ALPHABET, ProteinSequence

def informative_coords(dim: int) -> tuple[int, int, int]:
    """Three well-separated coordinates carrying the class signal."""
    return (dim // 8, dim // 3, (2 * dim) // 3)


def separable_global_features(
    n: int = 200, seed: int = 0, margin: float = 2.0, dim: int = EMBED_DIM
) -> tuple[list[FeatureMatrix], list[int]]:
    """Linearly separable global-embedding-shaped inputs.

    The class is the sign of the sum of three coordinates; every sample has
    at least ``margin`` of slack, so a linear scorer reaches perfect
    accuracy.  Values are float32-granular like real stores.
    """
    rng = np.random.default_rng(seed)
    labels = np.array([1] * (n // 2) + [0] * (n - n // 2))
    rng.shuffle(labels)
    x = rng.normal(size=(n, dim))
    signs = 2.0 * labels - 1.0
    coords = informative_coords(dim)
    for coord in coords:
        x[:, coord] = signs * (margin + np.abs(rng.normal(size=n))) / len(coords)
    x = x.astype(np.float32).astype(np.float64)
    feats = [
        FeatureMatrix(FeatureKind.GLOBAL, x[i].reshape(1, dim), f"syn{i:04d}") for i in range(n)
    ]
    return feats, labels.tolist()


def random_sequences(n: int, seed: int = 0, min_len: int = 8, max_len: int = 40) -> list[ProteinSequence]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        residues = "".join(rng.choice(list(ALPHABET), size=length))
        out.append(ProteinSequence(f"s{i:04d}", residues))
    return out


def global_store_for(ids, seed: int = 0, dim: int = EMBED_DIM, arrays=None) -> EmbeddingStore:
    rng = np.random.default_rng(seed)
    records = {}
    for i, seq_id in enumerate(ids):
        vec = arrays[i] if arrays is not None else rng.normal(size=dim)
        records[seq_id] = np.asarray(vec, dtype=np.float32).astype(np.float64).reshape(dim)
    return EmbeddingStore(StoreKind.GLOBAL, dim, records)


def local_store_for(sequences, seed: int = 0, dim: int = EMBED_DIM) -> EmbeddingStore:
    rng = np.random.default_rng(seed)
    records = {}
    for seq in sequences:
        mat = rng.normal(size=(len(seq.residues), dim)).astype(np.float32).astype(np.float64)
        records[seq.id] = mat
    return EmbeddingStore(StoreKind.LOCAL, dim, records)


def write_dataset(
    tmp_path,
    n_train: int = 12,
    n_test: int = 6,
    seed: int = 0,
    signal: bool = True,
    dim: int = EMBED_DIM,
):
    """FASTA + manifest + global/local PBEM stores under ``tmp_path``.

    Returns a dict of paths plus the label list.  With ``signal`` the global
    embeddings are separable; otherwise pure noise.
    """
    from rescap.seqio import write_fasta

    n = n_train + n_test
    seqs = random_sequences(n, seed=seed)
    rng = np.random.default_rng(seed + 1)
    labels = np.array([1] * (n // 2) + [0] * (n - n // 2))
    rng.shuffle(labels)

    if signal:
        feats, lab = separable_global_features(n, seed=seed + 2, dim=dim)
        labels = np.array(lab)
        g_store = global_store_for(
            [s.id for s in seqs], dim=dim, arrays=[f.data.reshape(-1) for f in feats]
        )
    else:
        g_store = global_store_for([s.id for s in seqs], seed=seed + 3, dim=dim)
    l_store = local_store_for(seqs, seed=seed + 4, dim=dim)

    fasta = tmp_path / "data.fasta"
    write_fasta(seqs, fasta)
    manifest = tmp_path / "manifest.tsv"
    rows = ["id\tlabel\tsplit"]
    for i, seq in enumerate(seqs):
        split = "train" if i < n_train else "test"
        rows.append(f"{seq.id}\t{labels[i]}\t{split}")
    manifest.write_text("\n".join(rows) + "\n")

    g_path = tmp_path / "global.pbem"
    l_path = tmp_path / "local.pbem"
    write_embedding_store(g_store, g_path)
    write_embedding_store(l_store, l_path)
    return {
        "fasta": fasta,
        "manifest": manifest,
        "global": g_path,
        "local": l_path,
        "labels": labels.tolist(),
        "sequences": seqs,
    }
