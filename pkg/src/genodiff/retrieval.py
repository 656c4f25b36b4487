"""Homolog retrieval over an exact k-mer inverted index, plus MSA block assembly.

Similarity is Jaccard over distinct k-mer sets. The inverted index is only a
prefilter: records sharing no k-mer with the query score exactly 0.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .genome import DEFAULT_K, DnaRecord, EnvCoord, SequenceError, base_codes, tokenize_kmer

log = logging.getLogger(__name__)

DEFAULT_K_INDEX = 8


def kmer_ids(bases: str, k: int) -> np.ndarray:
    """Sorted distinct base-4 k-mer ids; windows touching N are skipped."""
    if len(bases) < k:
        raise SequenceError(f"sequence of length {len(bases)} cannot form a {k}-mer")
    codes = base_codes(bases)
    windows = np.lib.stride_tricks.sliding_window_view(codes, k)
    windows = windows[(windows < 4).all(axis=1)]
    weights = 4 ** np.arange(k - 1, -1, -1, dtype=np.int64)
    return np.unique(windows @ weights)


def _kmer_sets_chunk(args):
    seqs, k = args
    return [kmer_ids(s, k) for s in seqs]


@dataclass
class KmerIndex:
    k_index: int
    corpus: list[DnaRecord]          # sorted by id; position doubles as posting id
    kmer_sets: list[np.ndarray]
    postings: dict[int, np.ndarray]

    def __post_init__(self):
        self.set_sizes = np.array([len(s) for s in self.kmer_sets], dtype=np.int64)
        self.position = {rec.id: i for i, rec in enumerate(self.corpus)}

    def __len__(self) -> int:
        return len(self.corpus)

    def kmers_of(self, record: DnaRecord) -> np.ndarray:
        i = self.position.get(record.id)
        if i is not None and self.corpus[i].bases == record.bases:
            return self.kmer_sets[i]
        return kmer_ids(record.bases, self.k_index)

    def posting_ids(self, kmer: int) -> list[str]:
        return [self.corpus[i].id for i in self.postings.get(int(kmer), ())]


def build_index(corpus: list[DnaRecord], k_index: int = DEFAULT_K_INDEX, workers: int = 1) -> KmerIndex:
    """Index the distinct k-mers of every corpus record.

    Record sets may be computed across ``workers`` processes; the merge walks
    records in id order so the result does not depend on the partitioning.
    """
    if not corpus:
        raise ValueError("cannot index an empty corpus")
    if k_index < 1:
        raise ValueError("k_index must be positive")
    ordered = sorted(corpus, key=lambda r: r.id)
    for a, b in zip(ordered, ordered[1:]):
        if a.id == b.id:
            raise SequenceError(f"duplicate record id {a.id!r}")
    seqs = [r.bases for r in ordered]
    if workers > 1 and len(seqs) > workers:
        bounds = np.linspace(0, len(seqs), workers + 1).astype(int)
        chunks = [(seqs[a:b], k_index) for a, b in zip(bounds, bounds[1:])]
        with ProcessPoolExecutor(workers) as pool:
            kmer_sets = [s for part in pool.map(_kmer_sets_chunk, chunks) for s in part]
    else:
        kmer_sets = _kmer_sets_chunk((seqs, k_index))

    owners = np.concatenate([np.full(len(s), i, dtype=np.int64) for i, s in enumerate(kmer_sets)])
    kmers = np.concatenate(kmer_sets)
    order = np.lexsort((owners, kmers))
    kmers, owners = kmers[order], owners[order]
    starts = np.flatnonzero(np.r_[True, kmers[1:] != kmers[:-1]])
    postings = {
        int(kmers[s]): owners[s:e]
        for s, e in zip(starts, np.r_[starts[1:], len(kmers)])
    }
    log.debug("indexed %d records, %d distinct %d-mers", len(ordered), len(postings), k_index)
    return KmerIndex(k_index, ordered, kmer_sets, postings)


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    inter = len(np.intersect1d(a, b, assume_unique=True))
    union = len(a) + len(b) - inter
    return inter / union if union else 0.0


def similarity(a: DnaRecord, b: DnaRecord, index: KmerIndex) -> float:
    """Jaccard similarity of the two records' distinct k-mer sets at the index width."""
    return jaccard(index.kmers_of(a), index.kmers_of(b))


@dataclass(frozen=True)
class Hit:
    record: DnaRecord
    score: float
    padded: bool = False


def retrieve_top_m(index: KmerIndex, query: DnaRecord, m: int, min_score: float = 0.0) -> list[Hit]:
    """Top-``m`` corpus records by Jaccard, descending, ties by ascending id.

    The query's own id is excluded. Records scoring ``<= min_score`` only fill
    the list as padding (flagged) when too few candidates pass.
    """
    if m < 0:
        raise ValueError("m must be non-negative")
    if m == 0:
        return []
    q = index.kmers_of(query)
    n = len(index.corpus)
    inter = np.zeros(n, dtype=np.int64)
    hit_lists = [index.postings[int(k)] for k in q if int(k) in index.postings]
    if hit_lists:
        inter = np.bincount(np.concatenate(hit_lists), minlength=n)
    union = len(q) + index.set_sizes - inter
    scores = np.divide(inter, union, out=np.zeros(n), where=union > 0)
    self_pos = index.position.get(query.id)

    # stable sort by -score keeps ascending-id order (= corpus order) among ties
    order = np.argsort(-scores, kind="stable")
    hits: list[Hit] = []
    for i in order:
        if i == self_pos:
            continue
        s = float(scores[i])
        hits.append(Hit(index.corpus[i], s, padded=not s > min_score))
        if len(hits) == m:
            break
    return hits


def pad_sequences(sequences: list[str]) -> list[str]:
    """Right-pad with N to the longest sequence."""
    width = max(len(s) for s in sequences)
    return [s + "N" * (width - len(s)) for s in sequences]


def base_conservation(sequences: list[str]) -> np.ndarray:
    """Per-base-column flag: every row carries the same non-N base."""
    codes = np.stack([base_codes(s) for s in sequences])
    return (codes == codes[0]).all(axis=0) & (codes[0] < 4)


def conservation_vector(sequences: list[str], k: int = DEFAULT_K) -> np.ndarray:
    """Token-level evolution vector: 1 where all k base columns of the window are conserved."""
    if not sequences:
        raise ValueError("need at least one sequence")
    lengths = {len(s) for s in sequences}
    if len(lengths) != 1:
        raise ValueError(f"unequal sequence lengths {sorted(lengths)}; pad first")
    L = lengths.pop()
    if L < k:
        raise SequenceError(f"sequence length {L} shorter than k={k}")
    cons = base_conservation(sequences)
    windows = np.lib.stride_tricks.sliding_window_view(cons, k)
    return windows.all(axis=1).astype(np.int64)


@dataclass(frozen=True)
class MsaBlock:
    evolution: np.ndarray   # (l,) in {0, 1}
    tokens: np.ndarray      # (m, l) token ids, row 0 = query
    envs: np.ndarray        # (m, 3) unit sphere coordinates
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        m, l = self.tokens.shape
        if self.evolution.shape != (l,):
            raise ValueError(f"evolution vector shape {self.evolution.shape} != ({l},)")
        if self.envs.shape != (m, 3):
            raise ValueError(f"envs shape {self.envs.shape} != ({m}, 3)")

    @property
    def m(self) -> int:
        return self.tokens.shape[0]

    @property
    def l(self) -> int:
        return self.tokens.shape[1]


def assemble_msa_block(
    query: DnaRecord,
    retrieved: list[DnaRecord],
    k: int = DEFAULT_K,
    pad_env: EnvCoord | None = None,
) -> MsaBlock:
    """Stack query (row 0) and retrieved homologs into the conditioner input.

    Homologs without coordinates take ``pad_env`` (default: the query's own).
    """
    if query.env is None:
        raise ValueError(f"query {query.id!r} has no environment coordinates")
    pad_env = pad_env or query.env
    rows = [query, *retrieved]
    seqs = pad_sequences([r.bases for r in rows])
    tokens = np.stack([tokenize_kmer(s, k).tokens for s in seqs])
    envs = np.stack([(r.env or pad_env).sphere for r in rows])
    return MsaBlock(conservation_vector(seqs, k), tokens, envs, tuple(r.id for r in rows))
