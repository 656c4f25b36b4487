"""DNA records, FASTA/TSV ingestion, k-mer tokenization and geographic coordinates."""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

ALPHABET = "ACGT"
VALID_BASES = frozenset("ACGTN")
BASE_CODE = {b: i for i, b in enumerate(ALPHABET)}
DEFAULT_K = 3

_HEADER_KV = re.compile(r"(\w+)=(\S+)")


class SequenceError(ValueError):
    """Malformed sequence input (bad alphabet, duplicate id, empty file...)."""


def env_to_sphere(lat_deg: float, lon_deg: float) -> np.ndarray:
    """Map latitude/longitude in degrees onto the unit sphere.

    Returns ``(cos b cos l, cos b sin l, sin b)`` as a float64 3-vector.
    """
    if not -90.0 <= lat_deg <= 90.0:
        raise ValueError(f"latitude {lat_deg} outside [-90, 90]")
    if not -180.0 <= lon_deg <= 180.0:
        raise ValueError(f"longitude {lon_deg} outside [-180, 180]")
    beta = math.radians(lat_deg)
    lam = math.radians(lon_deg)
    return np.array(
        [math.cos(beta) * math.cos(lam), math.cos(beta) * math.sin(lam), math.sin(beta)]
    )


@dataclass(frozen=True)
class EnvCoord:
    lat_deg: float
    lon_deg: float
    sphere: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sphere = env_to_sphere(self.lat_deg, self.lon_deg)
        sphere.setflags(write=False)
        object.__setattr__(self, "sphere", sphere)


@dataclass(frozen=True)
class DnaRecord:
    id: str
    bases: str
    env: EnvCoord | None = None

    def __post_init__(self):
        if not self.bases:
            raise SequenceError(f"record {self.id!r} has an empty sequence")
        bad = next((i for i, b in enumerate(self.bases) if b not in VALID_BASES), None)
        if bad is not None:
            raise SequenceError(
                f"record {self.id!r}: invalid base {self.bases[bad]!r} at position {bad + 1}"
            )

    def __len__(self) -> int:
        return len(self.bases)

    def with_env(self, env: EnvCoord | None) -> DnaRecord:
        return DnaRecord(self.id, self.bases, env)


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray
    k: int

    @property
    def l(self) -> int:
        return len(self.tokens)


def unknown_token(k: int) -> int:
    """Reserved id for any k-mer containing N."""
    return 4**k


def vocab_size(k: int) -> int:
    return 4**k + 1


def _parse_header(header: str) -> tuple[str, dict[str, str]]:
    parts = header.split(None, 1)
    if not parts:
        raise SequenceError("FASTA header without an id")
    meta = dict(_HEADER_KV.findall(parts[1])) if len(parts) > 1 else {}
    return parts[0], meta


def parse_fasta(data: bytes | str | IO) -> list[DnaRecord]:
    """Parse FASTA text into records.

    Headers look like ``>id lat=<float> lon=<float>``; the coordinate tail is
    optional. Lowercase bases are uppercased.
    """
    if hasattr(data, "read"):
        data = data.read()
    if isinstance(data, bytes):
        data = data.decode("ascii")
    entries: list[tuple[str, dict[str, str], list[str]]] = []
    for lineno, raw in enumerate(data.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            ident, meta = _parse_header(line[1:])
            entries.append((ident, meta, []))
        else:
            if not entries:
                raise SequenceError(f"line {lineno}: sequence data before first header")
            entries[-1][2].append(line)
    if not entries:
        raise SequenceError("empty FASTA input")

    records: list[DnaRecord] = []
    seen: set[str] = set()
    for ident, meta, chunks in entries:
        if ident in seen:
            raise SequenceError(f"duplicate record id {ident!r}")
        seen.add(ident)
        bases = "".join(chunks).upper()
        env = None
        if "lat" in meta and "lon" in meta:
            env = EnvCoord(float(meta["lat"]), float(meta["lon"]))
        records.append(DnaRecord(ident, bases, env))
    return records


def read_fasta(path) -> list[DnaRecord]:
    with open(path, "rb") as fh:
        return parse_fasta(fh.read())


def format_fasta(records: Iterable[DnaRecord], width: int = 80) -> str:
    out = io.StringIO()
    for rec in records:
        header = rec.id
        if rec.env is not None:
            header += f" lat={rec.env.lat_deg!r} lon={rec.env.lon_deg!r}"
        out.write(f">{header}\n")
        for i in range(0, len(rec.bases), width):
            out.write(rec.bases[i : i + width] + "\n")
    return out.getvalue()


def parse_metadata_tsv(text: str) -> dict[str, tuple[EnvCoord | None, str]]:
    """Parse the companion ``id lat lon label`` TSV. Empty lat/lon means no env."""
    reader = csv.DictReader(io.StringIO(text), delimiter="\t")
    missing = {"id", "lat", "lon", "label"} - set(reader.fieldnames or ())
    if missing:
        raise SequenceError(f"metadata TSV missing columns: {sorted(missing)}")
    out = {}
    for row in reader:
        env = None
        if row["lat"] and row["lon"]:
            env = EnvCoord(float(row["lat"]), float(row["lon"]))
        out[row["id"]] = (env, row["label"])
    return out


def read_metadata_tsv(path) -> dict[str, tuple[EnvCoord | None, str]]:
    with open(path, encoding="utf-8") as fh:
        return parse_metadata_tsv(fh.read())


def write_metadata_tsv(path, rows: Iterable[tuple[str, EnvCoord | None, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("id\tlat\tlon\tlabel\n")
        for ident, env, label in rows:
            lat = "" if env is None else repr(env.lat_deg)
            lon = "" if env is None else repr(env.lon_deg)
            fh.write(f"{ident}\t{lat}\t{lon}\t{label}\n")


def apply_metadata(records: list[DnaRecord], meta: dict) -> list[DnaRecord]:
    """Overlay TSV coordinates onto records; the TSV wins on conflict."""
    out = []
    for rec in records:
        if rec.id in meta and meta[rec.id][0] is not None:
            rec = rec.with_env(meta[rec.id][0])
        out.append(rec)
    return out


def base_codes(bases: str) -> np.ndarray:
    """Integer codes A=0 C=1 G=2 T=3, N=4."""
    lut = np.full(256, 4, dtype=np.int64)
    for b, i in BASE_CODE.items():
        lut[ord(b)] = i
    return lut[np.frombuffer(bases.encode("ascii"), dtype=np.uint8)]


def tokenize_kmer(record: DnaRecord | str, k: int = DEFAULT_K) -> TokenSequence:
    """Overlapping stride-1 k-mer tokens, base-4 encoded; N-containing windows map to ``4**k``."""
    bases = record if isinstance(record, str) else record.bases
    if k < 1:
        raise ValueError("k must be positive")
    if len(bases) < k:
        raise SequenceError(f"sequence of length {len(bases)} shorter than k={k}")
    codes = base_codes(bases)
    l = len(bases) - k + 1
    windows = np.lib.stride_tricks.sliding_window_view(codes, k)
    weights = 4 ** np.arange(k - 1, -1, -1, dtype=np.int64)
    tokens = (np.where(windows == 4, 0, windows) * weights).sum(axis=1)
    tokens[(windows == 4).any(axis=1)] = unknown_token(k)
    assert len(tokens) == l
    return TokenSequence(tokens.astype(np.int64), k)


def decode_token(token: int, k: int) -> str:
    if token == unknown_token(k):
        return "N" * k
    chars = []
    for _ in range(k):
        chars.append(ALPHABET[token % 4])
        token //= 4
    return "".join(reversed(chars))


def detokenize(seq: TokenSequence) -> str:
    """Overlap-merge tokens back into bases (exact for N-free input)."""
    toks = [decode_token(int(t), seq.k) for t in seq.tokens]
    return toks[0] + "".join(t[-1] for t in toks[1:])
