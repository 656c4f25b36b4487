"""Procedural genotype -> phenotype world with a known ground truth.

Four attributes (body hue, body size, wing shape, surface pattern) are each
written as a 6-base motif at a fixed locus of a 120-base genome. Rendering is
deterministic given the attributes and the latitude, which shifts overall
brightness.
"""

from __future__ import annotations

import colorsys
import functools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .genome import ALPHABET, DnaRecord, EnvCoord, format_fasta, read_fasta, read_metadata_tsv, \
    apply_metadata, write_metadata_tsv

ATTRIBUTE_SIZES = {"body_hue": 8, "body_size": 4, "wing_shape": 4, "pattern": 4}
N_COMBOS = math.prod(ATTRIBUTE_SIZES.values())
N_UNSEEN = 64
IMAGE_SIZE = 16

BACKGROUND = -0.6
WING_COLOR = np.array([0.55, 0.55, 0.45])
BODY_SIZES = [(3.5, 2.0), (4.5, 2.5), (5.5, 3.0), (6.5, 3.5)]  # (row radius, column radius)


@dataclass(frozen=True, order=True)
class AttributeVector:
    body_hue: int
    body_size: int
    wing_shape: int
    pattern: int

    def __post_init__(self):
        for name, size in ATTRIBUTE_SIZES.items():
            if not 0 <= getattr(self, name) < size:
                raise ValueError(f"{name}={getattr(self, name)} outside 0..{size - 1}")

    @property
    def combo_id(self) -> int:
        return ((self.body_hue * 4 + self.body_size) * 4 + self.wing_shape) * 4 + self.pattern

    @classmethod
    def from_combo(cls, combo: int) -> AttributeVector:
        if not 0 <= combo < N_COMBOS:
            raise ValueError(f"combo id {combo} outside 0..{N_COMBOS - 1}")
        pattern, combo = combo % 4, combo // 4
        wing, combo = combo % 4, combo // 4
        size, hue = combo % 4, combo // 4
        return cls(hue, size, wing, pattern)

    def values(self) -> tuple[int, ...]:
        return (self.body_hue, self.body_size, self.wing_shape, self.pattern)


def all_attributes() -> list[AttributeVector]:
    return [AttributeVector.from_combo(c) for c in range(N_COMBOS)]


@dataclass(frozen=True)
class SyntheticSpec:
    genome_length: int = 120
    loci: tuple[int, ...] = (10, 40, 70, 100)
    motif_len: int = 6
    neutral_mutation_rate: float = 0.02
    env_effect: float = 0.15
    corpus_per_family: int = 3
    motif_seed: int = 1729

    def __post_init__(self):
        spans = sorted((p, p + self.motif_len) for p in self.loci)
        if len(spans) != len(ATTRIBUTE_SIZES):
            raise ValueError("need one locus per attribute")
        if spans[0][0] < 0 or spans[-1][1] > self.genome_length:
            raise ValueError("motif locus outside the genome")
        if any(a[1] > b[0] for a, b in zip(spans, spans[1:])):
            raise ValueError("motif loci overlap")
        if not 0 <= self.neutral_mutation_rate <= 1:
            raise ValueError("mutation rate must be a probability")

    @property
    def neutral_positions(self) -> np.ndarray:
        mask = np.ones(self.genome_length, dtype=bool)
        for p in self.loci:
            mask[p : p + self.motif_len] = False
        return np.flatnonzero(mask)


@functools.lru_cache(maxsize=None)
def motif_tables(motif_len: int = 6, seed: int = 1729) -> tuple[tuple[str, ...], ...]:
    """Per-attribute motif lists; motifs within a table are >= 3 mismatches apart."""
    rng = np.random.default_rng(seed)
    tables = []
    for size in ATTRIBUTE_SIZES.values():
        chosen: list[str] = []
        while len(chosen) < size:
            cand = "".join(rng.choice(list(ALPHABET), motif_len))
            if all(sum(a != b for a, b in zip(cand, c)) >= 3 for c in chosen):
                chosen.append(cand)
        tables.append(tuple(chosen))
    return tuple(tables)


def _random_bases(rng: np.random.Generator, n: int) -> str:
    return "".join(np.array(list(ALPHABET))[rng.integers(0, 4, n)])


def gen_genome(attrs: AttributeVector, rng: np.random.Generator, spec: SyntheticSpec = SyntheticSpec(),
               id: str = "g", env: EnvCoord | None = None) -> DnaRecord:
    """Random background with the attribute motifs written at their loci."""
    bases = list(_random_bases(rng, spec.genome_length))
    for locus, table, value in zip(spec.loci, motif_tables(spec.motif_len, spec.motif_seed), attrs.values()):
        bases[locus : locus + spec.motif_len] = table[value]
    return DnaRecord(id, "".join(bases), env)


def decode_genome(bases: str, spec: SyntheticSpec = SyntheticSpec()) -> AttributeVector:
    """Nearest motif (Hamming) at each locus."""
    values = []
    for locus, table in zip(spec.loci, motif_tables(spec.motif_len, spec.motif_seed)):
        word = bases[locus : locus + spec.motif_len]
        values.append(min(range(len(table)), key=lambda i: sum(a != b for a, b in zip(word, table[i]))))
    return AttributeVector(*values)


def _mutate(bases: str, positions: np.ndarray, rate: float, rng: np.random.Generator) -> str:
    out = np.array(list(bases))
    hit = positions[rng.random(len(positions)) < rate]
    for p in hit:
        out[p] = ALPHABET[(ALPHABET.index(out[p]) + rng.integers(1, 4)) % 4]
    return "".join(out)


def jitter_env(env: EnvCoord, rng: np.random.Generator, degrees: float = 5.0) -> EnvCoord:
    lat = float(np.clip(env.lat_deg + rng.uniform(-degrees, degrees), -90.0, 90.0))
    lon = env.lon_deg + rng.uniform(-degrees, degrees)
    lon = float((lon + 180.0) % 360.0 - 180.0)
    return EnvCoord(lat, lon)


def make_homologs(record: DnaRecord, count: int, rng: np.random.Generator,
                  spec: SyntheticSpec = SyntheticSpec(), rate: float | None = None,
                  prefix: str | None = None) -> list[DnaRecord]:
    """Point-mutated copies (neutral positions only) with environments jittered by <= 5 degrees."""
    if count < 0:
        raise ValueError("count must be >= 0")
    rate = spec.neutral_mutation_rate if rate is None else rate
    prefix = prefix or f"{record.id}_h"
    out = []
    for i in range(count):
        bases = _mutate(record.bases, spec.neutral_positions, rate, rng)
        env = jitter_env(record.env, rng) if record.env is not None else None
        out.append(DnaRecord(f"{prefix}{i}", bases, env))
    return out


def mutate_query(record: DnaRecord, rate: float, rng: np.random.Generator) -> DnaRecord:
    """Uniform point mutations over every position, motif loci included."""
    return DnaRecord(record.id, _mutate(record.bases, np.arange(len(record.bases)), rate, rng), record.env)


# --- rendering --------------------------------------------------------------

_rr, _cc = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]


def hue_color(hue: int) -> np.ndarray:
    rgb = np.array(colorsys.hsv_to_rgb(hue / 8, 0.75, 0.9))
    return 1.6 * rgb - 0.8


def body_mask(size: int) -> np.ndarray:
    ry, rx = BODY_SIZES[size]
    return ((_rr - 7.5) / ry) ** 2 + ((_cc - 7.5) / rx) ** 2 <= 1.0


def wing_mask(shape: int) -> np.ndarray:
    r, c = _rr, np.minimum(_cc, IMAGE_SIZE - 1 - _cc)  # mirror the left half onto the right
    if shape == 0:
        left = (r >= 5) & (r <= 10) & (c >= 1)
    elif shape == 1:
        left = (r >= 2) & (r <= 6) & (c >= 3 - (r - 2) * 3 // 4)
    elif shape == 2:
        left = (r >= 9) & (r <= 13) & (c >= 3 - (13 - r) * 3 // 4)
    elif shape == 3:
        left = (r >= 7) & (r <= 8)
    else:
        raise ValueError(f"wing shape {shape}")
    return left & (c <= 3)


def pattern_mask(pattern: int) -> np.ndarray:
    if pattern == 0:
        return np.zeros_like(_rr, dtype=bool)
    if pattern == 1:
        return _rr % 2 == 0
    if pattern == 2:
        return (_rr % 3 == 0) & (_cc % 3 == 0)
    if pattern == 3:
        return _rr <= 5
    raise ValueError(f"pattern {pattern}")


def render_phenotype(attrs: AttributeVector, env: EnvCoord | None, spec: SyntheticSpec = SyntheticSpec()) -> np.ndarray:
    """(3, 16, 16) float64 image in [-1, 1]."""
    img = np.full((3, IMAGE_SIZE, IMAGE_SIZE), BACKGROUND)
    wings = wing_mask(attrs.wing_shape)
    img[:, wings] = WING_COLOR[:, None]
    body = body_mask(attrs.body_size)
    color = hue_color(attrs.body_hue)
    img[:, body] = color[:, None]
    dark = body & pattern_mask(attrs.pattern)
    img[:, dark] = (0.5 * (color + BACKGROUND))[:, None]
    if env is not None:
        img = img + spec.env_effect * math.sin(math.radians(env.lat_deg))
    return img


@functools.lru_cache(maxsize=4)
def _templates(spec: SyntheticSpec) -> np.ndarray:
    return np.stack([render_phenotype(a, None, spec) for a in all_attributes()])


def estimate_brightness_shift(img: np.ndarray) -> float:
    corners = img[:, [0, 0, -1, -1], [0, -1, 0, -1]]
    return float(corners.mean() - BACKGROUND)


def decode_image(img: np.ndarray, spec: SyntheticSpec = SyntheticSpec()) -> AttributeVector:
    """Recover attributes from pixels: remove the background shift, then nearest template."""
    img = np.asarray(img, dtype=np.float64)
    centered = img - estimate_brightness_shift(img)
    dist = ((_templates(spec) - centered) ** 2).sum(axis=(1, 2, 3))
    return AttributeVector.from_combo(int(np.argmin(dist)))


# --- dataset ----------------------------------------------------------------


@dataclass
class Specimen:
    record: DnaRecord
    attrs: AttributeVector
    image: np.ndarray

    @property
    def id(self) -> str:
        return self.record.id


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    seed: int
    n_per_combo: int
    specimens: list[Specimen]
    corpus: list[DnaRecord]
    splits: dict[str, list[str]]
    unseen_combos: list[int] = field(default_factory=list)

    def by_id(self) -> dict[str, Specimen]:
        return {s.id: s for s in self.specimens}

    def split(self, name: str) -> list[Specimen]:
        lookup = self.by_id()
        return [lookup[i] for i in self.splits[name]]


def choose_unseen(rng: np.random.Generator, n_unseen: int = N_UNSEEN) -> list[int]:
    """Hold out whole attribute combinations while every single value stays in training."""
    while True:
        unseen = sorted(int(c) for c in rng.choice(N_COMBOS, n_unseen, replace=False))
        seen = set(range(N_COMBOS)) - set(unseen)
        covered = [
            {AttributeVector.from_combo(c).values()[i] for c in seen} for i in range(len(ATTRIBUTE_SIZES))
        ]
        if all(len(cov) == size for cov, size in zip(covered, ATTRIBUTE_SIZES.values())):
            return unseen


def make_dataset(n_per_combo: int, spec: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> SyntheticDataset:
    """Specimens for all 512 combinations, a homolog corpus and train/val/unseen splits.

    Seen combinations are split 90/10 within each combination.
    """
    if n_per_combo < 1:
        raise ValueError("n_per_combo must be >= 1")
    root = np.random.SeedSequence(seed)
    split_seq, *family_seqs = root.spawn(N_COMBOS + 1)
    unseen = choose_unseen(np.random.default_rng(split_seq))
    unseen_set = set(unseen)
    specimens, corpus = [], []
    splits: dict[str, list[str]] = {"train": [], "val": [], "unseen": []}
    n_train = max(1, min(n_per_combo - 1, round(0.9 * n_per_combo)))
    for combo, fseq in enumerate(family_seqs):
        rng = np.random.default_rng(fseq)
        attrs = AttributeVector.from_combo(combo)
        home = EnvCoord(float(rng.uniform(-60, 60)), float(rng.uniform(-180, 180)))
        species = gen_genome(attrs, rng, spec, id=f"sp{combo:03d}", env=home)
        members = make_homologs(species, n_per_combo, rng, spec, prefix=f"s{combo:03d}_")
        corpus.extend(make_homologs(species, spec.corpus_per_family, rng, spec, prefix=f"r{combo:03d}_"))
        for rec in members:
            specimens.append(Specimen(rec, attrs, render_phenotype(attrs, rec.env, spec)))
        ids = [r.id for r in members]
        if combo in unseen_set:
            splits["unseen"].extend(ids)
        else:
            order = rng.permutation(len(ids))
            splits["train"].extend(ids[i] for i in sorted(order[:n_train]))
            splits["val"].extend(ids[i] for i in sorted(order[n_train:]))
    return SyntheticDataset(spec, seed, n_per_combo, specimens, corpus, splits, unseen)


# --- files ------------------------------------------------------------------


def image_to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8 via the linear map [-1, 1] -> [0, 255]."""
    scaled = np.rint((np.clip(img, -1, 1) + 1) * 127.5)
    return scaled.astype(np.uint8).transpose(1, 2, 0)


def uint8_to_image(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0


def save_png(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(image_to_uint8(img), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return uint8_to_image(np.asarray(im.convert("RGB")))


def write_dataset(ds: SyntheticDataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "genomes.fasta").write_text(format_fasta(s.record for s in ds.specimens))
    (out / "corpus.fasta").write_text(format_fasta(ds.corpus))
    rows = [(s.id, s.record.env, str(s.attrs.combo_id)) for s in ds.specimens]
    rows += [(r.id, r.env, r.id[1:4]) for r in ds.corpus]
    write_metadata_tsv(out / "metadata.tsv", rows)
    for s in ds.specimens:
        save_png(out / "images" / f"{s.id}.png", s.image)
    manifest = {
        "format": "genodiff-synthetic/1",
        "seed": ds.seed,
        "n_per_combo": ds.n_per_combo,
        "spec": asdict(ds.spec),
        "unseen_combos": ds.unseen_combos,
        "splits": ds.splits,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_dataset(data_dir) -> SyntheticDataset:
    """Read a directory produced by :func:`write_dataset`; images come from the PNGs."""
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    spec_fields = dict(manifest["spec"])
    spec_fields["loci"] = tuple(spec_fields["loci"])
    spec = SyntheticSpec(**spec_fields)
    meta = read_metadata_tsv(d / "metadata.tsv")
    genomes = apply_metadata(read_fasta(d / "genomes.fasta"), meta)
    corpus = apply_metadata(read_fasta(d / "corpus.fasta"), meta)
    specimens = [
        Specimen(rec, AttributeVector.from_combo(int(meta[rec.id][1])), load_png(d / "images" / f"{rec.id}.png"))
        for rec in genomes
    ]
    return SyntheticDataset(spec, manifest["seed"], manifest["n_per_combo"], specimens, corpus,
                            manifest["splits"], manifest["unseen_combos"])
