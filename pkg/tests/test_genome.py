import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genodiff.genome import (
    DnaRecord,
    EnvCoord,
    SequenceError,
    apply_metadata,
    decode_token,
    detokenize,
    env_to_sphere,
    format_fasta,
    parse_fasta,
    parse_metadata_tsv,
    read_metadata_tsv,
    tokenize_kmer,
    unknown_token,
    vocab_size,
    write_metadata_tsv,
)

dna = st.text(alphabet="ACGT", min_size=8, max_size=80)


def test_parse_two_entries_with_and_without_coordinates():
    recs = parse_fasta(b">s1 lat=0 lon=0\nACGT\n>s2\nGGTA\n")
    assert [r.id for r in recs] == ["s1", "s2"]
    np.testing.assert_allclose(recs[0].env.sphere, [1.0, 0.0, 0.0], atol=1e-15)
    assert recs[1].env is None


def test_lowercase_is_normalized():
    (rec,) = parse_fasta(">a\nacgt\n")
    assert rec.bases == "ACGT"


def test_bad_character_names_id_and_position():
    with pytest.raises(SequenceError, match=r"bad.*3"):
        parse_fasta(">bad\nACXT\n")


def test_multiline_sequences_join():
    (rec,) = parse_fasta(io.StringIO(">a lat=10 lon=20\nAC\nGT\n\n"))
    assert rec.bases == "ACGT"
    assert rec.env.lat_deg == 10 and rec.env.lon_deg == 20


@pytest.mark.parametrize("text", ["", "\n\n", ">dup\nAC\n>dup\nGT\n"])
def test_parse_errors(text):
    with pytest.raises(SequenceError):
        parse_fasta(text)


def test_fasta_round_trip():
    recs = [DnaRecord("x", "ACGTN" * 30, EnvCoord(12.5, -40.25)), DnaRecord("y", "TTTT")]
    again = parse_fasta(format_fasta(recs))
    assert again == recs


def test_overlapping_three_mer_example():
    seq = tokenize_kmer("ACCTC", 3)
    assert [decode_token(t, 3) for t in seq.tokens] == ["ACC", "CCT", "CTC"]
    assert seq.l == 3


def test_k1_is_identity():
    seq = tokenize_kmer("GATTACA", 1)
    assert seq.tokens.tolist() == [2, 0, 3, 3, 0, 1, 0]


def test_n_maps_to_unknown():
    seq = tokenize_kmer("ACNT", 2)
    assert seq.tokens.tolist() == [1, unknown_token(2), unknown_token(2)]
    assert vocab_size(2) == 17


def test_too_short_for_k():
    with pytest.raises(SequenceError):
        tokenize_kmer("AC", 3)


@settings(max_examples=60, deadline=None)
@given(dna, st.integers(1, 8))
def test_tokenize_round_trip(bases, k):
    seq = tokenize_kmer(bases, k)
    assert seq.l == len(bases) - k + 1
    assert detokenize(seq) == bases
    assert seq.tokens.max() < 4 ** k


def test_sphere_examples():
    np.testing.assert_allclose(env_to_sphere(0, 0), [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(env_to_sphere(90, 17), [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(env_to_sphere(45, 45), [0.5, 0.5, np.sqrt(0.5)], atol=1e-12)


@pytest.mark.parametrize("lat,lon", [(91, 0), (-90.5, 0), (0, 181), (0, -180.01)])
def test_sphere_range(lat, lon):
    with pytest.raises(ValueError):
        env_to_sphere(lat, lon)


@settings(max_examples=100, deadline=None)
@given(st.floats(-90, 90), st.floats(-180, 180))
def test_sphere_unit_and_antipodal(lat, lon):
    v = env_to_sphere(lat, lon)
    assert abs(np.linalg.norm(v) - 1) < 1e-12
    anti_lon = lon - 180 if lon > 0 else lon + 180
    np.testing.assert_allclose(env_to_sphere(-lat, anti_lon), -v, atol=1e-12)


def test_metadata_tsv_wins(tmp_path):
    path = tmp_path / "meta.tsv"
    write_metadata_tsv(path, [("a", EnvCoord(1.0, 2.0), "7"), ("b", None, "")])
    meta = read_metadata_tsv(path)
    assert meta["a"][0] == EnvCoord(1.0, 2.0) and meta["a"][1] == "7"
    recs = apply_metadata([DnaRecord("a", "ACGT", EnvCoord(50, 50)), DnaRecord("b", "ACGT", EnvCoord(3, 4))], meta)
    assert recs[0].env == EnvCoord(1.0, 2.0)
    assert recs[1].env == EnvCoord(3, 4)


def test_metadata_header_required():
    with pytest.raises(ValueError):
        parse_metadata_tsv("a\t1\t2\tx\n")
