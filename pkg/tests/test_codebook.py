import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlhash.codebook import (LITERAL, STANDARD_GV, Codebook, CodebookInfeasible, ConstructionFailed,
                             HashConfig, gv_min_distance, generate_centers, load_codebook,
                             make_codebook, save_codebook, select_distance, verify_codebook)
from mlhash.dataio import TruncatedFile, UnrecognizedFormat


def ball(q, r):
    return sum(comb(q, i) for i in range(r + 1)) if r >= 0 else 0


def brute_literal_d(q, c):
    hits = [d for d in range(1, q + 2) if ball(q, d - 2) < 2 ** c <= ball(q, d - 1)]
    return hits


def max_code_size(q, d):
    """Sphere-packing upper bound on the size of a length-q code with distance d."""
    t = (d - 1) // 2
    return 2 ** q // ball(q, t)


def test_literal_regression_16_10():
    assert ball(16, 3) == 697 and ball(16, 4) == 2517
    assert gv_min_distance(HashConfig(16, 10), LITERAL) == 5


def test_literal_infeasible_when_c_exceeds_q():
    with pytest.raises(CodebookInfeasible):
        gv_min_distance(HashConfig(16, 100), LITERAL)


def test_standard_gv_16_100():
    d = gv_min_distance(HashConfig(16, 100), STANDARD_GV)
    assert d == 4
    assert 100 * ball(16, d - 2) < 2 ** 16 <= 100 * ball(16, d - 1)


def test_select_distance_falls_back():
    assert select_distance(HashConfig(16, 100), LITERAL) == (4, STANDARD_GV)
    assert select_distance(HashConfig(16, 10), LITERAL) == (5, LITERAL)


def test_c_equal_q_is_infeasible_in_literal_mode():
    # the literal inequality would give d = q + 1, which no pair of q-bit codes attains
    assert brute_literal_d(8, 8) == [9]
    with pytest.raises(CodebookInfeasible):
        gv_min_distance(HashConfig(8, 8), LITERAL)


@settings(max_examples=200, deadline=None)
@given(q=st.integers(8, 64), c=st.integers(2, 64))
def test_literal_mode_matches_brute_force(q, c):
    hits = [d for d in brute_literal_d(q, c) if d <= q]
    if not hits:
        with pytest.raises(CodebookInfeasible):
            gv_min_distance(HashConfig(q, c), LITERAL)
    else:
        assert gv_min_distance(HashConfig(q, c), LITERAL) == hits[0]


@settings(max_examples=100, deadline=None)
@given(q=st.integers(8, 128), c=st.integers(2, 200))
def test_standard_gv_is_largest_satisfying_d(q, c):
    d = gv_min_distance(HashConfig(q, c), STANDARD_GV)
    ok = [x for x in range(1, q + 1) if c * ball(q, x - 2) < 2 ** q]
    assert d == max(ok)


def test_antipodal_pair():
    cb = generate_centers(HashConfig(16, 2), 16, seed=0)
    assert np.array_equal(cb.centers[0], -cb.centers[1])
    assert verify_codebook(cb) == 16


def test_seeded_16_10_codebook():
    cb = generate_centers(HashConfig(16, 10), 5, seed=1)
    assert cb.centers.shape == (10, 16)
    assert set(np.unique(cb.centers)) <= {-1, 1}
    assert verify_codebook(cb) >= 5


def test_overfull_code_fails():
    # no binary code of length 8 and distance 3 has 300 words (Hamming bound: 256 / 9)
    assert max_code_size(8, 3) < 300
    with pytest.raises(ConstructionFailed):
        generate_centers(HashConfig(8, 300), 3, seed=0, max_attempts=2)


def test_single_row_sentinel():
    cb = Codebook(HashConfig(16, 2), 1, np.ones((1, 16), np.int8), 0)
    assert verify_codebook(cb) == 17


def test_verify_matches_pairwise_oracle():
    cb = make_codebook(HashConfig(24, 12), seed=3)
    h = cb.centers
    oracle = min(int(np.sum(a != b)) for a, b in itertools.combinations(h, 2))
    assert verify_codebook(cb) == oracle


def test_same_seed_same_codebook():
    a = make_codebook(HashConfig(32, 20), seed=7)
    b = make_codebook(HashConfig(32, 20), seed=7)
    assert np.array_equal(a.centers, b.centers) and a.d == b.d


def test_make_codebook_records_reduction():
    cb = make_codebook(HashConfig(16, 10), seed=1)
    assert cb.meta["mode"] == LITERAL
    assert cb.meta["requested_d"] - cb.meta["reduced_by"] == cb.d
    assert verify_codebook(cb) >= cb.d


@settings(max_examples=30, deadline=None)
@given(q=st.integers(8, 64), c=st.integers(2, 32), seed=st.integers(0, 2**32 - 1))
def test_generated_codebooks_meet_distance(q, c, seed):
    cb = make_codebook(HashConfig(q, c), seed=seed)
    assert verify_codebook(cb) >= cb.d


def test_invalid_config():
    with pytest.raises(ValueError):
        HashConfig(7, 3)
    with pytest.raises(ValueError):
        HashConfig(16, 1)


def test_round_trip_and_errors(tmp_path):
    cb = make_codebook(HashConfig(16, 10), seed=1)
    path = tmp_path / "c.mlhc"
    save_codebook(cb, path)
    back = load_codebook(path)
    assert np.array_equal(back.centers, cb.centers) and (back.d, back.seed) == (cb.d, cb.seed)
    raw = path.read_bytes()
    (tmp_path / "t.mlhc").write_bytes(raw[:-3])
    with pytest.raises(TruncatedFile, match="truncated at offset"):
        load_codebook(tmp_path / "t.mlhc")
    (tmp_path / "m.mlhc").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(UnrecognizedFormat, match="unrecognized format"):
        load_codebook(tmp_path / "m.mlhc")
